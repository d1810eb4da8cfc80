r"""
Residual-shifting diffusion between prior-injected and condition features.

The forward chain moves the mean of :math:`x_t` from the diffusion target
:math:`x_0` towards the condition feature :math:`x_c` by the scheduled
fraction :math:`\eta_t` of the residual :math:`x_c - x_0`:

.. math::

    q(x_t \mid x_0, x_c) = \mathcal{N}\left(x_t;\; x_0 + \eta_t (x_c - x_0),\;
    \kappa^2 \eta_t I\right)

Sampling starts at :math:`x_T \sim \mathcal{N}(x_c, \kappa^2 \eta_T I)` and
walks the tractable posterior back to :math:`t = 1` with a learned
:math:`x_0` predictor :math:`f_\theta(x_t, x_c, t)`.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError
from .errors import NumericalError
from .nn import GELU
from .nn import AvgPool2
from .nn import Conv2d
from .nn import Dense
from .nn import GroupNorm
from .nn import Layer
from .nn import Upsample2
from .nn import accumulate
from .nn import layer_registry
from .nn import sinusoidal_embed

ETA_T = 0.999
WEIGHT_MODES = ("unit", "posterior")


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    r"""
    Geometric shifting schedule and derived per-step quantities.

    Arrays are indexed by ``t - 1`` for :math:`t = 1 \dots T`; use the
    accessor methods to index by ``t``.

    Parameters
    ----------
    T : int
        Number of diffusion steps.
    kappa : float
        Noise scale :math:`\kappa`.
    p : float
        Growth-rate exponent.
    b0 : float
        Geometric base :math:`b_0`.
    sqrt_eta, eta, gamma, weights : numpy.ndarray
        :math:`\sqrt{\eta_t}`, :math:`\eta_t`, :math:`\gamma_t` and the loss
        weights :math:`w_t` of ``weight_mode``.
    alpha2 : float
        Numerator of the posterior-mode loss weights.
    weight_mode : str
        ``"unit"`` (:math:`w_t = 1`) or ``"posterior"``.
    """

    T: int
    kappa: float
    p: float
    b0: float
    sqrt_eta: np.ndarray
    eta: np.ndarray
    gamma: np.ndarray
    weights: np.ndarray
    alpha2: float = 1.0
    weight_mode: str = "unit"

    def _check(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"Timestep {t} outside [1, {self.T}].")
        return int(t) - 1

    def eta_at(self, t):
        return float(self.eta[self._check(t)])

    def sqrt_eta_at(self, t):
        return float(self.sqrt_eta[self._check(t)])

    def gamma_at(self, t):
        return float(self.gamma[self._check(t)])

    def weight(self, t):
        return float(self.weights[self._check(t)])

    def posterior_weights(self):
        r""":math:`w_t = \alpha_2 / (2 \kappa^2 \eta_t \eta_{t-1})` with :math:`\eta_0 := \eta_1`."""
        eta_prev = np.concatenate([[self.eta[0]], self.eta[:-1]])
        return self.alpha2 / (2.0 * self.kappa**2 * self.eta * eta_prev)


def build_schedule(T, kappa, p, alpha2=1.0, weight_mode="unit"):
    r"""
    Build the non-uniform geometric shifting schedule.

    .. math::

        \sqrt{\eta_t} = \begin{cases}
        \min\left(0.04/\kappa, \sqrt{0.001}\right) & t = 1\\
        \sqrt{\eta_1}\, b_0^{\zeta_t} & 1 < t < T\\
        \sqrt{0.999} & t = T
        \end{cases}
        \qquad
        \zeta_t = \left(\frac{t-1}{T-1}\right)^p (T-1),\quad
        b_0 = \exp\left(\frac{\log(\eta_T/\eta_1)}{2(T-1)}\right)

    Parameters
    ----------
    T : int
        Number of steps, at least 2.
    kappa : float
        Noise scale, positive.
    p : float
        Growth-rate exponent in ``(0, 1]``.
    alpha2 : float
        Posterior-mode weight numerator.
    weight_mode : str
        ``"unit"`` or ``"posterior"``.

    Returns
    -------
    DiffusionSchedule

    Raises
    ------
    ValueError
        If a hyperparameter is out of range.
    """
    if int(T) != T or T < 2:
        raise ValueError(f"The number of diffusion steps must be an integer >= 2, got {T}.")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}.")
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}.")
    if weight_mode not in WEIGHT_MODES:
        raise ValueError(f"Unknown weight mode '{weight_mode}', expected one of {WEIGHT_MODES}.")
    T = int(T)

    sqrt_eta1 = min(0.04 / kappa, np.sqrt(0.001))
    eta1 = sqrt_eta1**2
    b0 = np.exp(0.5 * np.log(ETA_T / eta1) / (T - 1))

    sqrt_eta = np.empty(T)
    sqrt_eta[0] = sqrt_eta1
    for t in range(2, T):
        zeta = ((t - 1) / (T - 1)) ** p * (T - 1)
        sqrt_eta[t - 1] = sqrt_eta1 * b0**zeta
    sqrt_eta[T - 1] = np.sqrt(ETA_T)

    eta = sqrt_eta**2
    eta[T - 1] = ETA_T
    if np.any(np.diff(eta) <= 0):
        raise ValueError(f"Schedule (T={T}, kappa={kappa}, p={p}) is not strictly increasing.")
    gamma = np.diff(eta, prepend=0.0)

    sched = DiffusionSchedule(
        T=T,
        kappa=float(kappa),
        p=float(p),
        b0=float(b0),
        sqrt_eta=sqrt_eta,
        eta=eta,
        gamma=gamma,
        weights=np.ones(T),
        alpha2=float(alpha2),
        weight_mode=weight_mode,
    )
    if weight_mode == "posterior":
        object.__setattr__(sched, "weights", sched.posterior_weights())
    for arr in (sched.sqrt_eta, sched.eta, sched.gamma, sched.weights):
        arr.setflags(write=False)
    logging.debug(f"Schedule T={T} kappa={kappa} p={p}: b0={b0:.6f}, eta_1={eta1:.3e}, weights '{weight_mode}'.")
    return sched


def schedule_table(sched):
    """Schedule as a table with columns ``t, sqrt_eta, eta, gamma, w``."""
    return pd.DataFrame(
        {
            "t": np.arange(1, sched.T + 1),
            "sqrt_eta": sched.sqrt_eta,
            "eta": sched.eta,
            "gamma": sched.gamma,
            "w": sched.weights,
        }
    )


def save_schedule(sched, path):
    schedule_table(sched).to_csv(path, index=False)
    logging.info(f"Schedule with T={sched.T} written to {path}.")


def _features(x):
    return np.asarray(getattr(x, "features", x), dtype=float)


def forward_sample(x0, xc, t, sched, rng=None, noise=None):
    r"""
    Draw :math:`x_t = x_0 + \eta_t (x_c - x_0) + \kappa \sqrt{\eta_t}\, \epsilon`.

    Parameters
    ----------
    x0, xc : numpy.ndarray or BevGrid
        Target and condition features of equal shape.
    t : int
        Timestep in ``[1, T]``.
    sched : DiffusionSchedule
    rng : numpy.random.Generator, optional
        Noise source, used when ``noise`` is not given.
    noise : numpy.ndarray, optional
        Explicit :math:`\epsilon`.

    Returns
    -------
    numpy.ndarray
    """
    x0, xc = _features(x0), _features(xc)
    if x0.shape != xc.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match xc shape {xc.shape}.")
    eta = sched.eta_at(t)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    return x0 + eta * (xc - x0) + sched.kappa * sched.sqrt_eta_at(t) * noise


def forward_step(x_prev, x0, xc, t, sched, rng=None, noise=None):
    r"""
    One forward transition :math:`x_{t-1} \to x_t`,
    :math:`\mathcal{N}(x_{t-1} + \gamma_t (x_c - x_0), \kappa^2 \gamma_t I)`.

    For ``t = 1`` the previous state is :math:`x_0`.
    """
    x_prev, x0, xc = _features(x_prev), _features(x0), _features(xc)
    gamma = sched.gamma_at(t)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    return x_prev + gamma * (xc - x0) + sched.kappa * np.sqrt(gamma) * noise


def posterior_coefficients(t, sched):
    r"""
    ``(a, b, var)`` with mean :math:`a x_t + b \hat{x}_0` and variance ``var``.

    Raises
    ------
    ValueError
        If ``t < 2``.
    """
    if t < 2:
        raise ValueError(f"The posterior is defined for t >= 2, got {t}.")
    eta_t, eta_prev, gamma = sched.eta_at(t), sched.eta_at(t - 1), sched.gamma_at(t)
    return eta_prev / eta_t, gamma / eta_t, sched.kappa**2 * eta_prev * gamma / eta_t


def posterior_mean_var(x_t, x0_hat, t, sched):
    r"""
    Mean and variance of :math:`q(x_{t-1} \mid x_t, \hat{x}_0, x_c)`.

    .. math::

        \mu = \frac{\eta_{t-1}}{\eta_t} x_t + \frac{\gamma_t}{\eta_t} \hat{x}_0,
        \qquad
        \sigma^2 = \kappa^2 \frac{\eta_{t-1}}{\eta_t} \gamma_t
    """
    a, b, var = posterior_coefficients(t, sched)
    return a * _features(x_t) + b * _features(x0_hat), var


@layer_registry
class Denoiser(Layer):
    r"""
    Two-level convolutional encoder-decoder :math:`f_\theta(x_t, x_c, t)`.

    ``conv3x3(2C -> w1)`` plus a projected timestep embedding, GELU (skip),
    2x2 pool, ``conv3x3(w1 -> w2)`` + GroupNorm + GELU, upsample, concatenation
    with the skip, ``conv3x3(w1 + w2 -> w1)`` + GELU, ``conv3x3(w1 -> C)``.

    Parameters
    ----------
    name : str
        Parameter prefix.
    channels : int
        Feature channels ``C``.
    widths : tuple of int
        Channel widths of the two levels.
    temb_dim : int
        Timestep embedding size.
    groups : int
        Group-norm groups of the inner level.
    """

    def __init__(self, name="denoiser", channels=8, widths=(16, 32), temb_dim=32, groups=4):
        super().__init__(name)
        w1, w2 = widths
        self.channels = channels
        self.widths = tuple(widths)
        self.temb_dim = temb_dim
        self.conv_in = Conv2d(f"{name}.conv_in", 2 * channels, w1, 3)
        self.temb = Dense(f"{name}.temb", temb_dim, w1)
        self.act_in = GELU()
        self.pool = AvgPool2("pool")
        self.conv_mid = Conv2d(f"{name}.conv_mid", w1, w2, 3)
        self.norm_mid = GroupNorm(f"{name}.norm_mid", w2, groups)
        self.act_mid = GELU()
        self.up = Upsample2("up")
        self.conv_up = Conv2d(f"{name}.conv_up", w1 + w2, w1, 3)
        self.act_up = GELU()
        self.conv_out = Conv2d(f"{name}.conv_out", w1, channels, 3)
        self.parts = (self.conv_in, self.temb, self.conv_mid, self.norm_mid, self.conv_up, self.conv_out)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.channels:
            raise ValueError(f"{self} expects {self.channels} channels, got {c}.")
        if h % 2 or w % 2:
            raise ValueError(f"{self} needs even spatial extents, got {tuple(input_shape)}.")
        return tuple(input_shape)

    def activation_elements(self, shape):
        """Rough count of cached activation elements for one evaluation."""
        c, h, w = shape
        n = h * w
        w1, w2 = self.widths
        encoder = 2 * c * 9 * n + 3 * w1 * n
        inner = w1 * 9 * n // 4 + 3 * w2 * n // 4 + w2 * n
        decoder = (w1 + w2) * 9 * n + w1 * n + w1 * 9 * n
        return int(encoder + inner + decoder)

    def forward(self, params, x_t, x_c, t):
        x_t, x_c = _features(x_t), _features(x_c)
        self.output_shape(x_t.shape)
        if x_c.shape != x_t.shape:
            raise ValueError(f"x_t shape {x_t.shape} does not match x_c shape {x_c.shape}.")
        emb = sinusoidal_embed(float(t), self.temb_dim)
        h0, c_in = self.conv_in.forward(params, np.concatenate([x_t, x_c]))
        tb, c_temb = self.temb.forward(params, emb)
        skip, c_act_in = self.act_in.forward(params, h0 + tb[:, None, None])
        p, _ = self.pool.forward(params, skip)
        m, c_mid = self.conv_mid.forward(params, p)
        m, c_norm = self.norm_mid.forward(params, m)
        m, c_act_mid = self.act_mid.forward(params, m)
        u, _ = self.up.forward(params, m)
        d, c_up = self.conv_up.forward(params, np.concatenate([u, skip]))
        d, c_act_up = self.act_up.forward(params, d)
        y, c_out = self.conv_out.forward(params, d)
        return y, (c_in, c_temb, c_act_in, c_mid, c_norm, c_act_mid, c_up, c_act_up, c_out)

    def backward(self, params, cache, dy):
        """Returns ``(dx_t, dx_c, grads)``."""
        c_in, c_temb, c_act_in, c_mid, c_norm, c_act_mid, c_up, c_act_up, c_out = cache
        w2 = self.widths[1]
        grads = {}
        dd, g = self.conv_out.backward(params, c_out, dy)
        accumulate(grads, g)
        dd, _ = self.act_up.backward(params, c_act_up, dd)
        dcat, g = self.conv_up.backward(params, c_up, dd)
        accumulate(grads, g)
        du, dskip = dcat[:w2], dcat[w2:]
        dm, _ = self.up.backward(params, None, du)
        dm, _ = self.act_mid.backward(params, c_act_mid, dm)
        dm, g = self.norm_mid.backward(params, c_norm, dm)
        accumulate(grads, g)
        dp, g = self.conv_mid.backward(params, c_mid, dm)
        accumulate(grads, g)
        dskip = dskip + self.pool.backward(params, None, dp)[0]
        dh, _ = self.act_in.backward(params, c_act_in, dskip)
        _, g = self.temb.backward(params, c_temb, dh.sum(axis=(1, 2)))
        accumulate(grads, g)
        dxin, g = self.conv_in.backward(params, c_in, dh)
        accumulate(grads, g)
        return dxin[: self.channels], dxin[self.channels :], grads


class DenoiserHandle:
    """
    A :class:`Denoiser` bound to its parameters.

    Parameters
    ----------
    net : Denoiser
        Architecture.
    params : dict or lanediff.nn.ParamStore
        Parameters of ``net``.
    """

    def __init__(self, net, params):
        self.net = net
        self.params = params

    def predict(self, x_t, x_c, t):
        return self.net.forward(self.params, x_t, x_c, t)[0]

    def forward(self, x_t, x_c, t):
        return self.net.forward(self.params, x_t, x_c, t)

    def backward(self, cache, dpred):
        """Returns ``(dx_t, grads)``."""
        dx_t, _, grads = self.net.backward(self.params, cache, dpred)
        return dx_t, grads

    def activation_elements(self, shape):
        return self.net.activation_elements(shape)


def _weighted_mse(pred, x0, w):
    diff = pred - x0
    return w * float(np.mean(diff**2)), w * 2.0 * diff / diff.size


def train_step(x0, xc, denoiser, sched, rng, weight_mode=None, t=None):
    r"""
    One stochastic evaluation of the simplified diffusion loss.

    Draws :math:`t \sim \mathcal{U}\{1, \dots, T\}` and :math:`x_t` from the
    forward marginal, then evaluates
    :math:`w_t \lVert f_\theta(x_t, x_c, t) - x_0 \rVert^2` as a mean over
    elements.

    Parameters
    ----------
    x0, xc : numpy.ndarray
        Target and condition features.
    denoiser : DenoiserHandle
        Anything with ``forward(x_t, x_c, t)`` and ``backward(cache, dpred)``.
    sched : DiffusionSchedule
    rng : numpy.random.Generator
    weight_mode : str, optional
        Overrides the schedule's weight mode.
    t : int, optional
        Fixed timestep instead of a uniform draw.

    Returns
    -------
    tuple
        ``(loss, grads, t)``.

    Raises
    ------
    NumericalError
        If the loss is not finite.
    """
    x0, xc = _features(x0), _features(xc)
    t = int(rng.integers(1, sched.T + 1)) if t is None else int(t)
    x_t = forward_sample(x0, xc, t, sched, rng)
    pred, cache = denoiser.forward(x_t, xc, t)
    mode = sched.weight_mode if weight_mode is None else weight_mode
    if mode not in WEIGHT_MODES:
        raise ValueError(f"Unknown weight mode '{mode}', expected one of {WEIGHT_MODES}.")
    w = 1.0 if mode == "unit" else float(sched.posterior_weights()[t - 1])
    loss, dpred = _weighted_mse(pred, x0, w)
    if not np.isfinite(loss):
        raise NumericalError(f"Non-finite diffusion loss at t={t}.")
    _, grads = denoiser.backward(cache, dpred)
    return loss, grads, t


def sample(xc, denoiser, sched, rng, deterministic_last_step=True, noise_scale=1.0):
    r"""
    Generate a feature from the condition-based prior.

    Parameters
    ----------
    xc : numpy.ndarray or BevGrid
        Condition feature.
    denoiser : DenoiserHandle
        Anything with ``predict(x_t, x_c, t)``.
    sched : DiffusionSchedule
    rng : numpy.random.Generator
    deterministic_last_step : bool
        Emit the prediction at ``t = 1`` without noise.
    noise_scale : float
        Multiplier of every injected noise draw; 0 makes the chain
        deterministic.

    Returns
    -------
    numpy.ndarray
        The generated feature :math:`x_g`.
    """
    xc = _features(xc)
    x = xc + noise_scale * sched.kappa * sched.sqrt_eta_at(sched.T) * rng.standard_normal(xc.shape)
    for t in range(sched.T, 0, -1):
        x0_hat = denoiser.predict(x, xc, t)
        if t > 1:
            mean, var = posterior_mean_var(x, x0_hat, t, sched)
            x = mean + noise_scale * np.sqrt(var) * rng.standard_normal(xc.shape)
        elif deterministic_last_step:
            x = x0_hat
        else:
            x = x0_hat + noise_scale * sched.kappa * sched.sqrt_eta_at(1) * rng.standard_normal(xc.shape)
    return x


def sample_averaged(xc, denoiser, sched, runs=3, rng=None, noise_scale=1.0):
    """
    Element-wise mean of ``runs`` consecutive :func:`sample` draws from ``rng``.

    Raises
    ------
    ValueError
        If ``runs < 1``.
    """
    if runs < 1:
        raise ValueError(f"The number of sampling runs must be at least 1, got {runs}.")
    total = sample(xc, denoiser, sched, rng, noise_scale=noise_scale)
    for _ in range(runs - 1):
        total = total + sample(xc, denoiser, sched, rng, noise_scale=noise_scale)
    return total / runs


def overall_budget(denoiser, shape, steps=5):
    """Default activation budget of the full-chain paradigm: ``steps`` denoiser evaluations."""
    return steps * denoiser.activation_elements(shape)


def train_overall(x0, xc, denoiser, sched, rng, weight_mode=None, max_elements=None, noise_scale=1.0):
    r"""
    Full-chain loss: run all ``T`` reverse steps and penalize every prediction.

    .. math::

        \mathcal{L} = \sum_{t=1}^{T} w_t \lVert f_\theta(x_t, x_c, t) - x_0 \rVert^2

    where the :math:`x_t` come from the sampler itself, so gradients flow
    through the whole chain.

    Parameters
    ----------
    x0, xc : numpy.ndarray
    denoiser : DenoiserHandle
    sched : DiffusionSchedule
    rng : numpy.random.Generator
    weight_mode : str, optional
        Overrides the schedule's weight mode.
    max_elements : int, optional
        Activation budget; defaults to five denoiser evaluations.
    noise_scale : float
        Multiplier of the injected noise.

    Returns
    -------
    tuple
        ``(loss, grads)``.

    Raises
    ------
    ConfigError
        If the chain does not fit the activation budget.
    NumericalError
        If the loss is not finite.
    """
    x0, xc = _features(x0), _features(xc)
    per_step = denoiser.activation_elements(xc.shape)
    budget = 5 * per_step if max_elements is None else max_elements
    if sched.T * per_step > budget:
        raise ConfigError(
            f"Full-chain training with T={sched.T} needs {sched.T * per_step} activation elements, "
            f"budget is {budget}."
        )
    mode = sched.weight_mode if weight_mode is None else weight_mode
    weights = np.ones(sched.T) if mode == "unit" else sched.posterior_weights()

    x = xc + noise_scale * sched.kappa * sched.sqrt_eta_at(sched.T) * rng.standard_normal(xc.shape)
    steps = []
    loss = 0.0
    for t in range(sched.T, 0, -1):
        pred, cache = denoiser.forward(x, xc, t)
        step_loss, dpred = _weighted_mse(pred, x0, float(weights[t - 1]))
        loss += step_loss
        steps.append((t, cache, dpred))
        if t > 1:
            a, b, var = posterior_coefficients(t, sched)
            x = a * x + b * pred + noise_scale * np.sqrt(var) * rng.standard_normal(xc.shape)
    if not np.isfinite(loss):
        raise NumericalError(f"Non-finite full-chain loss with T={sched.T}.")

    grads = {}
    dx_next = np.zeros_like(xc)
    for t, cache, dpred in reversed(steps):
        if t > 1:
            a, b, _ = posterior_coefficients(t, sched)
            dpred = dpred + b * dx_next
        dx, g = denoiser.backward(cache, dpred)
        accumulate(grads, g)
        dx_next = dx + (a * dx_next if t > 1 else 0.0)
    return loss, grads


def per_t_summary(records):
    """Mean loss and count per timestep from ``(t, loss)`` records."""
    frame = pd.DataFrame(records, columns=["t", "loss"])
    return frame.groupby("t")["loss"].agg(["mean", "count"])
