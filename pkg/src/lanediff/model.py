"""
Assembly of the networks of all three stages.

Parameter namespaces: ``cond.`` (condition encoder with its injection
sites), ``prior.`` (prior encoder), ``dec.`` (stage I decoder),
``denoiser.`` (diffusion denoiser), ``refine.`` and ``dec3.`` (stage III
refinement and decoder) and ``base.`` (decoder of the no-diffusion
baseline).
"""

import numpy as np

from .decoder import LaneDecoder
from .decoder import lane_loss
from .lpdm import Denoiser
from .lpdm import DenoiserHandle
from .lpdm import build_schedule
from .lpdm import sample_averaged
from .lpim import ConditionEncoder
from .lpim import PriorEncoder
from .nn import accumulate
from .nn import build_layer
from .refine import Refiner
from .scene import raster_shape

STAGE_PREFIXES = {
    "I": ("cond.", "prior.", "dec."),
    "II": ("denoiser.",),
    "III": ("refine.", "dec3."),
    "baseline": ("base.",),
}


def architecture(cfg):
    """
    Layer type and constructor arguments of every network, keyed by parameter prefix.

    Parameters
    ----------
    cfg : lanediff.config.RunConfig

    Returns
    -------
    dict
        ``{prefix: (registered type name, kwargs)}``.
    """
    m = cfg.model
    shape = raster_shape(cfg.scene.window, cfg.scene.resolution)
    window = cfg.scene.window
    decoder = {
        "channels": m.channels,
        "shape": shape,
        "window": window,
        "queries": m.queries,
        "n_points": m.n_points,
        "dim": m.decoder_dim,
        "pos_dim": m.pos_dim,
        "heads": m.heads,
    }
    cond = {
        "channels": m.channels,
        "shape": shape,
        "window": window,
        "token_dim": m.token_dim,
        "groups": m.norm_groups,
        "heads": m.heads,
    }
    prior = {
        "n_points": m.n_points,
        "embed_dim": m.embed_dim,
        "hidden": m.token_dim,
        "layers": m.layers,
        "heads": m.heads,
    }
    denoiser = {
        "channels": m.channels,
        "widths": m.denoiser_widths,
        "temb_dim": m.temb_dim,
        "groups": m.denoiser_groups,
    }
    refine = {"variant": cfg.refine.variant, "channels": m.channels, "groups": m.norm_groups}
    return {
        "cond": (ConditionEncoder.__name__, cond),
        "prior": (PriorEncoder.__name__, prior),
        "dec": (LaneDecoder.__name__, decoder),
        "denoiser": (Denoiser.__name__, denoiser),
        "refine": (Refiner.__name__, refine),
        "dec3": (LaneDecoder.__name__, decoder),
        "base": (LaneDecoder.__name__, decoder),
    }


class LaneDiffusionModel:
    """
    All networks of one :class:`~lanediff.config.RunConfig`.

    Parameters
    ----------
    cfg : lanediff.config.RunConfig
    """

    def __init__(self, cfg):
        window = cfg.scene.window
        self.shape = raster_shape(window, cfg.scene.resolution)
        self.window = window
        self.loss_weights = tuple(cfg.train.loss_weights[:3])
        self.sample_runs = cfg.diffusion.sample_runs
        self.architecture = architecture(cfg)
        nets = {name: build_layer(kind, name=name, **kwargs) for name, (kind, kwargs) in self.architecture.items()}
        self.cond = nets["cond"]
        self.prior = nets["prior"]
        self.decoders = {name: nets[name] for name in ("dec", "dec3", "base")}
        self.denoiser = nets["denoiser"]
        self.refiner = nets["refine"]
        d = cfg.diffusion
        self.schedule = build_schedule(d.T, d.kappa, d.p, d.alpha2, d.weight_mode)

    def networks(self, stage):
        if stage == "I":
            return (self.cond, self.prior, self.decoders["dec"])
        if stage == "II":
            return (self.denoiser,)
        if stage == "III":
            return (self.refiner, self.decoders["dec3"])
        if stage == "baseline":
            return (self.decoders["base"],)
        raise ValueError(f"Unknown stage '{stage}'.")

    def init_params(self, stage, rng):
        """Fresh parameters of the networks trained in ``stage``."""
        params = {}
        for net in self.networks(stage):
            params.update(net.init_params(rng))
        return params

    def condition(self, params, grid):
        """``x_c``: the condition encoder on a raster grid, no prior injected."""
        return self.cond.forward(params, grid)[0]

    def target(self, params, grid, gt):
        """``x_0``: the condition encoder on a raster grid with the ground-truth priors injected."""
        tokens = self.prior.forward(params, gt)[0]
        return self.cond.forward(params, grid, tokens if len(tokens) else None)[0]

    def stage1_loss(self, params, grid, gt):
        """Decoder loss on ``x_0`` with gradients through decoder, injection and both encoders."""
        tokens, c_prior = self.prior.forward(params, gt)
        x0, c_cond = self.cond.forward(params, grid, tokens if len(tokens) else None)
        dec = self.decoders["dec"]
        pred, c_dec = dec.forward(params, x0)
        total, comps, dpred = lane_loss(pred, gt, self.loss_weights, with_grad=True)
        dx0, grads = dec.backward(params, c_dec, dpred)
        _, dtokens, g = self.cond.backward(params, c_cond, dx0)
        accumulate(grads, g)
        if dtokens is not None:
            _, g = self.prior.backward(params, c_prior, dtokens)
            accumulate(grads, g)
        return total, comps, grads

    def decoder_loss(self, name, params, feat, gt):
        """Loss of decoder ``name`` on a fixed feature; gradients of the decoder only."""
        dec = self.decoders[name]
        pred, cache = dec.forward(params, feat)
        total, comps, dpred = lane_loss(pred, gt, self.loss_weights, with_grad=True)
        _, grads = dec.backward(params, cache, dpred)
        return total, comps, grads

    def stage3_loss(self, params, xg, xc, gt):
        """Loss of refinement plus ``dec3`` on a fixed ``(x_g, x_c)`` pair."""
        xr, c_ref = self.refiner.forward(params, xg, xc)
        dec = self.decoders["dec3"]
        pred, c_dec = dec.forward(params, xr)
        total, comps, dpred = lane_loss(pred, gt, self.loss_weights, with_grad=True)
        dxr, grads = dec.backward(params, c_dec, dpred)
        _, _, g = self.refiner.backward(params, c_ref, dxr)
        accumulate(grads, g)
        return total, comps, grads

    def handle(self, params):
        return DenoiserHandle(self.denoiser, params)

    def generate(self, params, xc, rng):
        """``x_g``: the averaged sampler started from ``x_c``."""
        return sample_averaged(xc, self.handle(params), self.schedule, self.sample_runs, rng)

    def predict(self, stage, params, clean, degraded, gt, rng):
        """
        Decoder output of ``stage`` for one scene.

        Stage I decodes ``x_0`` of the clean raster with the ground-truth
        priors, stage II decodes the generated feature with the stage I
        decoder, stage III refines and decodes it with ``dec3`` and the
        baseline decodes ``x_c`` directly.
        """
        if stage == "I":
            return self.decoders["dec"].forward(params, self.target(params, clean, gt))[0]
        xc = self.condition(params, degraded)
        if stage == "baseline":
            return self.decoders["base"].forward(params, xc)[0]
        xg = self.generate(params, xc, rng)
        if stage == "II":
            return self.decoders["dec"].forward(params, xg)[0]
        xr = self.refiner.forward(params, xg, xc)[0]
        return self.decoders["dec3"].forward(params, xr)[0]


def relative_mse(estimate, target):
    """``||estimate - target||^2 / ||target||^2``, 0 for a zero target matched exactly."""
    denom = float(np.sum(np.asarray(target) ** 2))
    num = float(np.sum((np.asarray(estimate) - target) ** 2))
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / denom
