"""
Run configuration.

A :class:`RunConfig` is a tree of frozen dataclasses, one per TOML section.
It is loaded and validated the way input files are checked elsewhere in the
package: unknown sections or keys and out-of-range values raise a
:class:`~lanediff.errors.ConfigError` that names them.
"""

import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import replace

from .errors import ConfigError
from .lpdm import WEIGHT_MODES
from .metrics import MetricConfig
from .refine import VARIANTS
from .scene import DegradeConfig
from .scene import SceneConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PARADIGMS = ("sampling", "overall")
STAGES = ("I", "II", "III", "baseline")


@dataclass(frozen=True)
class ModelConfig:
    """
    Network sizes.

    Parameters
    ----------
    channels : int
        BEV feature channels ``C``.
    token_dim : int
        Prior token size ``H``.
    layers : int
        Prior encoder attention blocks ``L``.
    heads : int
        Attention heads everywhere.
    queries : int
        Decoder candidates ``K``.
    n_points : int
        Points per polyline ``N``.
    embed_dim : int
        Sinusoidal embedding size ``d`` per coordinate.
    decoder_dim : int
        Decoder query width.
    pos_dim : int
        Per-coordinate size of the cell position embedding.
    norm_groups : int
        Group-norm groups of the ``C``-channel blocks.
    denoiser_widths : tuple of int
        Channel widths of the denoiser levels.
    denoiser_groups : int
        Group-norm groups of the inner denoiser level.
    temb_dim : int
        Timestep embedding size.
    """

    channels: int = 8
    token_dim: int = 32
    layers: int = 2
    heads: int = 1
    queries: int = 12
    n_points: int = 20
    embed_dim: int = 32
    decoder_dim: int = 32
    pos_dim: int = 8
    norm_groups: int = 2
    denoiser_widths: tuple = (16, 32)
    denoiser_groups: int = 4
    temb_dim: int = 32

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            values = value if isinstance(value, tuple) else (value,)
            if any(int(v) != v or v < 1 for v in values):
                raise ValueError(f"model.{f.name} must be a positive integer, got {value}.")
        if self.n_points < 2:
            raise ValueError(f"model.n_points must be at least 2, got {self.n_points}.")
        if self.embed_dim % 2 or self.pos_dim % 2 or self.temb_dim % 2:
            raise ValueError("Embedding sizes must be even.")
        if self.channels % self.norm_groups:
            raise ValueError(f"{self.norm_groups} groups do not divide {self.channels} channels.")


@dataclass(frozen=True)
class DiffusionConfig:
    """
    Diffusion schedule and paradigm.

    Parameters
    ----------
    T : int
        Diffusion steps.
    kappa : float
        Noise scale.
    p : float
        Growth-rate exponent.
    weight_mode : str
        ``"unit"`` or ``"posterior"`` loss weights.
    alpha2 : float
        Posterior-mode weight numerator.
    paradigm : str
        ``"sampling"`` trains single steps, ``"overall"`` the full chain.
    sample_runs : int
        Averaged sampling runs at inference.
    memory_steps : int
        Activation budget of the full chain in denoiser evaluations.
    """

    T: int = 15
    kappa: float = 2.0
    p: float = 0.3
    weight_mode: str = "unit"
    alpha2: float = 1.0
    paradigm: str = "sampling"
    sample_runs: int = 3
    memory_steps: int = 5

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise ValueError(f"diffusion.T must be an integer >= 2, got {self.T}.")
        if self.kappa <= 0 or not 0 < self.p <= 1:
            raise ValueError(f"Invalid diffusion kappa={self.kappa} or p={self.p}.")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"diffusion.weight_mode must be one of {WEIGHT_MODES}, got '{self.weight_mode}'.")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"diffusion.paradigm must be one of {PARADIGMS}, got '{self.paradigm}'.")
        if self.sample_runs < 1 or self.memory_steps < 1:
            raise ValueError("diffusion.sample_runs and diffusion.memory_steps must be at least 1.")


@dataclass(frozen=True)
class RefineConfig:
    variant: str = "concat_ed"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"refine.variant must be one of {VARIANTS}, got '{self.variant}'.")


@dataclass(frozen=True)
class TrainConfig:
    """
    Training lengths and optimizer settings.

    Parameters
    ----------
    train_scenes, val_scenes : int
        Number of generated training and validation scenes.
    epochs : tuple of int
        Epochs of stages I, II and III; the baseline uses the stage III value.
    lr : tuple of float
        Initial learning rates of stages I, II and III.
    batch : int
        Scenes per optimizer step.
    weight_decay : float
        Decoupled AdamW weight decay.
    loss_weights : tuple of float
        :math:`\\lambda_1 \\dots \\lambda_6`; only the first three are used.
    """

    train_scenes: int = 200
    val_scenes: int = 50
    epochs: tuple = (30, 30, 30)
    lr: tuple = (3e-3, 3e-4, 3e-3)
    batch: int = 8
    weight_decay: float = 0.01
    loss_weights: tuple = (2.0, 5.0, 1.0, 0.005, 0.01, 0.1)

    def __post_init__(self):
        if self.train_scenes < 1 or self.val_scenes < 0 or self.batch < 1:
            raise ValueError("train.train_scenes and train.batch must be positive, train.val_scenes non-negative.")
        if len(self.epochs) != 3 or any(e < 0 for e in self.epochs):
            raise ValueError(f"train.epochs must hold three non-negative values, got {self.epochs}.")
        if len(self.lr) != 3 or any(v <= 0 for v in self.lr):
            raise ValueError(f"train.lr must hold three positive values, got {self.lr}.")
        if len(self.loss_weights) != 6:
            raise ValueError(f"train.loss_weights must hold six values, got {self.loss_weights}.")


@dataclass(frozen=True)
class PathsConfig:
    out: str = "runs/desk"


SECTIONS = {
    "scene": SceneConfig,
    "degrade": DegradeConfig,
    "model": ModelConfig,
    "diffusion": DiffusionConfig,
    "refine": RefineConfig,
    "train": TrainConfig,
    "eval": MetricConfig,
    "paths": PathsConfig,
}


def _section(name, cls, values):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in section [{name}]: {unknown}.")
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value) if isinstance(value, list) else value
        if isinstance(getattr(defaults, key), float) and isinstance(value, int) and not isinstance(value, bool):
            kwargs[key] = float(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid section [{name}]: {e}")


@dataclass(frozen=True)
class RunConfig:
    """
    Complete experiment configuration.

    Use :meth:`desk` for the CPU-scale defaults, :meth:`full` for the
    full-scale sizes and :meth:`from_toml` to load a file.
    """

    scene: SceneConfig = field(default_factory=SceneConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: MetricConfig = field(default_factory=MetricConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def full(cls):
        """Full-scale sizes and learning rates; far beyond CPU training budgets."""
        return cls(
            model=ModelConfig(token_dim=256, layers=6, heads=8),
            train=TrainConfig(epochs=(24, 24, 24), lr=(6e-4, 6e-5, 6e-4), batch=16),
            paths=PathsConfig(out="runs/full"),
        )

    @classmethod
    def from_dict(cls, data, base=None):
        """
        Build a configuration from nested ``{section: {key: value}}`` data.

        Sections not present keep the values of ``base`` (default :meth:`desk`).

        Raises
        ------
        ConfigError
            On unknown sections, unknown keys or invalid values.
        """
        base = cls.desk() if base is None else base
        unknown = sorted(set(data) - set(SECTIONS) - {"seed", "preset"})
        if unknown:
            raise ConfigError(f"Unknown configuration sections: {unknown}.")
        updates = {}
        for name, section_cls in SECTIONS.items():
            if name in data:
                if not isinstance(data[name], dict):
                    raise ConfigError(f"Section [{name}] must be a table.")
                merged = {**asdict(getattr(base, name)), **data[name]}
                updates[name] = _section(name, section_cls, merged)
        if "seed" in data:
            if not isinstance(data["seed"], int) or data["seed"] < 0:
                raise ConfigError(f"seed must be a non-negative integer, got {data['seed']!r}.")
            updates["seed"] = data["seed"]
        return replace(base, **updates)

    @classmethod
    def from_toml(cls, path):
        """
        Load a TOML file; a top-level ``preset = "full"`` starts from :meth:`full`.

        Raises
        ------
        FileNotFoundError
            If ``path`` does not exist.
        ConfigError
            If the file is not valid TOML or fails validation.
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"File not found: {path}")
        with open(path, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"Invalid TOML in {path}: {e}")
        preset = data.get("preset", "desk")
        if preset not in ("desk", "full"):
            raise ConfigError(f"Unknown preset '{preset}', expected 'desk' or 'full'.")
        cfg = cls.from_dict(data, cls.full() if preset == "full" else cls.desk())
        logging.info(f"Configuration loaded from {path} (preset '{preset}', hash {cfg.model_hash()[:12]}).")
        return cfg

    def snapshot(self):
        """JSON-ready dictionary of all settings."""
        return json.loads(json.dumps(asdict(self)))

    def model_hash(self, stage="III"):
        """
        SHA-256 over the settings that define the model up to ``stage``.

        Stage I covers the scene window and resolution and the model sizes,
        stage II adds the diffusion settings, stage III adds the refinement
        variant. The baseline shares the stage I hash.
        """
        if stage not in STAGES:
            raise ValueError(f"Unknown stage '{stage}', expected one of {STAGES}.")
        data = {
            "window": self.scene.window,
            "resolution": self.scene.resolution,
            "model": asdict(self.model),
        }
        if stage in ("II", "III"):
            data["diffusion"] = asdict(self.diffusion)
        if stage == "III":
            data["refine"] = asdict(self.refine)
        text = json.dumps(json.loads(json.dumps(data)), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def threads():
    """Worker threads allowed by ``LANEDIFF_THREADS`` (default 1)."""
    value = os.environ.get("LANEDIFF_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"LANEDIFF_THREADS must be an integer, got '{value}'.")
    if n < 1:
        raise ConfigError(f"LANEDIFF_THREADS must be at least 1, got {n}.")
    return n
