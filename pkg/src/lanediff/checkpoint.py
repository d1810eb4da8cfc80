"""
Stage checkpoints.

A checkpoint is a directory holding two files:

- ``params.bin``: the magic ``b"LDCK"``, a little-endian ``uint32`` format
  version, the 32-byte SHA-256 config hash and then every parameter as
  little-endian float32, in sorted name order.
- ``manifest.json``: stage tag, config snapshot and hash, parameter names,
  shapes and offsets, the validation report and free-form extras.

Both files are written deterministically, so equal contents give equal bytes.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from .config import STAGES
from .errors import ConfigError

MAGIC = b"LDCK"
VERSION = 1
PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"


@dataclass(eq=False)
class StageCheckpoint:
    """
    Parameters and metadata emitted by one training stage.

    Parameters
    ----------
    stage : str
        ``"I"``, ``"II"``, ``"III"`` or ``"baseline"``.
    params : dict
        Parameter arrays by name; all frozen earlier stages included.
    config : dict
        :meth:`~lanediff.config.RunConfig.snapshot` of the producing run.
    config_hash : str
        :meth:`~lanediff.config.RunConfig.model_hash` for ``stage``.
    report : dict, optional
        :meth:`~lanediff.metrics.MetricReport.to_dict` of the validation pass.
    extras : dict
        Training bookkeeping such as epochs done and loss history.
    """

    stage: str
    params: dict
    config: dict
    config_hash: str
    report: dict = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"Unknown stage '{self.stage}', expected one of {STAGES}.")
        if len(bytes.fromhex(self.config_hash)) != 32:
            raise ValueError(f"Config hash must be a SHA-256 hex digest, got '{self.config_hash}'.")

    def count(self, prefix=""):
        return int(sum(np.size(v) for n, v in self.params.items() if n.startswith(prefix)))


def _blob(ckpt):
    names = sorted(ckpt.params)
    header = MAGIC + struct.pack("<I", VERSION) + bytes.fromhex(ckpt.config_hash)
    chunks, layout, offset = [header], [], 0
    for name in names:
        arr = np.asarray(ckpt.params[name], dtype="<f4")
        chunks.append(arr.tobytes())
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    return b"".join(chunks), layout


def save_checkpoint(ckpt, directory):
    """
    Write ``ckpt`` into ``directory`` (created if needed).

    Returns
    -------
    str
        SHA-256 of the written ``params.bin``.
    """
    os.makedirs(directory, exist_ok=True)
    blob, layout = _blob(ckpt)
    manifest = {
        "stage": ckpt.stage,
        "version": VERSION,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "params": layout,
        "report": ckpt.report,
        "extras": ckpt.extras,
    }
    with open(os.path.join(directory, PARAMS_FILE), "wb") as f:
        f.write(blob)
    with open(os.path.join(directory, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=4, sort_keys=True)
    digest = hashlib.sha256(blob).hexdigest()
    logging.info(f"Stage {ckpt.stage} checkpoint ({len(layout)} arrays) written to {directory}.")
    return digest


def load_checkpoint(directory):
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    FileNotFoundError
        If the directory or one of its files is missing.
    ConfigError
        If the blob header does not match the manifest or the blob is truncated.
    """
    params_path = os.path.join(directory, PARAMS_FILE)
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    for path in (params_path, manifest_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"Checkpoint file not found: {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    with open(params_path, "rb") as f:
        blob = f.read()

    head = len(MAGIC) + 4 + 32
    if len(blob) < head or blob[:4] != MAGIC:
        raise ConfigError(f"{params_path} is not a checkpoint blob.")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise ConfigError(f"Unsupported checkpoint version {version} in {params_path}.")
    if blob[8:head].hex() != manifest["config_hash"]:
        raise ConfigError(f"Config hash of {params_path} does not match its manifest.")

    data = np.frombuffer(blob, dtype="<f4", offset=head)
    params = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"], dtype=int))
        start = entry["offset"]
        if start + size > data.size:
            raise ConfigError(f"Checkpoint blob {params_path} is truncated at '{entry['name']}'.")
        params[entry["name"]] = data[start : start + size].astype(float).reshape(entry["shape"])
    return StageCheckpoint(
        stage=manifest["stage"],
        params=params,
        config=manifest["config"],
        config_hash=manifest["config_hash"],
        report=manifest["report"],
        extras=manifest["extras"],
    )


def require_checkpoint(directory, stage, config_hash):
    """
    Load the checkpoint of ``stage`` and check it against ``config_hash``.

    Raises
    ------
    ConfigError
        If the checkpoint is missing, of another stage or built with a
        different model configuration.
    """
    try:
        ckpt = load_checkpoint(directory)
    except FileNotFoundError as e:
        raise ConfigError(f"Stage {stage} checkpoint required: {e}")
    if ckpt.stage != stage:
        raise ConfigError(f"Checkpoint in {directory} is stage {ckpt.stage}, expected stage {stage}.")
    if ckpt.config_hash != config_hash:
        raise ConfigError(
            f"Checkpoint in {directory} was built with config hash {ckpt.config_hash[:12]}, "
            f"the current configuration hashes to {config_hash[:12]}."
        )
    return ckpt
