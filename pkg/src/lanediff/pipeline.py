"""
Three-stage optimization, evaluation and ablation sweeps.

Stage I trains the condition encoder, the prior encoder with its injection
sites and a decoder on clean rasters with ground-truth priors. Stage II
freezes them and trains the denoiser on ``(x_0, x_c)`` pairs. Stage III
freezes the denoiser, switches it to averaged sampling and trains the
refinement with a fresh decoder on degraded inputs. The baseline trains a
fresh decoder directly on ``x_c``.

Stage boundaries are hard: every stage reloads the checkpoint of the stage
it depends on and only the parameters of its own networks receive
gradients.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import NamedTuple

import numpy as np
import pandas as pd
from tabulate import tabulate

from .checkpoint import MANIFEST_FILE
from .checkpoint import StageCheckpoint
from .checkpoint import load_checkpoint
from .checkpoint import require_checkpoint
from .checkpoint import save_checkpoint
from .config import threads
from .decoder import to_segment_graph
from .errors import ConfigError
from .errors import NumericalError
from .lane_graph import SegmentGraph
from .lpdm import overall_budget
from .lpdm import per_t_summary
from .lpdm import train_overall
from .lpdm import train_step
from .metrics import METRICS
from .metrics import MetricReport
from .metrics import evaluate_scene
from .model import STAGE_PREFIXES
from .model import LaneDiffusionModel
from .model import relative_mse
from .nn import ParamStore
from .nn import accumulate
from .nn import adamw_step
from .nn import cosine_lr
from .refine import VARIANTS
from .scene import degrade
from .scene import generate_scenes
from .scene import rasterize

SPLITS = {"train": 0, "val": 1, "test": 2}
STAGE_DIRS = {"I": "stage1", "II": "stage2", "III": "stage3", "baseline": "baseline"}
STAGE_INDEX = {"I": 0, "II": 1, "III": 2, "baseline": 2}
TAGS = {"I": 1, "II": 2, "III": 3, "baseline": 4, "eval": 5, "precompute": 6}
SWEEP_T = ((5, "sampling"), (15, "sampling"), (30, "sampling"), (5, "overall"))


class Scene(NamedTuple):
    """Ground-truth graph with its clean and degraded occupancy grids."""

    graph: SegmentGraph
    clean: np.ndarray
    degraded: np.ndarray


def _map(fn, items):
    workers = threads()
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def scene_seed(cfg, split, i):
    """Seed of scene ``i`` of ``split``; splits never share seeds."""
    if split not in SPLITS:
        raise ValueError(f"Unknown scene split '{split}', expected one of {tuple(SPLITS)}.")
    return cfg.seed * 10_000_000 + SPLITS[split] * 1_000_000 + i


def make_scenes(cfg, split="train", count=None):
    """
    Generate, rasterize and degrade the scenes of one split.

    Parameters
    ----------
    cfg : lanediff.config.RunConfig
    split : str
        ``"train"``, ``"val"`` or ``"test"``.
    count : int, optional
        Number of scenes; defaults to the configured split size.

    Returns
    -------
    list of Scene
    """
    if count is None:
        count = cfg.train.train_scenes if split == "train" else cfg.train.val_scenes
    seeds = [scene_seed(cfg, split, i) for i in range(count)]
    graphs = generate_scenes(cfg.scene, seeds, threads())

    def build(item):
        seed, graph = item
        clean = rasterize(graph, cfg.scene.resolution, cfg.scene.window)
        degraded = degrade(clean, replace(cfg.degrade, seed=cfg.degrade.seed + seed), graph)
        return Scene(graph, clean.grid, degraded.grid)

    scenes = _map(build, list(zip(seeds, graphs, strict=True)))
    logging.info(f"Generated {len(scenes)} {split} scenes with {sum(len(s.graph) for s in scenes)} segments.")
    return scenes


def stage_dir(cfg, stage):
    return os.path.join(cfg.paths.out, STAGE_DIRS[stage])


def _rng(cfg, tag, *keys):
    return np.random.default_rng([cfg.seed, TAGS[tag], *keys])


def train_epochs(store, loss_fn, n_items, epochs, lr0, batch, weight_decay, rng, prefixes, label, on_epoch=None):
    r"""
    Minibatch AdamW training with cosine learning-rate decay.

    Gradients of one batch are averaged; only parameters under ``prefixes``
    are updated. On a non-finite loss, gradient or parameter the store is
    reset to its last good state and the error re-raised.

    Parameters
    ----------
    store : lanediff.nn.ParamStore
        Parameters, updated in place and rounded to float32 at the end.
    loss_fn : callable
        ``loss_fn(params, index, rng) -> (loss, grads)``.
    n_items : int
        Number of training items.
    epochs : int
    lr0 : float
        Initial learning rate.
    batch : int
    weight_decay : float
    rng : numpy.random.Generator
        Drives the shuffling and is passed on to ``loss_fn``.
    prefixes : tuple of str
        Trainable parameter namespaces.
    label : str
        Name used in log messages.
    on_epoch : callable, optional
        Called with the epoch number after each epoch.

    Returns
    -------
    list of float
        Mean batch loss per epoch.
    """
    per_epoch = math.ceil(n_items / batch)
    total = epochs * per_epoch
    step = 0
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_items)
        losses = []
        lr = lr0
        for start in range(0, n_items, batch):
            idx = order[start : start + batch]
            good = {n: store[n].copy() for n in store.names(prefixes)}
            try:
                grads = {}
                batch_loss = 0.0
                for i in idx:
                    loss, g = loss_fn(store.params, int(i), rng)
                    if not np.isfinite(loss):
                        raise NumericalError(f"Non-finite {label} loss at epoch {epoch}, item {int(i)}.")
                    accumulate(grads, {n: v for n, v in g.items() if n.startswith(prefixes)}, 1.0 / len(idx))
                    batch_loss += loss / len(idx)
                lr = cosine_lr(step, total, lr0)
                adamw_step(store, grads, lr, weight_decay=weight_decay)
                if not store.is_finite():
                    raise NumericalError(f"Non-finite {label} parameters after step {step + 1}.")
            except NumericalError:
                for n, v in good.items():
                    store.params[n] = v
                raise
            step += 1
            losses.append(batch_loss)
            logging.debug(f"{label} epoch {epoch} step {step}/{total}: loss {batch_loss:.6f}, lr {lr:.3e}.")
        history.append(float(np.mean(losses)))
        logging.info(f"{label} epoch {epoch}/{epochs}: mean loss {history[-1]:.6f}, lr {lr:.3e}.")
        if on_epoch is not None:
            on_epoch(epoch)
    store.round_float32()
    return history


def _run_stage(stage, cfg, frozen, prepare, resume, epochs, validate):
    """
    Shared skeleton of all training stages.

    ``prepare(store)`` returns ``(loss_fn, n_items, on_epoch)`` and is only
    called when training actually happens. ``validate(params)`` returns
    ``(report, meta)``.
    """
    directory = stage_dir(cfg, stage)
    config_hash = cfg.model_hash(stage)
    model = LaneDiffusionModel(cfg)
    extras = {"epochs": 0, "history": []}
    if resume and os.path.exists(os.path.join(directory, MANIFEST_FILE)):
        previous = require_checkpoint(directory, stage, config_hash)
        n_epochs = 0 if epochs is None else epochs
        if n_epochs == 0:
            logging.info(f"Stage {stage} checkpoint in {directory} is up to date, nothing to train.")
            return previous
        store = ParamStore(previous.params)
        extras = dict(previous.extras)
        logging.info(f"Resuming stage {stage} from {directory} for {n_epochs} more epochs.")
    else:
        n_epochs = cfg.train.epochs[STAGE_INDEX[stage]] if epochs is None else epochs
        store = ParamStore(frozen)
        store.update(model.init_params(stage, _rng(cfg, stage, 0)))

    prefixes = STAGE_PREFIXES[stage]
    frozen_count = len(store) - len(store.names(prefixes))
    logging.info(
        f"Stage {stage}: {store.count(prefixes)} trainable parameters, {frozen_count} frozen arrays, {n_epochs} epochs."
    )
    loss_fn, n_items, on_epoch = prepare(store)
    lr0 = cfg.train.lr[STAGE_INDEX[stage]]
    rng = _rng(cfg, stage, 1, extras["epochs"])
    try:
        history = train_epochs(
            store,
            loss_fn,
            n_items,
            n_epochs,
            lr0,
            cfg.train.batch,
            cfg.train.weight_decay,
            rng,
            prefixes,
            f"Stage {stage}",
            on_epoch,
        )
    except NumericalError as e:
        store.round_float32()
        extras = {**extras, "aborted": str(e)}
        save_checkpoint(StageCheckpoint(stage, store.params, cfg.snapshot(), config_hash, None, extras), directory)
        logging.error(f"Stage {stage} aborted, last good parameters written to {directory}: {e}")
        raise

    extras = {"epochs": extras["epochs"] + n_epochs, "history": list(extras["history"]) + history}
    report, meta = validate(store.params)
    extras.update(meta)
    ckpt = StageCheckpoint(
        stage, store.params, cfg.snapshot(), config_hash, None if report is None else report.to_dict(), extras
    )
    save_checkpoint(ckpt, directory)
    return ckpt


def _validation(stage, cfg):
    def validate(params):
        if cfg.train.val_scenes == 0:
            return None, {}
        ckpt = StageCheckpoint(stage, params, cfg.snapshot(), cfg.model_hash(stage))
        report = evaluate(ckpt, cfg, split="val")
        return report, {}

    return validate


def stage1(cfg, resume=False, epochs=None, scenes=None):
    """
    Train condition encoder, injection, prior encoder and decoder on clean rasters.

    Parameters
    ----------
    cfg : lanediff.config.RunConfig
    resume : bool
        Continue from an existing stage I checkpoint.
    epochs : int, optional
        Epochs to train; on resume the number of additional epochs
        (default 0, which leaves the checkpoint untouched).
    scenes : list of Scene, optional
        Training scenes; generated from ``cfg`` if omitted.

    Returns
    -------
    lanediff.checkpoint.StageCheckpoint
    """

    def prepare(store):
        data = make_scenes(cfg, "train") if scenes is None else scenes
        model = LaneDiffusionModel(cfg)

        def loss_fn(params, i, rng):
            loss, _, grads = model.stage1_loss(params, data[i].clean, data[i].graph)
            return loss, grads

        return loss_fn, len(data), None

    return _run_stage("I", cfg, {}, prepare, resume, epochs, _validation("I", cfg))


def _frozen(cfg, stage):
    ckpt = require_checkpoint(stage_dir(cfg, stage), stage, cfg.model_hash(stage))
    return ckpt.params


def _features(cfg, params, data, with_target):
    model = LaneDiffusionModel(cfg)

    def build(scene):
        xc = model.condition(params, scene.degraded)
        x0 = model.target(params, scene.clean, scene.graph) if with_target else None
        return x0, xc

    return _map(build, data)


def stage2(cfg, resume=False, epochs=None, scenes=None):
    """
    Freeze stage I and train the denoiser on ``(x_0, x_c)`` pairs.

    With ``cfg.diffusion.paradigm == "overall"`` the full reverse chain is
    trained; the chain must fit ``cfg.diffusion.memory_steps`` denoiser
    evaluations.

    Raises
    ------
    ConfigError
        If the stage I checkpoint is missing or does not match ``cfg``, or
        the full chain exceeds the memory budget.
    """
    frozen = _frozen(cfg, "I")
    model = LaneDiffusionModel(cfg)
    d = cfg.diffusion
    handle_shape = (cfg.model.channels, *model.shape)
    budget = overall_budget(model.denoiser, handle_shape, d.memory_steps)
    records = []
    summaries = []
    if d.paradigm == "overall" and d.T * model.denoiser.activation_elements(handle_shape) > budget:
        raise ConfigError(
            f"Paradigm 'overall' with T={d.T} exceeds the memory budget of {d.memory_steps} denoiser evaluations."
        )

    def prepare(store):
        data = make_scenes(cfg, "train") if scenes is None else scenes
        pairs = _features(cfg, store.params, data, with_target=True)
        records.clear()

        def loss_fn(params, i, rng):
            x0, xc = pairs[i]
            handle = model.handle(params)
            if d.paradigm == "overall":
                return train_overall(x0, xc, handle, model.schedule, rng, max_elements=budget)
            loss, grads, t = train_step(x0, xc, handle, model.schedule, rng)
            records.append((t, loss))
            return loss, grads

        def on_epoch(epoch):
            if records:
                summaries.append(per_t_summary(records))
                logging.debug(f"Stage II epoch {epoch} loss per t:\n{summaries[-1].to_string()}")
                records.clear()

        return loss_fn, len(pairs), on_epoch

    def validate(params):
        if summaries:
            table = tabulate(summaries[-1], headers="keys", tablefmt="psql", floatfmt=".5f")
            logging.info(f"Stage II loss per t in the last epoch:\n{table}")
        if cfg.train.val_scenes == 0:
            return None, {}
        val = make_scenes(cfg, "val")
        pairs = _features(cfg, params, val, with_target=True)
        rng = _rng(cfg, "precompute", SPLITS["val"])
        rel_g = [relative_mse(model.generate(params, xc, rng), x0) for x0, xc in pairs]
        rel_c = [relative_mse(xc, x0) for x0, xc in pairs]
        meta = {"val_rel_mse_generated": float(np.mean(rel_g)), "val_rel_mse_condition": float(np.mean(rel_c))}
        logging.info(
            f"Stage II validation: relative MSE to x_0 of x_g {meta['val_rel_mse_generated']:.4f}, "
            f"of x_c {meta['val_rel_mse_condition']:.4f}."
        )
        ckpt = StageCheckpoint("II", params, cfg.snapshot(), cfg.model_hash("II"))
        return evaluate(ckpt, cfg, scenes=val), meta

    return _run_stage("II", cfg, frozen, prepare, resume, epochs, validate)


def precompute_generated(cfg, params, data, split="train"):
    """
    ``(x_g, x_c)`` of every scene, ``x_g`` from the frozen averaged sampler.

    Scene ``i`` samples with its own generator, so the result does not depend
    on the number of worker threads.
    """
    model = LaneDiffusionModel(cfg)

    def build(item):
        i, scene = item
        xc = model.condition(params, scene.degraded)
        return model.generate(params, xc, _rng(cfg, "precompute", SPLITS[split], i)), xc

    return _map(build, list(enumerate(data)))


def stage3(cfg, resume=False, epochs=None, scenes=None):
    """
    Freeze stages I and II and train refinement plus a fresh decoder on degraded inputs.

    The generated features are sampled once per training scene with
    ``cfg.diffusion.sample_runs`` averaged runs.
    """
    frozen = _frozen(cfg, "II")
    model = LaneDiffusionModel(cfg)

    def prepare(store):
        data = make_scenes(cfg, "train") if scenes is None else scenes
        pairs = precompute_generated(cfg, store.params, data)

        def loss_fn(params, i, rng):
            xg, xc = pairs[i]
            loss, _, grads = model.stage3_loss(params, xg, xc, data[i].graph)
            return loss, grads

        return loss_fn, len(data), None

    return _run_stage("III", cfg, frozen, prepare, resume, epochs, _validation("III", cfg))


def baseline(cfg, resume=False, epochs=None, scenes=None):
    """Freeze stage I and train a fresh decoder directly on ``x_c`` of degraded inputs."""
    frozen = _frozen(cfg, "I")
    model = LaneDiffusionModel(cfg)

    def prepare(store):
        data = make_scenes(cfg, "train") if scenes is None else scenes
        conditions = [xc for _, xc in _features(cfg, store.params, data, with_target=False)]

        def loss_fn(params, i, rng):
            loss, _, grads = model.decoder_loss("base", params, conditions[i], data[i].graph)
            return loss, grads

        return loss_fn, len(data), None

    return _run_stage("baseline", cfg, frozen, prepare, resume, epochs, _validation("baseline", cfg))


def evaluate(ckpt, cfg, split="val", scenes=None, out=None):
    """
    Decode every scene, threshold it into a graph and compute all metrics.

    Parameters
    ----------
    ckpt : StageCheckpoint or str
        Checkpoint or checkpoint directory.
    cfg : lanediff.config.RunConfig
        Must hash to the checkpoint's config hash.
    split : str
        Scene split generated when ``scenes`` is omitted.
    scenes : list of Scene, optional
    out : str, optional
        Directory receiving ``report.json`` and ``report.csv``.

    Returns
    -------
    lanediff.metrics.MetricReport

    Raises
    ------
    ConfigError
        If the checkpoint does not match ``cfg`` or is missing.
    ValueError
        If the scene set is empty.
    """
    if isinstance(ckpt, str):
        try:
            ckpt = load_checkpoint(ckpt)
        except FileNotFoundError as e:
            raise ConfigError(f"Cannot evaluate: {e}")
    expected = cfg.model_hash(ckpt.stage)
    if ckpt.config_hash != expected:
        raise ConfigError(
            f"Stage {ckpt.stage} checkpoint hash {ckpt.config_hash[:12]} does not match the configuration "
            f"({expected[:12]})."
        )
    scenes = make_scenes(cfg, split) if scenes is None else scenes
    if not scenes:
        raise ValueError("Cannot evaluate on an empty scene set.")

    model = LaneDiffusionModel(cfg)
    if ckpt.stage == "III":
        model.refiner.check_params(ckpt.params)
    e = cfg.eval

    def score(item):
        i, scene = item
        rng = _rng(cfg, "eval", i)
        pred = model.predict(ckpt.stage, ckpt.params, scene.clean, scene.degraded, scene.graph, rng)
        graph = to_segment_graph(pred, e.score_threshold, e.adjacency_threshold)
        if not len(graph):
            logging.warning(f"Scene {i}: no candidate above score threshold {e.score_threshold}.")
        row = evaluate_scene(graph, scene.graph, e, rng, cfg.scene.window)
        return {"scene": i, **row}

    rows = _map(score, list(enumerate(scenes)))
    unseeded = sum(1 for r in rows if r["jtopo_seeds"] == 0)
    if unseeded:
        logging.warning(f"{unseeded} of {len(rows)} scenes have no junction seeds for jtopo_f1.")
    meta = {"stage": ckpt.stage, "split": split, "config_hash": ckpt.config_hash, "variant": cfg.refine.variant}
    report = MetricReport.from_scenes(rows, meta)
    logging.info(f"Stage {ckpt.stage} evaluation on {len(rows)} scenes:\n{report.table()}")
    if out is not None:
        os.makedirs(out, exist_ok=True)
        report.to_json(os.path.join(out, "report.json"))
        report.to_csv(os.path.join(out, "report.csv"))
    return report


def _ensure(stage, cfg, run):
    directory = stage_dir(cfg, stage)
    if os.path.exists(os.path.join(directory, MANIFEST_FILE)):
        return require_checkpoint(directory, stage, cfg.model_hash(stage))
    return run(cfg)


def sweep(cfg, kind="T", out=None):
    """
    Ablation sweep with one report row per setting.

    ``kind="T"`` trains stages II and III for T in {5, 15, 30} with the
    sampling paradigm and for T = 5 with the full-chain paradigm.
    ``kind="refine"`` trains stage III once per refinement variant on a
    shared stage II.

    Returns
    -------
    pandas.DataFrame
        One row per setting with the aggregate metrics and the number of
        refinement parameters.
    """
    out = cfg.paths.out if out is None else out
    base = replace(cfg, paths=replace(cfg.paths, out=out))
    _ensure("I", base, stage1)
    rows = []
    if kind == "T":
        for T, paradigm in SWEEP_T:
            run = replace(
                base,
                diffusion=replace(base.diffusion, T=T, paradigm=paradigm),
                paths=replace(base.paths, out=os.path.join(out, f"{paradigm}_T{T}")),
            )
            os.makedirs(run.paths.out, exist_ok=True)
            _link_stage1(base, run)
            stage2(run)
            ckpt = stage3(run)
            report = evaluate(ckpt, run, out=run.paths.out)
            rows.append({"setting": f"{paradigm.capitalize()} T={T}", **report.aggregate})
    elif kind == "refine":
        _ensure("II", base, stage2)
        for variant in VARIANTS:
            run = replace(
                base,
                refine=replace(base.refine, variant=variant),
                paths=replace(base.paths, out=os.path.join(out, variant)),
            )
            os.makedirs(run.paths.out, exist_ok=True)
            _link_stage1(base, run, stages=("I", "II"))
            ckpt = stage3(run)
            report = evaluate(ckpt, run, out=run.paths.out)
            rows.append({"setting": variant, **report.aggregate, "refine_params": ckpt.count("refine.")})
    else:
        raise ValueError(f"Unknown sweep '{kind}', expected 'T' or 'refine'.")

    table = pd.DataFrame(rows, columns=["setting", *METRICS] + (["refine_params"] if kind == "refine" else []))
    path = os.path.join(out, f"sweep_{kind}.csv")
    table.to_csv(path, index=False)
    logging.info(
        f"Sweep '{kind}' written to {path}:\n"
        f"{tabulate(table.reset_index(drop=True), headers='keys', tablefmt='psql', floatfmt='.3f')}"
    )
    return table


def compare(cfg, seeds=3, split="test", out=None):
    """
    Stage III against the no-diffusion baseline, averaged over training seeds.

    Seed ``k`` trains all stages and the baseline with ``cfg.seed + k`` in its
    own directory; existing checkpoints are reused. Both arms of every seed
    are scored on the same held-out scenes, generated from ``cfg``.

    Parameters
    ----------
    cfg : lanediff.config.RunConfig
    seeds : int
        Number of training seeds.
    split : str
        Held-out split of the shared evaluation scenes.
    out : str, optional
        Root directory, defaults to ``cfg.paths.out``.

    Returns
    -------
    pandas.DataFrame
        Rows ``"III"``, ``"baseline"`` and ``"margin"`` (stage III minus
        baseline) of the seed-averaged aggregate metrics.
    """
    if seeds < 1:
        raise ValueError(f"compare needs at least one seed, got {seeds}.")
    if split == "train":
        raise ValueError("compare scores held-out scenes, not the 'train' split.")
    out = cfg.paths.out if out is None else out
    scenes = make_scenes(cfg, split)
    rows = []
    for k in range(seeds):
        run = replace(cfg, seed=cfg.seed + k, paths=replace(cfg.paths, out=os.path.join(out, f"seed{k}")))
        os.makedirs(run.paths.out, exist_ok=True)
        _ensure("I", run, stage1)
        _ensure("II", run, stage2)
        arms = {"III": _ensure("III", run, stage3), "baseline": _ensure("baseline", run, baseline)}
        for arm, ckpt in arms.items():
            report = evaluate(ckpt, run, split, scenes, out=os.path.join(run.paths.out, "eval", arm))
            rows.append({"seed": run.seed, "arm": arm, **report.aggregate})

    per_seed = pd.DataFrame(rows, columns=["seed", "arm", *METRICS])
    per_seed.to_csv(os.path.join(out, "compare_seeds.csv"), index=False)
    means = per_seed.groupby("arm")[list(METRICS)].mean()
    summary = means.loc[["III", "baseline"]].copy()
    summary.loc["margin"] = summary.loc["III"] - summary.loc["baseline"]
    path = os.path.join(out, "compare.csv")
    summary.to_csv(path, index_label="arm")
    logging.info(
        f"Stage III against the baseline over {seeds} seeds, written to {path}:\n"
        f"{tabulate(summary, headers='keys', tablefmt='psql', floatfmt='.3f')}"
    )
    for name in ("geo_f1", "topo_f1"):
        if summary.loc["margin", name] <= 0:
            logging.warning(f"Stage III does not beat the baseline on {name} ({summary.loc['margin', name]:+.3f}).")
    return summary


def _link_stage1(base, run, stages=("I",)):
    """Copy the shared checkpoints of ``base`` into the run directory of one sweep setting."""
    for stage in stages:
        ckpt = load_checkpoint(stage_dir(base, stage))
        if not os.path.exists(os.path.join(stage_dir(run, stage), MANIFEST_FILE)):
            save_checkpoint(ckpt, stage_dir(run, stage))
