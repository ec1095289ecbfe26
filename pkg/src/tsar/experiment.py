"""Experiment orchestration shared by the command line and scripted studies.

Every artifact written here embeds the resolved :class:`RunConfig` and the
package version.  Each seed gets its own ``seed_<n>`` subdirectory.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, resolve_data_path
from .data.checkpoint import load_checkpoint, save_checkpoint
from .data.datasets import ImageDataset, load_image_folder, scarce_subset, synthetic_glyphs
from .meta import MetaConfig, meta_train
from .model import (
    TsarModel,
    build,
    init_regulation_bias,
    param_shapes,
    preset,
    shape_mismatches,
)
from .transfer import TransferConfig, lr_grid_search, run_transfer, treatment_dataset

log = logging.getLogger(__name__)

META_PER_CLASS = 20
META_SPLIT = (15, 5)


def seed_dir(out, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def write_json(path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, default=float))
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# datasets and models
# ---------------------------------------------------------------------------


def meta_dataset(cfg: RunConfig) -> ImageDataset:
    """Meta-learning classes with the 15/5 split; scarce keeps a class subset."""
    in_shape = (3, 28, 28)
    path = resolve_data_path(cfg.data)
    if path is None:
        n = cfg.scarce_classes if cfg.regime == "scarce" else cfg.rich_classes
        return synthetic_glyphs(n, META_PER_CLASS, in_shape, seed=cfg.data_seed, domain=0, split=META_SPLIT)
    ds = load_image_folder(path, in_shape, split_spec=META_SPLIT)
    if cfg.regime == "scarce":
        ds = scarce_subset(ds, min(cfg.scarce_classes, ds.num_classes), seed=cfg.data_seed)
    return ds


def transfer_dataset(cfg: RunConfig) -> ImageDataset:
    """Unseen-domain classes with ``pool_per_class`` images each."""
    in_shape = (3, 28, 28)
    path = resolve_data_path(cfg.data)
    if path is None:
        n = max(2 * cfg.tasks, 40)
        return synthetic_glyphs(n, cfg.pool_per_class, in_shape, seed=cfg.data_seed, domain=1)
    return load_image_folder(path, in_shape, split_spec=None, min_images=cfg.images_per_task)


def variant_of(mode: str) -> str:
    return mode if mode in ("anml", "oml", "scratch") else "tsar"


def new_model(cfg: RunConfig, seed: int, num_classes: int) -> TsarModel:
    clf, reg = preset(cfg.preset, num_classes)
    variant = variant_of(cfg.mode)
    model = build(clf, reg, seed=seed, variant=variant)
    if variant == "tsar":
        init_regulation_bias(model, cfg.mode)
    elif variant == "anml":
        init_regulation_bias(model, "sculpt")
    return model


def check_architecture(model: TsarModel, cfg: RunConfig, explicit_preset: bool) -> None:
    """Reject a checkpoint whose layer shapes differ from the requested preset."""
    if not explicit_preset:
        return
    clf, reg = preset(cfg.preset, model.classifier.num_classes)
    bad = shape_mismatches(model, param_shapes(clf, reg, model.variant))
    if bad:
        raise ConfigError("run.preset", "checkpoint does not match preset: " + "; ".join(bad[:5]))


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------


def meta_train_run(cfg: RunConfig, seed: int, out=None, dataset: ImageDataset | None = None) -> dict:
    """Meta-train one seed; writes model.tsar, meta_log.jsonl and run.json."""
    ds = dataset if dataset is not None else meta_dataset(cfg)
    model = new_model(cfg, seed, ds.num_classes)
    mcfg = MetaConfig(
        iterations=cfg.iterations,
        inner_lr=cfg.inner_lr,
        outer_lr=cfg.outer_lr,
        order=cfg.order,
        probe_every=cfg.probe_every,
        seed=seed,
    )
    d = seed_dir(out, seed) if out is not None else None
    res = meta_train(model, ds, mcfg, log_path=d / "meta_log.jsonl" if d else None)
    accs = [r["retention_acc"] for r in res.log if r.get("retention_acc") is not None]
    tail = accs[-max(1, len(accs) // 10) :]
    summary = {
        "seed": seed,
        "final_retention_acc": float(np.mean(tail)) if tail else None,
        "aborted_iterations": sum(1 for r in res.log if r.get("aborted")),
        "config": cfg.to_dict(),
        "version": __version__,
    }
    if d is not None:
        summary["checkpoint"] = str(save_checkpoint(model, dict(cfg.to_dict(), seed=seed), d / "model.tsar"))
        write_json(d / "run.json", summary)
    summary["model"] = model
    return summary


def load_or_build(cfg: RunConfig, seed: int, explicit_preset: bool = False) -> TsarModel:
    if cfg.checkpoint:
        path = Path(cfg.checkpoint)
        if path.is_dir():
            path = seed_dir(path, seed) / "model.tsar"
        if not path.is_file():
            raise ConfigError("transfer.checkpoint", f"checkpoint not found: {path}")
        model, _ = load_checkpoint(path)
        check_architecture(model, cfg, explicit_preset)
        return model
    if cfg.mode == "scratch":
        return new_model(cfg, seed, cfg.tasks)
    if cfg.treatment == "reservoir" and variant_of(cfg.mode) == "tsar":
        # the regulator is re-randomized at transfer anyway, so no meta-learned state is needed
        return new_model(cfg, seed, max(cfg.tasks, 2))
    raise ConfigError("transfer.checkpoint", f"mode {cfg.mode!r} needs a checkpoint (only scratch and reservoir run without one)")


def transfer_config(cfg: RunConfig, seed: int, lr: float | None = None) -> TransferConfig:
    return TransferConfig(
        num_tasks=cfg.tasks,
        images_per_task=cfg.images_per_task,
        lr=lr if lr is not None else cfg.transfer_lr,
        seed=seed,
        treatment=cfg.treatment,
        trace_detail=cfg.trace_detail,
        tracked_band=tuple(cfg.tracked_band),
        validation_per_class=cfg.validation_per_class,
        record_weights=cfg.record_weights,
    )


def transfer_run(
    cfg: RunConfig,
    seed: int,
    out=None,
    model: TsarModel | None = None,
    dataset: ImageDataset | None = None,
    explicit_preset: bool = False,
) -> dict:
    """One transfer run; writes result.json (and trace.jsonl for gated models)."""
    model = model if model is not None else load_or_build(cfg, seed, explicit_preset)
    ds = dataset if dataset is not None else transfer_dataset(cfg)
    lr = cfg.transfer_lr
    grid = None
    if cfg.lr_grid:
        grid = lr_grid_search(model, ds, cfg.lr_grid, transfer_config(cfg, seed))
        if grid.best_lr is None:
            raise FloatingPointError("every learning rate in the grid diverged")
        lr = grid.best_lr
    tcfg = transfer_config(cfg, seed, lr)
    ties = None
    if cfg.treatment in ("enhancing", "diminishing", "mixed"):
        curated = treatment_dataset(model, ds, cfg.treatment, cfg.images_per_task, seed)
        ds, ties = curated.dataset, curated.ties
    d = seed_dir(out, seed) if out is not None else None
    res = run_transfer(model, ds, tcfg, trace_path=(d / "trace.jsonl") if d and model.gated else None)
    res.extra.pop("model", None)
    if grid is not None:
        res.extra["lr_grid"] = grid.table
    if ties is not None:
        res.extra["treatment_ties"] = ties
    doc = res.to_json(cfg.to_dict())
    doc["version"] = __version__
    if d is not None:
        write_json(d / "result.json", doc)
    doc["result"] = res
    return doc


# ---------------------------------------------------------------------------
# fleets
# ---------------------------------------------------------------------------


def _strip(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k not in ("model", "result")}


def _call(args):
    fn, cfg, seed, out, kwargs = args
    return _strip(fn(cfg, seed, out, **kwargs))


def fleet(fn: Callable, cfg: RunConfig, out=None, **kwargs) -> list[dict]:
    """Run ``fn(cfg, seed, out)`` for every seed, in worker processes when ``cfg.workers > 1``."""
    jobs = [(fn, cfg, seed, out, kwargs) for seed in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_call, jobs))
    return [_call(job) for job in jobs]


def with_seeds(cfg: RunConfig, seeds) -> RunConfig:
    return replace(cfg, seeds=list(seeds))
