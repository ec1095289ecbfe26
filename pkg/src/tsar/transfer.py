"""Domain transfer: sequential single-image training over unseen classes.

Each task is one new class.  The model sees ``images_per_task`` images of
it, one SGD step per image, then moves on and never sees that class again.
Retention accuracy is measured on exactly the images trained on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data.datasets import ImageDataset
from .data.trace import RegulationTrace, write_trace
from .model import (
    GATED_LAYERS,
    TsarModel,
    bias_for_mode,
    gated_forward,
    predict,
    regulate,
    reset_for_transfer,
    _regulator_params,
)
from .tensor import grad, no_grad, softmax_xent

log = logging.getLogger(__name__)

TREATMENTS = ("normal", "enhancing", "diminishing", "mixed", "fixed", "reservoir")


class TransferDiverged(FloatingPointError):
    """A transfer run blew up: non-finite values, or a loss far above the chance-level loss."""


@dataclass
class TransferConfig:
    num_tasks: int = 20
    images_per_task: int = 10
    lr: float = 1e-2
    seed: int = 0
    treatment: str = "normal"
    trace_detail: str = "summary"
    tracked_band: tuple[float, float] = (0.0, 100.0)
    validation_per_class: int = 10
    record_weights: bool = False
    # a per-image loss this many times the chance-level loss ln(K) counts as divergence
    blowup_factor: float = 100.0

    def __post_init__(self) -> None:
        if self.treatment not in TREATMENTS:
            raise ValueError(f"treatment must be one of {TREATMENTS}, got {self.treatment!r}")
        if self.num_tasks < 1 or self.images_per_task < 1:
            raise ValueError("num_tasks and images_per_task must be positive")
        self.tracked_band = tuple(self.tracked_band)

    @property
    def total_steps(self) -> int:
        return self.num_tasks * self.images_per_task


@dataclass
class TransferResult:
    config: TransferConfig
    classes: list[int]
    retention_curve: list[float]
    per_task_retention: list[float]
    final_retention: float
    validation: float | None
    losses: list[float]
    trace: RegulationTrace | None = None
    trace_path: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def past_task_retention(self) -> float:
        """Final accuracy over every task but the last one."""
        past = self.per_task_retention[:-1]
        return float(np.mean(past)) if past else self.final_retention

    def to_json(self, run_config: dict | None = None) -> dict:
        return {
            "config": asdict(self.config),
            "run": run_config or {},
            "classes": self.classes,
            "retention_curve": self.retention_curve,
            "per_task_retention": self.per_task_retention,
            "final_retention": self.final_retention,
            "past_task_retention": self.past_task_retention,
            "validation": self.validation,
            "trace_path": self.trace_path,
            **self.extra,
        }

    def save(self, path, run_config: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(run_config), indent=2))
        tmp.replace(path)
        return path


def evaluate(model: TsarModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 128) -> float:
    """Fraction of images whose argmax prediction equals the label."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(predict(model, images, batch_size) == np.asarray(labels)))


def _tracked_ids(model: TsarModel, images: np.ndarray, band: tuple[float, float]) -> dict[str, np.ndarray | None]:
    """Synapses whose mean gate over ``images`` falls in the centile band."""
    lo, hi = band
    if lo <= 0.0 and hi >= 100.0:
        return {layer: None for layer in GATED_LAYERS}
    with no_grad():
        _, gates = regulate(model, images)
    out = {}
    for layer, g in gates.items():
        mean = g.data.reshape(len(images), -1).mean(axis=0)
        a, b = np.percentile(mean, [lo, hi])
        out[layer] = np.flatnonzero((mean >= a) & (mean <= b))
    return out


def prepare_model(model: TsarModel, num_tasks: int, treatment: str, seed: int) -> TsarModel:
    """Copy ``model`` and reset its head (and regulation of it) for transfer."""
    m = model.copy()
    if treatment == "reservoir" and m.gated:
        rng = np.random.default_rng([seed, 7])
        fresh = _regulator_params(m, rng)
        bias = bias_for_mode(m.mode or "grow")
        for name, value in fresh.items():
            if name.startswith("reg.out.") and name.endswith(".b"):
                value = np.full_like(value, bias)
            m.params[name] = value
    return reset_for_transfer(m, num_tasks, seed=seed, fixed=treatment == "fixed")


def _split_pool(dataset: ImageDataset, classes, cfg: TransferConfig, rng: np.random.Generator):
    train, val = [], []
    for c in classes:
        pool = dataset.indices(c)
        if len(pool) < cfg.images_per_task:
            raise ValueError(
                f"class {dataset.class_names[c]} has {len(pool)} images, fewer than images_per_task={cfg.images_per_task}"
            )
        perm = rng.permutation(pool)
        train.append(perm[: cfg.images_per_task])
        val.append(perm[cfg.images_per_task : cfg.images_per_task + cfg.validation_per_class])
    return train, val


def run_transfer(model: TsarModel, dataset: ImageDataset, config: TransferConfig, trace_path=None) -> TransferResult:
    """Train sequentially over ``num_tasks`` randomly ordered classes.

    The input model is not modified.  For gated models the gates for each
    image are recorded (before that image's update) at the configured
    trace detail.
    """
    cfg = config
    if cfg.num_tasks > dataset.num_classes:
        raise ValueError(f"num_tasks={cfg.num_tasks} exceeds the {dataset.num_classes} available classes")
    rng = np.random.default_rng(cfg.seed)
    classes = [int(c) for c in rng.choice(dataset.num_classes, size=cfg.num_tasks, replace=False)]
    train_idx, val_idx = _split_pool(dataset, classes, cfg, rng)
    # a single-task run still needs a two-way head; the spare output never trains positively
    m = prepare_model(model, max(cfg.num_tasks, 2), cfg.treatment, cfg.seed)
    trainable = m.trainable()
    blowup = cfg.blowup_factor * np.log(max(cfg.num_tasks, 2))

    trace = None
    if m.gated:
        probe = dataset.images[np.concatenate(train_idx)]
        layer_shapes = {layer: m.params[f"clf.{layer}.w"].shape for layer in GATED_LAYERS}
        tracked = _tracked_ids(m, probe, cfg.tracked_band) if cfg.trace_detail == "tracked" else {}
        trace = RegulationTrace(
            cfg.trace_detail,
            layer_shapes,
            tracked=tracked,
            weight_layers=("cp",) if cfg.record_weights else (),
            meta={"seed": cfg.seed, "treatment": cfg.treatment, "classes": classes},
        )

    seen_x, seen_y, losses, curve = [], [], [], []
    step = 0
    for t, idx in enumerate(train_idx):
        for k, i in enumerate(idx):
            x = dataset.images[i : i + 1]
            y = np.array([t])
            params = m.tensors(requires_grad=True)
            gates = None
            if m.gated:
                _, gates = regulate(m, x, params)
                if trace is not None:
                    weights = {"cp": m.params["clf.cp.w"]} if cfg.record_weights else None
                    trace.append(step, t, classes[t], int(i), {l: g.data[0] for l, g in gates.items()}, weights)
            loss = softmax_xent(gated_forward(m, x, gates, params), y)
            value = float(loss.data)
            losses.append(value)
            if not np.isfinite(value):
                raise TransferDiverged(f"non-finite loss at step {step} (lr={cfg.lr})")
            if value > blowup:
                raise TransferDiverged(f"loss {value:.3g} exceeds {blowup:.3g} at step {step} (lr={cfg.lr})")
            grads = grad(loss, [params[n] for n in trainable])
            for name, g in zip(trainable, grads):
                m.params[name] = m.params[name] - cfg.lr * g.data
            step += 1
        seen_x.append(dataset.images[idx])
        seen_y.append(np.full(len(idx), t))
        curve.append(evaluate(m, np.concatenate(seen_x), np.concatenate(seen_y)))
    if not all(np.isfinite(v).all() for v in m.params.values()):
        raise TransferDiverged(f"non-finite parameters after transfer (lr={cfg.lr})")

    per_task = [evaluate(m, seen_x[t], seen_y[t]) for t in range(cfg.num_tasks)]
    vx = [dataset.images[v] for v in val_idx if len(v)]
    vy = [np.full(len(v), t) for t, v in enumerate(val_idx) if len(v)]
    validation = evaluate(m, np.concatenate(vx), np.concatenate(vy)) if vx else None
    result = TransferResult(
        config=cfg,
        classes=classes,
        retention_curve=curve,
        per_task_retention=per_task,
        final_retention=curve[-1],
        validation=validation,
        losses=losses,
        trace=trace,
    )
    result.extra["model"] = m
    if trace is not None and trace_path is not None:
        result.trace_path = str(write_trace(trace, trace_path))
    return result


# ---------------------------------------------------------------------------
# learning-rate grid
# ---------------------------------------------------------------------------


@dataclass
class GridResult:
    best_lr: float | None
    table: list[dict]


def lr_grid_search(model: TsarModel, dataset: ImageDataset, grid, config: TransferConfig) -> GridResult:
    """Short transfer per learning rate; best final retention wins, ties to the smaller lr."""
    lrs = sorted({float(lr) for lr in grid})
    if not lrs:
        raise ValueError("learning-rate grid is empty")
    table = []
    for lr in lrs:
        try:
            res = run_transfer(model, dataset, replace(config, lr=lr, trace_detail="summary"))
            table.append({"lr": lr, "final_retention": res.final_retention, "diverged": False})
        except TransferDiverged as exc:
            log.warning("lr %g diverged: %s", lr, exc)
            table.append({"lr": lr, "final_retention": None, "diverged": True})
    ok = [row for row in table if not row["diverged"]]
    best = None
    if ok:
        top = max(row["final_retention"] for row in ok)
        best = min(row["lr"] for row in ok if row["final_retention"] == top)
    return GridResult(best, table)


# ---------------------------------------------------------------------------
# enhancing / diminishing curation
# ---------------------------------------------------------------------------


def image_mean_gates(model: TsarModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Mean regulatory output over every gate of every layer, per image."""
    if not model.gated:
        raise ValueError("image ranking needs a model with a regulator")
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            _, gates = regulate(model, images[start : start + batch_size])
            n = min(batch_size, len(images) - start)
            total = sum(g.data.reshape(n, -1).sum(axis=1) for g in gates.values())
            count = sum(int(np.prod(g.shape[1:])) for g in gates.values())
            out.append(total / count)
    return np.concatenate(out)


@dataclass
class Curated:
    dataset: ImageDataset
    ties: bool
    mean_gates: np.ndarray
    source: np.ndarray  # per kept image: +1 enhancing pool, -1 diminishing pool


def treatment_dataset(model: TsarModel, dataset: ImageDataset, kind: str, count: int, seed: int = 0) -> Curated:
    """Keep ``count`` images per class by mean elicited regulation.

    enhancing: top ``count``; diminishing: bottom ``count``; mixed: each of
    ``count`` slots draws (without replacement) from the top or bottom pool
    with equal probability.  ``ties`` flags a selection cut that falls
    between equal mean gates.
    """
    kind = kind.lower()
    if kind not in ("enhancing", "diminishing", "mixed"):
        raise ValueError(f"unknown treatment kind {kind!r}")
    short = [dataset.class_names[c] for c, n in enumerate(dataset.counts()) if n < 2 * count]
    if short:
        raise ValueError(f"classes with fewer than {2 * count} images: {short[:10]}")
    rng = np.random.default_rng(seed)
    mean = image_mean_gates(model, dataset.images)
    keep, source, ties = [], [], False
    for c in range(dataset.num_classes):
        idx = dataset.indices(c)
        # stable sort by descending mean gate, index order breaks ties
        order = idx[np.argsort(-mean[idx], kind="stable")]
        top, bottom = order[:count], order[-count:]
        ties |= bool(mean[order[count - 1]] == mean[order[count]])
        ties |= bool(mean[order[-count]] == mean[order[-count - 1]])
        if kind == "enhancing":
            chosen, src = top, np.ones(count, dtype=int)
        elif kind == "diminishing":
            chosen, src = bottom, -np.ones(count, dtype=int)
        else:
            coins = rng.random(count) < 0.5
            n_top = int(coins.sum())
            chosen = np.concatenate([rng.choice(top, n_top, replace=False), rng.choice(bottom, count - n_top, replace=False)])
            src = np.concatenate([np.ones(n_top, dtype=int), -np.ones(count - n_top, dtype=int)])
        keep.append(chosen)
        source.append(src)
    keep = np.concatenate(keep)
    ds = ImageDataset(
        dataset.images[keep],
        dataset.labels[keep],
        list(dataset.class_names),
        name=f"{dataset.name}-{kind}",
        meta=dict(dataset.meta, treatment=kind, count=count),
    )
    return Curated(ds, ties, mean[keep], np.concatenate(source))
