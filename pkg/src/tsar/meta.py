"""Online-aware meta-learning (OML).

One meta-iteration: 20 sequential single-image SGD steps on one class
(inner loop), then a retention loss on 84 images evaluated at the adapted
weights and differentiated back to the initial weights (outer loop).  The
inner-loop weights are thrown away; only the initial weights move.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data.datasets import ImageDataset
from .model import TsarModel, forward, gated_forward, regulate, set_phase
from .tensor import Tensor, grad, no_grad, softmax_xent

log = logging.getLogger(__name__)

ORDERS = ("first", "second")


@dataclass
class MetaConfig:
    iterations: int = 1000
    inner_steps: int = 20
    retention_same: int = 20
    retention_other: int = 64
    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    order: str = "second"
    probe_size: int = 64
    probe_every: int = 1
    seed: int = 0


@dataclass
class MetaBatch:
    cls: int
    inner_idx: np.ndarray
    retention_idx: np.ndarray
    num_same: int

    @property
    def size(self) -> int:
        return len(self.retention_idx)


def validate_meta_dataset(dataset: ImageDataset, n_train: int = 15, n_test: int = 5) -> None:
    if dataset.num_classes < 2:
        raise ValueError("meta-learning needs at least 2 classes")
    train, test = dataset.counts("train"), dataset.counts("test")
    bad = [dataset.class_names[c] for c in range(dataset.num_classes) if train[c] < n_train or test[c] < n_test]
    if bad:
        raise ValueError(f"classes without a {n_train}/{n_test} train/test split: {bad[:10]}")


def sample_meta_batch(
    dataset: ImageDataset,
    rng: np.random.Generator,
    inner: int = 20,
    same: int = 20,
    other: int = 64,
) -> MetaBatch:
    """Inner sequence from one class's train images plus a retention set.

    Retention: ``same`` draws (with replacement) from that class's test
    images and ``other`` draws from every other class's test images (with
    replacement only when the pool is too small).
    """
    if dataset.num_classes < 2:
        raise ValueError("meta-learning needs at least 2 classes")
    c = int(rng.integers(dataset.num_classes))
    train = dataset.indices(c, "train")
    test = dataset.indices(c, "test")
    if len(train) == 0 or len(test) == 0:
        raise ValueError(f"class {dataset.class_names[c]} lacks train or test images")
    inner_idx = rng.choice(train, size=inner, replace=True)
    same_idx = rng.choice(test, size=same, replace=True)
    pool = np.flatnonzero(~dataset.is_train & (dataset.labels != c))
    other_idx = rng.choice(pool, size=other, replace=len(pool) < other)
    return MetaBatch(c, inner_idx, np.concatenate([same_idx, other_idx]), same)


# ---------------------------------------------------------------------------
# generic unrolled optimisation
# ---------------------------------------------------------------------------


@dataclass
class InnerResult:
    params: dict[str, Tensor]
    losses: list[float]
    create_graph: bool

    @property
    def steps(self) -> int:
        return len(self.losses)


def unroll(
    params: Mapping[str, Tensor],
    step_losses: Sequence[Callable[[Mapping[str, Tensor]], Tensor]],
    lr: float,
    trainable: Sequence[str],
    create_graph: bool = True,
) -> InnerResult:
    """Plain SGD through a sequence of losses, one step each.

    With ``create_graph`` every update stays on the graph, so a later loss
    can be differentiated through the whole trajectory back to ``params``.
    Without it the step gradients are constants (first-order approximation).
    """
    fast = dict(params)
    losses = []
    for loss_fn in step_losses:
        loss = loss_fn(fast)
        value = float(loss.data)
        losses.append(value)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite inner loss at step {len(losses) - 1}")
        if lr == 0.0:
            continue
        grads = grad(loss, [fast[n] for n in trainable], create_graph=create_graph)
        for name, g in zip(trainable, grads):
            fast[name] = fast[name] - g * lr
    return InnerResult(fast, losses, create_graph)


def meta_gradient(
    params: Mapping[str, Tensor],
    inner: InnerResult,
    outer_loss: Tensor,
    order: str = "second",
) -> dict[str, np.ndarray]:
    """d(outer_loss)/d(initial params) through the inner trajectory."""
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    if order == "second" and not inner.create_graph and inner.steps:
        raise ValueError("second-order meta-gradient needs an inner loop built with create_graph=True")
    names = [n for n, t in params.items() if t.requires_grad]
    grads = grad(outer_loss, [params[n] for n in names])
    return {n: g.data for n, g in zip(names, grads)}


class Adam:
    """Adam with bias correction; updates arrays in place."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# TSAR meta-learning
# ---------------------------------------------------------------------------


def _inner_trainable(model: TsarModel) -> list[str]:
    saved = model.frozen
    try:
        return set_phase(model, "meta_inner").trainable()
    finally:
        model.frozen = saved


def inner_loop(
    model: TsarModel,
    params: Mapping[str, Tensor],
    images: np.ndarray,
    labels: np.ndarray,
    inner_lr: float,
    create_graph: bool = True,
) -> InnerResult:
    """Sequential single-image updates of the inner-phase trainable weights.

    The regulator is frozen here, so gates for the whole sequence are
    computed in one batched pass; they stay attached to the regulator
    parameters so the outer loss still reaches them.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    gates = regulate(model, images, params)[1] if model.gated else None

    def step(k: int):
        def loss_fn(fast):
            gk = {layer: g[k : k + 1] for layer, g in gates.items()} if gates else None
            return softmax_xent(gated_forward(model, images[k : k + 1], gk, fast), labels[k : k + 1])

        return loss_fn

    return unroll(params, [step(k) for k in range(len(images))], inner_lr, _inner_trainable(model), create_graph)


@dataclass
class MetaState:
    iteration: int = 0
    optimizer: Adam = field(default_factory=Adam)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


def outer_step(
    state: MetaState,
    model: TsarModel,
    dataset: ImageDataset,
    batch: MetaBatch,
    inner_lr: float,
    order: str = "second",
) -> dict:
    """One full meta-iteration on ``batch``; updates ``model.params`` in place."""
    set_phase(model, "meta_outer")
    params = model.tensors(requires_grad=True)
    inner_images = dataset.images[batch.inner_idx]
    inner_labels = dataset.labels[batch.inner_idx]
    inner = inner_loop(model, params, inner_images, inner_labels, inner_lr, create_graph=order == "second")
    logits = forward(model, dataset.images[batch.retention_idx], inner.params)
    ret_labels = dataset.labels[batch.retention_idx]
    loss = softmax_xent(logits, ret_labels)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite retention loss")
    grads = meta_gradient(params, inner, loss, order)
    state.optimizer.step(model.params, grads)
    state.iteration += 1
    acc = float((logits.data.argmax(axis=1) == ret_labels).mean())
    return {"retention_loss": float(loss.data), "retention_acc": acc, "inner_loss_last": inner.losses[-1]}


def probe_gates(model: TsarModel, images: np.ndarray) -> np.ndarray:
    """All gate values (every layer, every probe image) concatenated."""
    with no_grad():
        _, gates = regulate(model, images)
    return np.concatenate([g.data.reshape(-1) for g in gates.values()])


def gate_percentiles(values: np.ndarray) -> dict[str, float]:
    qs = np.percentile(values, [1, 25, 50, 75, 99])
    out = {f"p{q}": float(v) for q, v in zip((1, 25, 50, 75, 99), qs)}
    out["mean"] = float(values.mean())
    return out


@dataclass
class MetaResult:
    model: TsarModel
    log: list[dict]
    config: MetaConfig
    probe_idx: np.ndarray


def meta_train(
    model: TsarModel,
    dataset: ImageDataset,
    config: MetaConfig,
    log_path: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> MetaResult:
    """Run ``config.iterations`` meta-iterations and return the meta-log.

    Each log record holds the retention accuracy and, every
    ``probe_every`` iterations, gate percentiles over a fixed probe set.
    A non-finite loss aborts that iteration only.
    """
    validate_meta_dataset(dataset)
    if config.order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    rng = np.random.default_rng(config.seed)
    probe_idx = rng.choice(len(dataset), size=min(config.probe_size, len(dataset)), replace=False)
    probe = dataset.images[probe_idx]
    state = MetaState(optimizer=Adam(config.outer_lr), rng=rng)
    records: list[dict] = []
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
    try:
        for m in range(config.iterations):
            t0 = time.perf_counter()
            rec: dict = {"iter": m}
            if model.gated and config.probe_every and m % config.probe_every == 0:
                rec["gate_percentiles"] = gate_percentiles(probe_gates(model, probe))
            batch = sample_meta_batch(dataset, rng, config.inner_steps, config.retention_same, config.retention_other)
            try:
                rec.update(outer_step(state, model, dataset, batch, config.inner_lr, config.order))
            except FloatingPointError as exc:
                log.warning("meta-iteration %d aborted: %s", m, exc)
                rec.update({"aborted": True, "retention_acc": None})
            rec["class"] = batch.cls
            rec["wallclock_ms"] = (time.perf_counter() - t0) * 1e3
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if progress:
                progress(rec)
        if model.gated:
            final = {"iter": config.iterations, "gate_percentiles": gate_percentiles(probe_gates(model, probe))}
            records.append(final)
            if fh:
                fh.write(json.dumps(final) + "\n")
    finally:
        if fh:
            fh.close()
    return MetaResult(model, records, config, probe_idx)


def config_dict(config: MetaConfig) -> dict:
    return asdict(config)
