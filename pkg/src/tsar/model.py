"""Regulator + classifier networks coupled by per-synapse multiplicative gates.

Parameters live in a flat ``name -> ndarray`` dict on :class:`TsarModel`.
Forward functions take an explicit ``params`` mapping of Tensors so the
meta-learning inner loop can run the same network on adapted copies.

Naming::

    clf.{c1,c2,c3}.{w,b}   classifier convolutions
    clf.cp.{w,b}           class prediction layer
    reg.{c1,c2,c3}.w       regulator perception convolutions
    reg.out.{layer}.{w,b}  regulatory output matrix for a classifier layer
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add_channel_bias,
    conv2d,
    flatten,
    instance_norm,
    linear,
    maxpool2d,
    no_grad,
    relu,
    sigmoid,
)

log = logging.getLogger(__name__)

GATED_LAYERS = ("c1", "c2", "c3", "cp")
CONV_LAYERS = ("c1", "c2", "c3")
VARIANTS = ("tsar", "anml", "oml", "scratch")

GROW_BIAS = -8.0
SCULPT_BIAS = 0.0
GROW_TRANSFER_CP_BIAS = -2.0
SCULPT_TRANSFER_CP_BIAS = 0.0


@dataclass(frozen=True)
class ClassifierConfig:
    in_shape: tuple[int, int, int] = (3, 28, 28)
    conv_channels: int = 112
    kernel: int = 3
    num_classes: int = 963
    pool_last: bool = True

    def stage_dims(self) -> list[tuple[str, int, int]]:
        """Spatial dims after every conv / pool stage, checking for collapse."""
        h, w = self.in_shape[1:]
        dims = []
        for i, layer in enumerate(CONV_LAYERS):
            h, w = h - self.kernel + 1, w - self.kernel + 1
            _check_stage(f"classifier {layer} conv", h, w)
            dims.append((f"{layer}.conv", h, w))
            if self.pool_last or i < 2:
                h, w = h // 2, w // 2
                _check_stage(f"classifier {layer} pool", h, w)
                dims.append((f"{layer}.pool", h, w))
        return dims

    @property
    def cp_in(self) -> int:
        _, h, w = self.stage_dims()[-1]
        return self.conv_channels * h * w


@dataclass(frozen=True)
class RegulatorConfig:
    conv_channels: int = 192
    kernel: int = 3
    output_bias_init: float = GROW_BIAS
    output_scale: float = 0.1

    def encoding_dim(self, in_shape: tuple[int, int, int]) -> int:
        h, w = in_shape[1:]
        for i, layer in enumerate(CONV_LAYERS):
            h, w = h - self.kernel + 1, w - self.kernel + 1
            _check_stage(f"regulator {layer} conv", h, w)
            if i < 2:
                h, w = h // 2, w // 2
                _check_stage(f"regulator {layer} pool", h, w)
        return self.conv_channels * h * w


def _check_stage(stage: str, h: int, w: int) -> None:
    if h < 1 or w < 1:
        raise ShapeError(f"spatial collapse at {stage}: dims ({h}, {w})")


PRESETS: dict[str, tuple[ClassifierConfig, RegulatorConfig]] = {
    "tiny": (ClassifierConfig(conv_channels=16), RegulatorConfig(conv_channels=24)),
    "paper": (ClassifierConfig(conv_channels=112), RegulatorConfig(conv_channels=192)),
}


def preset(name: str, num_classes: int) -> tuple[ClassifierConfig, RegulatorConfig]:
    try:
        clf, reg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return replace(clf, num_classes=num_classes), reg


def bias_for_mode(mode: str | float) -> float:
    """Initial regulatory output bias: grow -8, sculpt 0, or a custom value."""
    if isinstance(mode, (int, float)):
        return float(mode)
    key = mode.strip().lower()
    if key == "grow":
        return GROW_BIAS
    if key == "sculpt":
        return SCULPT_BIAS
    if key.startswith("custom_bias="):
        return float(key.split("=", 1)[1])
    raise ValueError(f"unknown regulation mode {mode!r}")


def transfer_cp_bias(mode: str | float) -> float:
    """Bias for the re-initialised CP regulatory output at transfer time.

    Grow-like (negative) initial biases reset to -2, the rest to 0.
    """
    return GROW_TRANSFER_CP_BIAS if bias_for_mode(mode) < 0 else SCULPT_TRANSFER_CP_BIAS


@dataclass
class TsarModel:
    classifier: ClassifierConfig
    regulator: RegulatorConfig | None
    variant: str = "tsar"
    params: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)
    mode: str | float = "grow"

    @property
    def gated(self) -> bool:
        return self.regulator is not None

    @property
    def encoding_dim(self) -> int:
        if self.regulator is None:
            return 0
        return self.regulator.encoding_dim(self.classifier.in_shape)

    def trainable(self) -> list[str]:
        return [k for k in sorted(self.params) if k not in self.frozen]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {
            k: Tensor(v, requires_grad=requires_grad and k not in self.frozen) for k, v in self.params.items()
        }

    def copy(self) -> "TsarModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, frozen=set(self.frozen))

    def parameter_report(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, arr in self.params.items():
            groups[param_group(name)] = groups.get(param_group(name), 0) + arr.size
        groups["total"] = sum(a.size for a in self.params.values())
        return groups


def param_group(name: str) -> str:
    if name.startswith("reg.out."):
        return "regulator_output"
    if name.startswith("reg."):
        return "regulator_conv"
    return "classifier"


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _classifier_params(cfg: ClassifierConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c_in, k, ch = cfg.in_shape[0], cfg.kernel, cfg.conv_channels
    params = {}
    for layer in CONV_LAYERS:
        params[f"clf.{layer}.w"] = _uniform(rng, (ch, c_in, k, k), c_in * k * k)
        params[f"clf.{layer}.b"] = np.zeros(ch)
        c_in = ch
    params["clf.cp.w"] = _uniform(rng, (cfg.num_classes, cfg.cp_in), cfg.cp_in)
    params["clf.cp.b"] = np.zeros(cfg.num_classes)
    return params


def _gate_targets(model: TsarModel) -> dict[str, tuple[int, ...]]:
    """Shape of the thing each regulatory output gates."""
    if model.variant == "anml":
        return {"r": (model.classifier.cp_in,)}
    return {layer: model.params[f"clf.{layer}.w"].shape for layer in GATED_LAYERS}


def _regulator_params(model: TsarModel, rng: np.random.Generator) -> dict[str, np.ndarray]:
    cfg = model.regulator
    c_in, k, ch = model.classifier.in_shape[0], cfg.kernel, cfg.conv_channels
    params = {}
    for layer in CONV_LAYERS:
        params[f"reg.{layer}.w"] = _uniform(rng, (ch, c_in, k, k), c_in * k * k)
        c_in = ch
    enc = model.encoding_dim
    for layer, shape in _gate_targets(model).items():
        n = int(np.prod(shape))
        params[f"reg.out.{layer}.w"] = _uniform(rng, (n, enc), enc, cfg.output_scale)
        params[f"reg.out.{layer}.b"] = np.full(n, cfg.output_bias_init)
    return params


def param_shapes(classifier: ClassifierConfig, regulator: RegulatorConfig | None, variant: str = "tsar") -> dict[str, tuple]:
    """Expected parameter shapes for a configuration, without allocating."""
    c_in, k, ch = classifier.in_shape[0], classifier.kernel, classifier.conv_channels
    shapes: dict[str, tuple] = {}
    for layer in CONV_LAYERS:
        shapes[f"clf.{layer}.w"] = (ch, c_in, k, k)
        shapes[f"clf.{layer}.b"] = (ch,)
        c_in = ch
    shapes["clf.cp.w"] = (classifier.num_classes, classifier.cp_in)
    shapes["clf.cp.b"] = (classifier.num_classes,)
    if regulator is None or variant in ("oml", "scratch"):
        return shapes
    c_in, rk, rch = classifier.in_shape[0], regulator.kernel, regulator.conv_channels
    for layer in CONV_LAYERS:
        shapes[f"reg.{layer}.w"] = (rch, c_in, rk, rk)
        c_in = rch
    enc = regulator.encoding_dim(classifier.in_shape)
    targets = {"r": (classifier.cp_in,)} if variant == "anml" else {layer: shapes[f"clf.{layer}.w"] for layer in GATED_LAYERS}
    for layer, shape in targets.items():
        n = int(np.prod(shape))
        shapes[f"reg.out.{layer}.w"] = (n, enc)
        shapes[f"reg.out.{layer}.b"] = (n,)
    return shapes


def shape_mismatches(model: "TsarModel", expected: Mapping[str, tuple]) -> list[str]:
    """Human-readable differences between a model's parameters and ``expected``."""
    out = []
    for name in sorted(set(model.params) | set(expected)):
        have = tuple(model.params[name].shape) if name in model.params else None
        want = tuple(expected[name]) if name in expected else None
        if have != want:
            out.append(f"{name}: checkpoint {have} vs expected {want}")
    return out


def build(
    classifier: ClassifierConfig,
    regulator: RegulatorConfig | None,
    seed: int = 0,
    variant: str = "tsar",
) -> TsarModel:
    """Initialise a model; ``regulator=None`` gives an ungated classifier."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant in ("oml", "scratch"):
        regulator = None
    if variant == "anml":
        classifier = replace(classifier, pool_last=False)
    classifier.stage_dims()
    rng = np.random.default_rng(seed)
    model = TsarModel(classifier=classifier, regulator=regulator, variant=variant)
    model.params.update(_classifier_params(classifier, rng))
    if regulator is not None:
        model.params.update(_regulator_params(model, rng))
    log.info("built %s model: %s", variant, model.parameter_report())
    return model


def init_regulation_bias(model: TsarModel, mode: str | float) -> TsarModel:
    """Set every regulatory output bias for grow (-8), sculpt (0) or custom."""
    b = bias_for_mode(mode)
    for name in model.params:
        if name.startswith("reg.out.") and name.endswith(".b"):
            model.params[name][...] = b
    model.mode = mode
    return model


def variant_build(kind: str, classifier: ClassifierConfig, regulator: RegulatorConfig | None = None, seed: int = 0):
    """ANML-style neuron gating, OML-style frozen RLN, or ungated Scratch."""
    kind = kind.lower()
    aliases = {"anml_style": "anml", "oml_style": "oml"}
    kind = aliases.get(kind, kind)
    if kind not in ("anml", "oml", "scratch"):
        raise ValueError(f"unknown variant {kind!r}")
    return build(classifier, regulator or RegulatorConfig(), seed=seed, variant=kind)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _as_images(model: TsarModel, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if tuple(x.shape[1:]) != tuple(model.classifier.in_shape):
        raise ShapeError(f"image shape {x.shape[1:]} does not match in_shape {model.classifier.in_shape}")
    return x


def encode(model: TsarModel, images, params: Mapping[str, Tensor]) -> Tensor:
    """Regulator perception: conv-IN-ReLU(-pool) x3, flattened."""
    h = _as_images(model, images)
    for i, layer in enumerate(CONV_LAYERS):
        h = relu(instance_norm(conv2d(h, params[f"reg.{layer}.w"])))
        if i < 2:
            h = maxpool2d(h)
    return flatten(h)


def regulate(model: TsarModel, images, params: Mapping[str, Tensor] | None = None):
    """Return ``(encoding, gates)``; ``gates[layer]`` has shape (N, *W.shape)."""
    if not model.gated:
        raise ValueError(f"{model.variant} model has no regulator")
    params = params if params is not None else model.tensors()
    enc = encode(model, images, params)
    n = enc.shape[0]
    gates = {}
    for layer, shape in _gate_targets(model).items():
        w, b = params[f"reg.out.{layer}.w"], params[f"reg.out.{layer}.b"]
        raw = enc @ w.swapaxes(0, 1) + b
        gates[layer] = sigmoid(raw).reshape((n,) + tuple(shape))
    return enc, gates


def _functional(w: Tensor, gate: Tensor | None) -> Tensor:
    if gate is None:
        return w.reshape((1,) + w.shape)
    if tuple(gate.shape[1:]) != tuple(w.shape):
        raise ShapeError(f"gate shape {gate.shape[1:]} does not match weight shape {w.shape}")
    return gate * w


def features(model: TsarModel, images, params: Mapping[str, Tensor], gates: Mapping[str, Tensor] | None = None):
    """Classifier conv stack output (flattened), optionally gated per synapse."""
    h = _as_images(model, images)
    cfg = model.classifier
    for i, layer in enumerate(CONV_LAYERS):
        w = _functional(params[f"clf.{layer}.w"], gates.get(layer) if gates else None)
        h = add_channel_bias(conv2d(h, w), params[f"clf.{layer}.b"])
        if not (cfg.pool_last or i < 2):
            h = relu(instance_norm(h))
        elif (h.shape[2] // 2) * (h.shape[3] // 2) > 1:
            h = relu(instance_norm(maxpool2d(h)))
        else:
            # pooling down to one pixel would leave nothing to normalize over
            h = maxpool2d(relu(instance_norm(h)))
    return flatten(h)


def gated_forward(model: TsarModel, images, gates: Mapping[str, Tensor] | None, params=None) -> Tensor:
    """Class logits with functional weights ``gate * W`` at every layer.

    ``gates=None`` runs the plain classifier.  Biases are never gated.
    """
    params = params if params is not None else model.tensors()
    if model.variant == "anml":
        r = features(model, images, params)
        if gates is not None:
            r = r * gates["r"]
        return linear(r, params["clf.cp.w"], params["clf.cp.b"])
    h = features(model, images, params, gates)
    w = _functional(params["clf.cp.w"], gates.get("cp") if gates else None)
    return linear(h, w, params["clf.cp.b"])


def forward(model: TsarModel, images, params: Mapping[str, Tensor] | None = None) -> Tensor:
    params = params if params is not None else model.tensors()
    gates = regulate(model, images, params)[1] if model.gated else None
    return gated_forward(model, images, gates, params)


def predict(model: TsarModel, images, batch_size: int = 128) -> np.ndarray:
    images = np.asarray(images)
    params = model.tensors()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(model, images[start : start + batch_size], params).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# protocol phases
# ---------------------------------------------------------------------------

PHASES = ("meta_inner", "meta_outer", "transfer", "transfer_fixed")


def set_phase(model: TsarModel, phase: str) -> TsarModel:
    """Apply the freeze flags for one protocol phase.

    TSAR: the regulator is frozen in the inner loop, everything trains in the
    outer loop, and only the regulator convolutions are frozen at transfer
    ("transfer_fixed" additionally freezes regulatory output to c1-c3).
    OML/ANML variants adapt only the prediction head in the inner loop and
    at transfer.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    names = set(model.params)
    reg_conv = {n for n in names if param_group(n) == "regulator_conv"}
    reg_out = {n for n in names if param_group(n) == "regulator_output"}
    head = {"clf.cp.w", "clf.cp.b"}
    if phase == "meta_outer":
        frozen: set[str] = set()
    elif model.variant in ("oml", "anml"):
        frozen = names - head
    elif phase == "meta_inner":
        frozen = reg_conv | reg_out
    else:
        frozen = set(reg_conv)
        if phase == "transfer_fixed":
            frozen |= {n for n in reg_out if not n.startswith("reg.out.cp.")}
    model.frozen = frozen
    return model


def reset_for_transfer(
    model: TsarModel,
    new_num_classes: int,
    mode: str | float | None = None,
    seed: int = 0,
    fixed: bool = False,
) -> TsarModel:
    """Fresh CP layer (and CP regulatory output) for a new class set."""
    if new_num_classes < 2:
        raise ValueError(f"new_num_classes must be >= 2, got {new_num_classes}")
    mode = model.mode if mode is None else mode
    rng = np.random.default_rng(seed)
    cfg = replace(model.classifier, num_classes=new_num_classes)
    model.classifier = cfg
    cp_in = cfg.cp_in
    model.params["clf.cp.w"] = _uniform(rng, (new_num_classes, cp_in), cp_in)
    model.params["clf.cp.b"] = np.zeros(new_num_classes)
    if model.gated and model.variant == "tsar":
        enc = model.encoding_dim
        n = new_num_classes * cp_in
        model.params["reg.out.cp.w"] = _uniform(rng, (n, enc), enc, model.regulator.output_scale)
        model.params["reg.out.cp.b"] = np.full(n, transfer_cp_bias(mode))
    set_phase(model, "transfer_fixed" if fixed else "transfer")
    return model
