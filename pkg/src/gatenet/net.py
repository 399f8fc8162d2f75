"""Gated dual-branch segmentation network, its loss and an Adam trainer.

Pipeline: encoder (5 levels, strides 1..16) -> transitions to 32 channels
(level 5 optionally through an ASPP-family module) -> top-down decoder with
gated transition features -> optional parallel branch that concatenates
the decoder output with all gated transitions -> residual fusion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import gates as G
from .foldconv import AsppConfig, aspp_forward, aspp_param_shapes
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    bilinear_upsample,
    concat_channels,
    conv2d,
    record_op,
    relu,
    resize_bilinear,
    scale_channels,
    sigmoid,
)

ENCODER_STRIDES = (1, 2, 4, 8, 16)
LEVELS = (1, 2, 3, 4, 5)

GateFn = Callable[[int, Tensor], "tuple[Tensor | float, Tensor | float]"]


@dataclass(frozen=True)
class ModelConfig:
    stream: Literal["single", "two"] = "single"
    encoder_channels: tuple[int, ...] = (16, 24, 32, 48, 64)
    transition_channels: int = 32
    gate_version: Literal["none", "v1", "v2"] = "v2"
    parallel_branch: bool = True
    aspp: AsppConfig | None = field(default_factory=AsppConfig)
    input_size: tuple[int, int] = (352, 352)
    cross_gate_context: Literal["per_level", "aggregated"] = "per_level"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.encoder_channels) != 5 or min(self.encoder_channels) < 1:
            raise ValueError(f"need 5 positive encoder widths, got {self.encoder_channels}")
        if self.stream not in ("single", "two"):
            raise ValueError(f"unknown stream {self.stream!r}")
        if self.gate_version not in ("none", "v1", "v2"):
            raise ValueError(f"unknown gate_version {self.gate_version!r}")
        if self.cross_gate_context not in ("per_level", "aggregated"):
            raise ValueError(f"unknown cross_gate_context {self.cross_gate_context!r}")
        if self.aspp is not None and self.aspp.out_channels != self.transition_channels:
            raise ValueError("ASPP out_channels must equal the transition width")
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input_size must be a multiple of 16, got {self.input_size}")

    @property
    def encoder_strides(self) -> tuple[int, ...]:
        return ENCODER_STRIDES

    def to_dict(self) -> dict:
        return {
            "stream": self.stream,
            "encoder_channels": list(self.encoder_channels),
            "transition_channels": self.transition_channels,
            "gate_version": self.gate_version,
            "parallel_branch": self.parallel_branch,
            "aspp": None if self.aspp is None else self.aspp.to_dict(),
            "input_size": list(self.input_size),
            "cross_gate_context": self.cross_gate_context,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        if d.get("aspp") is not None:
            d["aspp"] = AsppConfig.from_dict(d["aspp"])
        return cls(**d)


def ladder(name: str, **overrides) -> ModelConfig:
    """Ablation configurations M1..M5 plus the two-stream model.

    M1 plain top-down decoder, M2 adds the parallel branch, M3 adds v1 gate
    units, M4 switches to v2 gate units, M5 adds Fold-ASPP on level 5.
    """
    base = dict(gate_version="none", parallel_branch=False, aspp=None)
    steps = {
        "m1": {},
        "m2": dict(parallel_branch=True),
        "m3": dict(parallel_branch=True, gate_version="v1"),
        "m4": dict(parallel_branch=True, gate_version="v2"),
        "m5": dict(parallel_branch=True, gate_version="v2", aspp=AsppConfig()),
        "two-stream": dict(parallel_branch=True, gate_version="v2", aspp=AsppConfig(), stream="two"),
    }
    key = name.lower()
    if key not in steps:
        raise ValueError(f"unknown configuration {name!r}; choose from {sorted(steps)}")
    return ModelConfig(**{**base, **steps[key], **overrides})


# ---------------------------------------------------------------------------
# parameters


def _encoder_shapes(prefix: str, in_channels: int, widths: Sequence[int]) -> dict[str, tuple]:
    shapes = {}
    cin = in_channels
    for lvl, c in zip(LEVELS, widths):
        shapes[f"{prefix}{lvl}.conv1.w"] = (c, cin, 3, 3)
        shapes[f"{prefix}{lvl}.conv1.b"] = (c,)
        shapes[f"{prefix}{lvl}.conv2.w"] = (c, c, 3, 3)
        shapes[f"{prefix}{lvl}.conv2.b"] = (c,)
        cin = c
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name the configuration needs, with its shape."""
    widths = config.encoder_channels
    tc = config.transition_channels
    shapes = _encoder_shapes("enc", 3, widths)
    if config.stream == "two":
        shapes.update(_encoder_shapes("depth_enc", 1, widths))
        for lvl, c in zip(LEVELS, widths):
            gate_in = 2 * c if config.cross_gate_context == "per_level" else 2 * sum(widths)
            shapes[f"cross{lvl}.gate.w"] = (2, gate_in, 3, 3)
            shapes[f"cross{lvl}.gate.b"] = (2,)
            for mod in ("rgb", "depth"):
                shapes[f"cross{lvl}.{mod}.w"] = (c, c, 3, 3)
                shapes[f"cross{lvl}.{mod}.b"] = (c,)
    for lvl, c in zip(LEVELS, widths):
        if lvl == 5 and config.aspp is not None:
            for k, s in aspp_param_shapes(config.aspp, c).items():
                shapes[f"aspp5.{k}"] = s
        else:
            shapes[f"trans{lvl}.w"] = (tc, c, 3, 3)
            shapes[f"trans{lvl}.b"] = (tc,)
    if config.gate_version == "v2":
        shapes["agg.w"] = (G.AGGREGATE_CHANNELS, sum(widths), 3, 3)
        shapes["agg.b"] = (G.AGGREGATE_CHANNELS,)
    if config.gate_version != "none":
        for lvl, c in zip(LEVELS, widths):
            ctx = G.AGGREGATE_CHANNELS if config.gate_version == "v2" else c
            shapes[f"gate{lvl}.w"] = (2, ctx + tc, 3, 3)
            shapes[f"gate{lvl}.b"] = (2,)
    for lvl in LEVELS:
        out = 1 if lvl == 1 else tc
        shapes[f"dec{lvl}.w"] = (out, tc, 3, 3)
        shapes[f"dec{lvl}.b"] = (out,)
    if config.parallel_branch:
        shapes["fuse.w"] = (1, 1 + 5 * tc, 3, 3)
        shapes["fuse.b"] = (1,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __post_init__(self):
        expected = param_shapes(self.config)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={missing[:5]}, unexpected={extra[:5]}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"parameter {name!r} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> ModelParams:
        return cls(config, {k: Tensor(v) for k, v in arrays.items()})

    def replace(self, **arrays: np.ndarray) -> ModelParams:
        tensors = dict(self.tensors)
        for k, v in arrays.items():
            tensors[k] = Tensor(v)
        return ModelParams(self.config, tensors)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in sorted-name order."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in sorted(param_shapes(config).items()):
        if len(shape) == 1:
            tensors[name] = Tensor(np.zeros(shape), copy=False)
            continue
        oc, ic, k, _ = shape
        a = np.sqrt(6.0 / (ic * k * k + oc * k * k))
        tensors[name] = Tensor(rng.uniform(-a, a, size=shape), copy=False)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward pieces


def encode(image: Tensor, params: ModelParams | Mapping[str, Tensor], prefix: str = "enc") -> list[Tensor]:
    """Five feature levels at strides 1, 2, 4, 8, 16."""
    n, _, h, w = image.shape
    if h % 16 or w % 16:
        raise ValueError(f"input height and width must be divisible by 16, got {h}x{w}")
    x = image
    feats = []
    for lvl, stride in zip(LEVELS, ENCODER_STRIDES):
        x = relu(conv2d(x, params[f"{prefix}{lvl}.conv1.w"], params[f"{prefix}{lvl}.conv1.b"], padding=1))
        step = 1 if lvl == 1 else 2
        x = relu(conv2d(x, params[f"{prefix}{lvl}.conv2.w"], params[f"{prefix}{lvl}.conv2.b"],
                        stride=step, padding=1))
        feats.append(x)
    return feats


def transition(E: Sequence[Tensor], params: ModelParams, aspp: AsppConfig | None) -> list[Tensor]:
    T = []
    for lvl, e in zip(LEVELS, E):
        if lvl == 5 and aspp is not None:
            T.append(aspp_forward(e, aspp, params.sub("aspp5.")))
        else:
            T.append(conv2d(e, params[f"trans{lvl}.w"], params[f"trans{lvl}.b"], padding=1))
    return T


def _gate_unit(config: ModelConfig, E: Sequence[Tensor], params: ModelParams) -> GateFn | None:
    if config.gate_version == "none":
        return None
    if config.gate_version == "v2":
        agg = G.aggregate_encoder(E, params.sub("agg."))
        return lambda lvl, partner: G.gate_values(agg, partner, params.sub(f"gate{lvl}."))
    return lambda lvl, partner: G.gate_values(E[lvl - 1], partner, params.sub(f"gate{lvl}."))


def fpn_decode(T: Sequence[Tensor], params: ModelParams | Mapping[str, Tensor],
               gate_unit: GateFn | None = None):
    """Top-down decoder.

    ``gate_unit(level, partner)`` returns the level's (g1, g2); the partner is
    T5 at level 5 and the deeper decoder output otherwise. Without a gate unit
    both gates are 1.

    Returns:
        ([D5, D4, D3, D2, D1], {level: (g1, g2)})
    """
    D: list[Tensor] = []
    pairs = {}
    prev = None
    for lvl in reversed(LEVELS):
        t = T[lvl - 1]
        partner = t if prev is None else prev
        g1, g2 = (1.0, 1.0) if gate_unit is None else gate_unit(lvl, partner)
        pairs[lvl] = (g1, g2)
        x = scale_channels(t, g1)
        if prev is not None:
            x = add(x, bilinear_upsample(prev, *t.shape[2:]))
        prev = conv2d(x, params[f"dec{lvl}.w"], params[f"dec{lvl}.b"], padding=1)
        D.append(prev)
    return D, pairs


def parallel_branch(D1: Tensor, T: Sequence[Tensor], g2: Sequence) -> Tensor:
    """F_Cat = Cat(D1, Up(g2_i * T_i) for i = 1..5)."""
    h, w = D1.shape[2:]
    parts = [D1] + [bilinear_upsample(scale_channels(t, g), h, w) for t, g in zip(T, g2)]
    return concat_channels(parts)


def fuse_final(f_cat: Tensor, D1: Tensor, params: ModelParams | Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Residual fusion. Returns (logits, sigmoid(logits))."""
    logits = add(conv2d(f_cat, params["fuse.w"], params["fuse.b"], padding=1), D1)
    return logits, sigmoid(logits)


@dataclass
class Prediction:
    s1: Tensor
    sf: Tensor
    trace: G.GateTrace
    s1_logits: Tensor
    sf_logits: Tensor


def _gate_array(pairs: dict, idx: int, n: int) -> np.ndarray:
    cols = []
    for lvl in LEVELS:
        g = pairs[lvl][idx]
        cols.append(g.data.reshape(n) if isinstance(g, Tensor) else np.full(n, float(g)))
    return np.stack(cols, axis=1)


def _decode(E: Sequence[Tensor], config: ModelConfig, params: ModelParams,
            cross: np.ndarray | None = None) -> Prediction:
    n = E[0].shape[0]
    T = transition(E, params, config.aspp)
    D, pairs = fpn_decode(T, params, _gate_unit(config, E, params))
    d1 = D[-1]
    s1 = sigmoid(d1)
    if config.parallel_branch:
        f_cat = parallel_branch(d1, T, [pairs[lvl][1] for lvl in LEVELS])
        sf_logits, sf = fuse_final(f_cat, d1, params)
    else:
        sf_logits, sf = d1, s1
    trace = G.GateTrace(_gate_array(pairs, 0, n), _gate_array(pairs, 1, n), cross)
    return Prediction(s1, sf, trace, d1, sf_logits)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward(image, config: ModelConfig, params: ModelParams, depth=None) -> Prediction:
    """Single-stream forward pass; dispatches to the two-stream model if configured."""
    if config.stream == "two":
        if depth is None:
            raise ValueError("two-stream configuration needs a depth input")
        return forward_two_stream(image, depth, config, params)
    image = _as_tensor(image)
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"image must be (n, 3, h, w), got {image.shape}")
    return _decode(encode(image, params), config, params)


def forward_two_stream(rgb, depth, config: ModelConfig, params: ModelParams) -> Prediction:
    rgb, depth = _as_tensor(rgb), _as_tensor(depth)
    if rgb.data.ndim != 4 or rgb.shape[1] != 3:
        raise ValueError(f"rgb must be (n, 3, h, w), got {rgb.shape}")
    if depth.data.ndim != 4 or depth.shape[1] != 1:
        raise ValueError(f"depth must be (n, 1, h, w), got {depth.shape}")
    if rgb.shape[0] != depth.shape[0] or rgb.shape[2:] != depth.shape[2:]:
        raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} disagree in batch or resolution")
    e_rgb = encode(rgb, params, "enc")
    e_d = encode(depth, params, "depth_enc")
    n = rgb.shape[0]
    fused, gate_pairs = [], []
    for lvl in LEVELS:
        context = None
        if config.cross_gate_context == "aggregated":
            hw = e_rgb[lvl - 1].shape[2:]
            context = concat_channels([resize_bilinear(e, *hw) for e in list(e_rgb) + list(e_d)])
        c, (g_rgb, g_d) = G.cross_modal_gate(e_rgb[lvl - 1], e_d[lvl - 1], params.sub(f"cross{lvl}."), context)
        fused.append(c)
        gate_pairs.append(np.stack([g_rgb.data.reshape(n), g_d.data.reshape(n)], axis=1))
    return _decode(fused, config, params, cross=np.stack(gate_pairs, axis=1))


# ---------------------------------------------------------------------------
# loss


def _bce_soft_iou(logits: Tensor, gt: np.ndarray) -> Tensor:
    """mean BCE(sigmoid(x), gt) + 1 - mean_n softIoU, smoothed by 1."""
    n = logits.shape[0]

    def fwd(x):
        s = expit(x)
        bce = np.maximum(x, 0) - x * gt + np.log1p(np.exp(-np.abs(x)))
        axes = (1, 2, 3)
        inter = (s * gt).sum(axis=axes) + 1.0
        union = (s + gt - s * gt).sum(axis=axes) + 1.0
        iou = inter / union
        value = bce.mean() + 1.0 - iou.mean()

        def vjp(g):
            d_bce = (s - gt) / x.size
            u = union.reshape(n, 1, 1, 1)
            i = inter.reshape(n, 1, 1, 1)
            d_iou_ds = (gt * u - i * (1.0 - gt)) / (u * u)
            grad = d_bce - d_iou_ds * s * (1.0 - s) / n
            return (g.item() * grad,)

        return np.array(value).reshape(1, 1, 1, 1), vjp

    return record_op("bce_soft_iou", fwd, logits)


def loss(s1_logits: Tensor, sf_logits: Tensor, gt) -> Tensor:
    """Two-term supervision: term(s1) + term(sf).

    Each term is mean binary cross-entropy plus (1 - soft IoU), a stand-in
    for the pixel-position-aware loss.
    """
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if gt.shape != s1_logits.shape or gt.shape != sf_logits.shape:
        raise ValueError(f"gt shape {gt.shape} does not match predictions {s1_logits.shape}")
    if gt.min() < 0.0 or gt.max() > 1.0:
        raise ValueError("ground truth values must lie in [0, 1]")
    return add(_bce_soft_iou(s1_logits, gt), _bce_soft_iou(sf_logits, gt))


# ---------------------------------------------------------------------------
# training


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ModelParams) -> AdamState:
        zeros = {k: np.zeros(t.shape) for k, t in params.tensors.items()}
        return cls(zeros, {k: v.copy() for k, v in zeros.items()})


@dataclass
class Batch:
    images: np.ndarray
    masks: np.ndarray
    depth: np.ndarray | None = None


@dataclass
class StepResult:
    params: ModelParams
    state: AdamState
    loss: float
    grad_norms: dict[str, float]
    prediction: Prediction


def loss_and_grads(config: ModelConfig, params: ModelParams, batch: Batch):
    with Tape() as tape:
        pred = forward(Tensor(batch.images), config, params,
                       None if batch.depth is None else Tensor(batch.depth))
        total = loss(pred.s1_logits, pred.sf_logits, batch.masks)
    grads = backward(tape, total, wrt=params.tensors.values())
    value = total.data.item()
    return value, {k: grads[t] for k, t in params.tensors.items()}, pred


def train_step(config: ModelConfig, params: ModelParams, batch: Batch, state: AdamState,
               lr: float = 1e-4) -> StepResult:
    """One forward/backward pass and one Adam update; inputs are not mutated."""
    value, grads, pred = loss_and_grads(config, params, batch)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_arrays, new_m, new_v = {}, {}, {}
    for name, tensor in params.tensors.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_arrays[name] = tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    norms = {k: float(np.sqrt((g * g).sum())) for k, g in grads.items()}
    new_state = replace(state, m=new_m, v=new_v, t=t)
    return StepResult(ModelParams.from_arrays(config, new_arrays), new_state, value, norms, pred)





def _loss_and_kinks(config: ModelConfig, params: ModelParams, batch: Batch) -> tuple[float, list[np.ndarray]]:
    """Training loss plus the sign pattern of every ReLU input."""
    with Tape() as tape:
        pred = forward(Tensor(batch.images), config, params,
                       None if batch.depth is None else Tensor(batch.depth))
        total = loss(pred.s1_logits, pred.sf_logits, batch.masks)
    return total.data.item(), [n.inputs[0].data > 0 for n in tape.nodes if n.op == "relu"]


def model_grad_check(config: ModelConfig, seed: int = 0, samples: int = 20, eps: float = 1e-5,
                     batch: Batch | None = None, resolvable: float = 1e-6, atol: float = 1e-9) -> float:
    """Central-difference check of the full training loss.

    Parameter tensors are visited in a random order; each is probed along a
    random unit direction d, comparing <grad, d> with
    (L(p + eps d) - L(p - eps d)) / (2 eps).

    * If either evaluation flips the sign of any ReLU input the loss is not
      smooth on that interval; eps is divided by 10 (up to twice) and the
      probe is dropped if the kink persists.
    * Probes whose numeric derivative is below ``resolvable`` sit under the
      rounding noise of the difference quotient; they must agree to
      ``atol`` absolutely and do not count towards ``samples``.

    Returns the max relative error |a - n| / max(1e-8, |n|) over the
    counted probes, or ``inf`` if an unresolvable probe disagrees.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    # nonzero biases so no unit sits exactly at its initial symmetry
    params = params.replace(**{k: rng.normal(0.0, 0.05, size=t.shape)
                               for k, t in params.tensors.items() if t.data.ndim == 1})
    if batch is None:
        h, w = config.input_size
        depth = rng.random((1, 1, h, w)) if config.stream == "two" else None
        batch = Batch(rng.random((1, 3, h, w)), (rng.random((1, 1, h, w)) > 0.5).astype(float), depth)
    _, grads, _ = loss_and_grads(config, params, batch)
    _, pattern = _loss_and_kinks(config, params, batch)
    names = sorted(params.tensors)
    worst, checked = 0.0, 0
    for i in rng.permutation(len(names)):
        if checked == samples:
            break
        name = names[i]
        base = params[name].data
        d = rng.normal(size=base.shape)
        d /= np.sqrt((d * d).sum())
        numeric = None
        for step in (eps, eps / 10, eps / 100):
            plus, kp = _loss_and_kinks(config, params.replace(**{name: base + step * d}), batch)
            minus, km = _loss_and_kinks(config, params.replace(**{name: base - step * d}), batch)
            if all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(pattern, kp, km)):
                numeric = (plus - minus) / (2 * step)
                break
        if numeric is None:
            continue
        analytic = float((grads[name] * d).sum())
        if abs(numeric) < resolvable:
            if abs(analytic - numeric) > atol:
                return float("inf")
            continue
        checked += 1
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst
