"""Dense float64 arrays with a recording tape for reverse-mode gradients.

Every feature map is a 4-D ``(n, c, h, w)`` array. Ops are plain functions
returning new immutable :class:`Tensor` objects; when a :class:`Tape` is
active each op appends a node holding its forward callable and its
vector-Jacobian product, so :func:`backward` can walk the tape in reverse.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "conv2d",
    "bilinear_upsample",
    "resize_bilinear",
    "global_avg_pool",
    "pointwise",
    "add",
    "mul",
    "sigmoid",
    "relu",
    "scale_channels",
    "concat_channels",
    "slice_channels",
    "sum_all",
    "record_op",
    "backward",
    "grad_check",
]


class Tensor:
    """Immutable float64 array.

    Parameters and constants are leaves; op outputs are produced by
    :func:`record_op`. Identity (not value) is used for hashing so tensors
    can key gradient maps.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim == 0:
            raise ValueError("Tensor needs at least one dimension")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all dims must be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite value in tensor data")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def zeros(cls, shape) -> Tensor:
        return cls(np.zeros(shape), copy=False)

    @classmethod
    def ones(cls, shape) -> Tensor:
        return cls(np.ones(shape), copy=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., tuple[np.ndarray, VJP]]
    vjp: VJP


class Tape:
    """Ordered record of ops executed while the tape is active.

    Use as a context manager. A tape belongs to one thread and one
    forward/backward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its recorded inputs, in tape order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = node.forward(*args)
            values[id(node.output)] = out
            outs.append(out)
        return outs


_local = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(name: str, forward: Callable[..., tuple[np.ndarray, VJP]], *inputs: Tensor) -> Tensor:
    """Run ``forward`` on the inputs' data and record the result on the active tape.

    ``forward(*arrays)`` must return ``(output_array, vjp)`` where
    ``vjp(grad_output)`` yields one gradient (or ``None``) per input.
    """
    out, vjp = forward(*(t.data for t in inputs))
    result = Tensor(out, copy=False)
    tape = _current_tape()
    if tape is not None:
        tape.nodes.append(Node(name, tuple(inputs), result, forward, vjp))
    return result


def _require_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ValueError(f"{what} must be 4-D (n, c, h, w), got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded dilated cross-correlation.

    Args:
        x: input of shape (n, c, h, w).
        weight: kernel of shape (out_c, c, k, k).
        bias: vector of length out_c, or None.
    """
    _require_4d(x, "conv2d input")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be (outC, inC, k, k), got {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride}, dilation={dilation}, padding={padding}")
    n, c, h, w = x.shape
    oc, ic, k, _ = weight.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input has c={c}, weight expects inC={ic}")
    if bias is not None and bias.shape != (oc,):
        raise ValueError(f"conv2d bias must have shape ({oc},), got {bias.shape}")
    oh = _conv_out_size(h, k, stride, dilation, padding)
    ow = _conv_out_size(w, k, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output size {oh}x{ow} is not positive for input {h}x{w}, "
            f"k={k}, stride={stride}, dilation={dilation}, padding={padding}"
        )
    span_h = stride * (oh - 1) + 1
    span_w = stride * (ow - 1) + 1

    def forward_cols(xd, wd, bd=None):
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        xt = xp.transpose(1, 0, 2, 3)
        # column layout (c, k, k, n, oh, ow) so the whole batch is one GEMM
        cols = np.empty((c, k, k, n, oh, ow))
        for i in range(k):
            r0 = i * dilation
            for j in range(k):
                c0 = j * dilation
                cols[:, i, j] = xt[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride]
        cols = cols.reshape(c * k * k, n * oh * ow)
        w2 = wd.reshape(oc, c * k * k)
        out = w2 @ cols
        if bd is not None:
            out += bd[:, None]
        out = out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3)

        def vjp(g):
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, n * oh * ow)
            gw = (g2 @ cols.T).reshape(wd.shape)
            gcols = (w2.T @ g2).reshape(c, k, k, n, oh, ow)
            gxt = np.zeros(xt.shape)
            for i in range(k):
                r0 = i * dilation
                for j in range(k):
                    c0 = j * dilation
                    gxt[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += gcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)[:, :, padding:padding + h, padding:padding + w]
            if bd is None:
                return gx, gw
            return gx, gw, g2.sum(axis=1)

        return out, vjp

    def forward_taps(xd, wd, bd=None):
        # contract channels first on the padded grid, then shift-add the
        # k*k partial maps; cheaper than im2col when out_c < c
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        hp, wp = xp.shape[2:]
        xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c, n * hp * wp)
        wt = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(oc * k * k, c)
        z = (wt @ xt).reshape(oc, k, k, n, hp, wp)
        out = np.zeros((oc, n, oh, ow))
        for i in range(k):
            r0 = i * dilation
            for j in range(k):
                c0 = j * dilation
                out += z[:, i, j, :, r0:r0 + oh, c0:c0 + ow]
        if bd is not None:
            out += bd[:, None, None, None]
        out = out.transpose(1, 0, 2, 3)

        def vjp(g):
            gt = g.transpose(1, 0, 2, 3)
            gz = np.zeros((oc, k, k, n, hp, wp))
            for i in range(k):
                r0 = i * dilation
                for j in range(k):
                    c0 = j * dilation
                    gz[:, i, j, :, r0:r0 + oh, c0:c0 + ow] = gt
            gz = gz.reshape(oc * k * k, n * hp * wp)
            gw = (gz @ xt.T).reshape(oc, k, k, c).transpose(0, 3, 1, 2)
            gxp = (wt.T @ gz).reshape(c, n, hp, wp).transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            if bd is None:
                return gx, gw
            return gx, gw, gt.sum(axis=(1, 2, 3))

        return out, vjp

    forward = forward_taps if stride == 1 and oc < c else forward_cols

    if bias is None:
        return record_op("conv2d", forward, x, weight)
    return record_op("conv2d", forward, x, weight, bias)


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, source coordinate clamped to [0, n_in - 1]
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for dst in range(n_out):
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[dst, i0] += 1.0 - frac
        m[dst, i1] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling (align_corners=False) to any target size, no antialiasing."""
    _require_4d(x, "resize input")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    mh = _interp_matrix(h, out_h)
    mw = _interp_matrix(w, out_w)

    def forward(xd):
        out = np.matmul(np.matmul(mh, xd), mw.T)

        def vjp(g):
            return (np.matmul(np.matmul(mh.T, g), mw),)

        return out, vjp

    return record_op("resize_bilinear", forward, x)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling with half-pixel centres; refuses to shrink."""
    _require_4d(x, "upsample input")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample cannot downsample {h}x{w} to {out_h}x{out_w}")
    return resize_bilinear(x, out_h, out_w)


# ---------------------------------------------------------------------------
# reductions and elementwise ops


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool input")
    n, c, h, w = x.shape

    def forward(xd):
        out = xd.reshape(n, c, h * w).sum(axis=2).reshape(n, c, 1, 1) / (h * w)

        def vjp(g):
            return (np.broadcast_to(g / (h * w), (n, c, h, w)).copy(),)

        return out, vjp

    return record_op("global_avg_pool", forward, x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def forward(ad, bd):
        return ad + bd, lambda g: (g, g)

    return record_op("add", forward, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def forward(ad, bd):
        return ad * bd, lambda g: (g * bd, g * ad)

    return record_op("mul", forward, a, b)


def sigmoid(x: Tensor) -> Tensor:
    def forward(xd):
        s = expit(xd)
        return s, lambda g: (g * s * (1.0 - s),)

    return record_op("sigmoid", forward, x)


def relu(x: Tensor) -> Tensor:
    def forward(xd):
        mask = xd > 0
        return np.where(mask, xd, 0.0), lambda g: (np.where(mask, g, 0.0),)

    return record_op("relu", forward, x)


def scale_channels(x: Tensor, gate) -> Tensor:
    """Multiply each sample of ``x`` by its own scalar gate.

    ``gate`` is a tensor of shape (n, 1, 1, 1) or a plain float (treated
    as a constant).
    """
    _require_4d(x, "scale_channels input")
    n = x.shape[0]
    if not isinstance(gate, Tensor):
        gate = Tensor(np.full((n, 1, 1, 1), float(gate)))
    if gate.shape != (n, 1, 1, 1):
        raise ValueError(f"scale_channels gate must have shape ({n}, 1, 1, 1), got {gate.shape}")

    def forward(xd, gd):
        def vjp(g):
            return g * gd, (g * xd).sum(axis=(1, 2, 3)).reshape(n, 1, 1, 1)

        return xd * gd, vjp

    return record_op("scale_channels", forward, x, gate)


_POINTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "relu": relu, "scale_channels": scale_channels}


def pointwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name to add, mul, sigmoid, relu or scale_channels."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    if kind in ("sigmoid", "relu"):
        return fn(a)
    if b is None:
        raise ValueError(f"pointwise {kind!r} needs a second operand")
    return fn(a, b)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    for p in parts:
        _require_4d(p, "concat_channels part")
    n, _, h, w = parts[0].shape
    for idx, p in enumerate(parts[1:], start=1):
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(
                f"concat_channels: part {idx} has (n, h, w)={(p.shape[0],) + p.shape[2:]}, "
                f"expected {(n, h, w)}"
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def forward(*arrays):
        out = np.concatenate(arrays, axis=1)

        def vjp(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(arrays)))

        return out, vjp

    return record_op("concat_channels", forward, *parts)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels input")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ValueError(f"channel slice [{start}, {stop}) out of range for {c} channels")

    def forward(xd):
        def vjp(g):
            gx = np.zeros(xd.shape)
            gx[:, start:stop] = g
            return (gx,)

        return xd[:, start:stop].copy(), vjp

    return record_op("slice_channels", forward, x)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every entry as a (1, 1, 1, 1) tensor."""
    shape = x.shape

    def forward(xd):
        return np.array(xd.sum()).reshape(1, 1, 1, 1), lambda g: (np.full(shape, g.item()),)

    return record_op("sum_all", forward, x)


# ---------------------------------------------------------------------------
# reverse mode


class Gradients:
    """Gradient lookup keyed by tensor identity; unreached tensors read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Reverse accumulation over ``tape`` starting from a scalar ``loss``.

    If ``wrt`` is given only those tensors keep their gradients.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"loss must be a scalar (1, 1, 1, 1) tensor, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else np.asarray(gi, dtype=np.float64)
    if wrt is not None:
        wanted = {id(t) for t in wrt}
        grads = {k: v for k, v in grads.items() if k in wanted}
    return Gradients(grads)


# ---------------------------------------------------------------------------
# finite-difference self check

_GRAD_OPS: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "bilinear_upsample": bilinear_upsample,
    "resize_bilinear": resize_bilinear,
    "global_avg_pool": global_avg_pool,
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "scale_channels": scale_channels,
    "concat_channels": lambda *parts: concat_channels(parts),
    "slice_channels": slice_channels,
    "sum_all": sum_all,
}


def register_grad_op(name: str, fn: Callable[..., Tensor]) -> None:
    _GRAD_OPS[name] = fn


def grad_check(op_config: dict, seed: int = 0, eps: float = 1e-6) -> float:
    """Compare analytic gradients with central differences for one op.

    ``op_config`` holds ``"op"`` (a registered name or a callable),
    ``"shapes"`` (one shape per tensor argument) and optional ``"kwargs"``.
    Every entry of every input is perturbed. The scalar probed is
    ``sum(op(...) * R)`` with a fixed random ``R``.

    Returns:
        max over entries of |analytic - numeric| / max(1e-8, |numeric|).
    """
    op = op_config["op"]
    fn = _GRAD_OPS[op] if isinstance(op, str) else op
    kwargs = op_config.get("kwargs", {})
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(shape) for shape in op_config["shapes"]]
    probe = None

    def evaluate(arrs):
        nonlocal probe
        out = fn(*[Tensor(a) for a in arrs], **kwargs)
        if probe is None:
            probe = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return float((out.data * probe).sum())

    evaluate(arrays)
    inputs = [Tensor(a) for a in arrays]
    with Tape() as tape:
        out = fn(*inputs, **kwargs)
        loss = sum_all(mul(out, Tensor(probe)))
    grads = backward(tape, loss)

    worst = 0.0
    for idx, arr in enumerate(arrays):
        analytic = grads[inputs[idx]]
        for pos in np.ndindex(arr.shape):
            orig = arr[pos]
            arr[pos] = orig + eps
            f_plus = evaluate(arrays)
            arr[pos] = orig - eps
            f_minus = evaluate(arrays)
            arr[pos] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            err = abs(analytic[pos] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
