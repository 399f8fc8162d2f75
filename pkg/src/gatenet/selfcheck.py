"""Invariant checks shared by the ``selfcheck`` command and the test-suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics as M
from . import net as N
from . import reference as R
from .foldconv import fold, folded_atrous_conv, receptive_field, unfold
from .io import decode_weights, encode_weights
from .tensor import Tensor, add, bilinear_upsample, grad_check, scale_channels

# (name, op_config) pairs covering every differentiable op
OP_GRAD_CASES: list[tuple[str, dict]] = [
    ("conv2d", {"op": "conv2d", "shapes": [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], "kwargs": {"padding": 1}}),
    ("conv2d_stride2", {"op": "conv2d", "shapes": [(1, 2, 6, 7), (3, 2, 3, 3), (3,)],
                        "kwargs": {"stride": 2, "padding": 1}}),
    ("conv2d_dilated", {"op": "conv2d", "shapes": [(1, 3, 7, 7), (2, 3, 3, 3), (2,)],
                        "kwargs": {"dilation": 2, "padding": 2}}),
    ("conv2d_taps", {"op": "conv2d", "shapes": [(1, 6, 5, 5), (2, 6, 3, 3), (2,)], "kwargs": {"padding": 1}}),
    ("bilinear_upsample", {"op": "bilinear_upsample", "shapes": [(1, 2, 3, 3)], "kwargs": {"out_h": 6, "out_w": 6}}),
    ("resize_bilinear_down", {"op": "resize_bilinear", "shapes": [(1, 2, 6, 5)], "kwargs": {"out_h": 3, "out_w": 4}}),
    ("global_avg_pool", {"op": "global_avg_pool", "shapes": [(2, 3, 4, 4)]}),
    ("add", {"op": "add", "shapes": [(1, 2, 3, 3), (1, 2, 3, 3)]}),
    ("mul", {"op": "mul", "shapes": [(1, 2, 3, 3), (1, 2, 3, 3)]}),
    ("sigmoid", {"op": "sigmoid", "shapes": [(1, 2, 3, 3)]}),
    ("relu", {"op": "relu", "shapes": [(1, 2, 3, 3)]}),
    ("scale_channels", {"op": "scale_channels", "shapes": [(2, 3, 3, 3), (2, 1, 1, 1)]}),
    ("concat_channels", {"op": "concat_channels", "shapes": [(1, 2, 3, 3), (1, 1, 3, 3)]}),
    ("slice_channels", {"op": "slice_channels", "shapes": [(1, 4, 3, 3)], "kwargs": {"start": 1, "stop": 3}}),
    ("sum_all", {"op": "sum_all", "shapes": [(1, 2, 3, 3)]}),
    ("fold", {"op": "fold", "shapes": [(1, 2, 5, 4)]}),
    ("unfold", {"op": "unfold", "shapes": [(1, 8, 3, 2)], "kwargs": {"original_hw": (5, 4)}}),
    ("folded_atrous_conv", {"op": "folded_atrous_conv", "shapes": [(1, 1, 6, 6), (4, 4, 3, 3), (4,)],
                            "kwargs": {"rate": 2}}),
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
# data helpers


def random_pair(rng: np.random.Generator, size: int | tuple[int, int] = 16) -> tuple[np.ndarray, np.ndarray]:
    """A random prediction and a binary mask with a random foreground rate."""
    shape = (size, size) if isinstance(size, int) else tuple(size)
    pred = rng.random(shape)
    if rng.random() < 0.3:
        pred = np.round(pred * 255) / 255  # land exactly on thresholds
    gt = rng.random(shape) < rng.uniform(0.05, 0.95)
    return pred, gt


def identity_kernel(c: int, k: int = 3) -> np.ndarray:
    """(c, c, k, k) conv weight that maps a tensor to itself (with padding k // 2)."""
    w = np.zeros((c, c, k, k))
    w[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    return w


# ---------------------------------------------------------------------------
# individual checks; each returns (passed, detail)


def check_metric_oracle(count: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_exact = worst_ref = 0.0
    for _ in range(count):
        pred, gt = random_pair(rng)
        for binarize, thr in ((0.5, 0.5), ("adaptive", None)):
            got = M.evaluate_pair(pred, gt, binarize).metrics()
            want = R.evaluate_naive(pred, gt, thr)
            for k in M.METRIC_NAMES:
                err = abs(got[k] - want[k])
                if k in ("s_measure", "e_measure", "f_weighted"):
                    worst_ref = max(worst_ref, err)
                else:
                    worst_exact = max(worst_exact, err)
    ok = worst_exact <= 1e-9 and worst_ref <= 1e-6
    return ok, f"{count} pairs, max err {worst_exact:.1e} (counting), {worst_ref:.1e} (S/E/wF)"


def check_perfect_inverted(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    bad = []
    for _ in range(20):
        gt = rng.random((16, 16)) < 0.4
        gt[0, 0], gt[-1, -1] = True, False
        perfect = M.evaluate_pair(gt.astype(float), gt).metrics()
        for k in ("pa", "f_max", "f_mean", "f_weighted", "s_measure", "e_measure", "iou", "dice"):
            if abs(perfect[k] - 1.0) > 1e-6:
                bad.append(f"perfect {k}={perfect[k]}")
        for k in ("ber", "mae"):
            if abs(perfect[k]) > 1e-6:
                bad.append(f"perfect {k}={perfect[k]}")
        inv = M.evaluate_pair((~gt).astype(float), gt).metrics()
        if not (inv["pa"] == inv["iou"] == inv["dice"] == 0.0 and inv["ber"] == 1.0):
            bad.append(f"inverted {inv}")
    return not bad, "ok" if not bad else "; ".join(bad[:3])


def identity_violations(pred: np.ndarray, gt: np.ndarray) -> list[str]:
    """Algebraic relations that must hold for every pair."""
    out = []
    rep = M.evaluate_pair(pred, gt)
    if abs(rep.dice - 2 * rep.iou / (1 + rep.iou)) > 1e-12:
        out.append("dice/iou")
    if rep.f_max < rep.f_mean:
        out.append("f_max < f_mean")
    if M.mae(pred, gt) != M.mae(gt.astype(float), pred):
        out.append("mae symmetry")
    pb = pred >= 0.5
    ber = M.ratio_metrics(M.confusion(pb, gt))["ber"]
    ber_c = M.ratio_metrics(M.confusion(~pb, ~gt))["ber"]
    if abs(ber - ber_c) > 1e-12:
        out.append("ber complement")
    return out


def check_identities(count: int = 1000, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    violations = []
    for _ in range(count):
        violations += identity_violations(*random_pair(rng))
    return not violations, f"{count} pairs, {len(violations)} violations"


def check_fold_round_trip(count: int = 100, seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(count):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 10)), int(rng.integers(1, 10)))
        x = rng.normal(size=shape)
        back = unfold(fold(Tensor(x)), shape[2:]).data
        if back.shape != x.shape or not np.array_equal(back, x):
            return False, f"round trip differs for shape {shape}"
    return True, f"{count} tensors bit-exact"


def check_folded_conv(seed: int = 3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rate in (1, 2, 4, 6):
        x = rng.normal(size=(1, 2, 12, 12))
        w = rng.normal(size=(8, 8, 3, 3))
        b = rng.normal(size=8)
        got = folded_atrous_conv(Tensor(x), Tensor(w), Tensor(b), rate).data
        worst = max(worst, float(np.abs(got - R.folded_conv_gather(x, w, b, rate)).max()))
    folded = receptive_field("folded_atrous", 2, 3, (12, 12))
    plain = receptive_field("plain_atrous", 4, 3, (12, 12))
    want_folded = {(2 * (6 + du * 2) + qy, 2 * (6 + dv * 2) + qx)
                   for du in (-1, 0, 1) for dv in (-1, 0, 1) for qy in (0, 1) for qx in (0, 1)}
    want_plain = {(12 + 4 * du, 12 + 4 * dv) for du in (-1, 0, 1) for dv in (-1, 0, 1)}
    ok = worst <= 1e-9 and folded == want_folded and plain == want_plain
    return ok, f"gather max err {worst:.1e}; support {len(folded)} folded vs {len(plain)} plain"


def check_op_gradients() -> tuple[bool, str]:
    errs = {name: grad_check(cfg, seed=0) for name, cfg in OP_GRAD_CASES}
    worst = max(errs, key=errs.get)
    return errs[worst] <= 1e-5, f"{len(errs)} ops, worst {worst} {errs[worst]:.1e}"


def check_model_gradient(seed: int = 0) -> tuple[bool, str]:
    err = N.model_grad_check(N.ladder("m5", input_size=(32, 32)), seed=seed, samples=20)
    return err <= 1e-4, f"M5 32x32, 20 parameter probes, max rel err {err:.1e}"


def structural_residuals(seed: int = 0) -> dict[str, float]:
    """Max abs deviations for the exact structural reductions (all should be 0)."""
    size = (32, 32)
    rng = np.random.default_rng(seed)
    image = Tensor(rng.random((2, 3, *size)))
    out = {}

    # FPN with identity decoder convs: D_i = g1_i * T_i + Up(D_{i+1})
    for name in ("m2", "m4"):
        config = N.ladder(name, input_size=size)
        params = N.init_params(config, seed)
        tc = config.transition_channels
        params = params.replace(**{f"dec{l}.w": identity_kernel(tc) for l in (2, 3, 4, 5)})
        E = N.encode(image, params)
        T = N.transition(E, params, config.aspp)
        D, pairs = N.fpn_decode(T, params, N._gate_unit(config, E, params))
        worst = 0.0
        for idx, lvl in enumerate((5, 4, 3, 2)):
            expect = scale_channels(T[lvl - 1], pairs[lvl][0])
            if lvl < 5:
                expect = add(expect, bilinear_upsample(D[idx - 1], *T[lvl - 1].shape[2:]))
            worst = max(worst, float(np.abs(D[idx].data - expect.data).max()))
        out[f"fpn_identity_{name}"] = worst

    config = N.ladder("m5", input_size=size)
    params = N.init_params(config, seed)
    zero = params.replace(**{"fuse.w": np.zeros(params["fuse.w"].shape), "fuse.b": np.zeros(1)})
    pred = N.forward(image, config, zero)
    out["zero_fuse"] = float(np.abs(pred.sf.data - pred.s1.data).max())

    E = N.encode(image, params)
    T = N.transition(E, params, config.aspp)
    D, pairs = N.fpn_decode(T, params, N._gate_unit(config, E, params))
    f_cat = N.parallel_branch(D[-1], T, [pairs[l][1] for l in N.LEVELS])
    out["fcat_channels"] = float(abs(f_cat.shape[1] - 161))
    out["fcat_slice0"] = float(np.abs(f_cat.data[:, :1] - D[-1].data).max())

    zeros = {k: np.zeros(t.shape) for k, t in params.tensors.items() if k.startswith(("gate", "agg"))}
    trace = N.forward(image, config, params.replace(**zeros)).trace
    out["zero_gates"] = float(max(np.abs(trace.fpn - 0.5).max(), np.abs(trace.parallel - 0.5).max()))
    return out


def check_structure(seed: int = 0) -> tuple[bool, str]:
    res = structural_residuals(seed)
    bad = {k: v for k, v in res.items() if v != 0.0}
    return not bad, "all exact" if not bad else f"nonzero residuals {bad}"


def saturated_two_stream(seed: int = 0, size: tuple[int, int] = (32, 32), saturation: float = 50.0):
    """Two-stream params whose depth gates are driven to 0 and RGB gates to 1.

    Returns (two_config, two_params, single_config, single_params): the
    single-stream model shares every RGB-path weight, and the cross-modal
    RGB convs are identities, so both models should predict the same map.
    """
    two = N.ladder("two-stream", input_size=size)
    params = N.init_params(two, seed)
    edits = {}
    for lvl, c in zip(N.LEVELS, two.encoder_channels):
        edits[f"cross{lvl}.gate.w"] = np.zeros(params[f"cross{lvl}.gate.w"].shape)
        edits[f"cross{lvl}.gate.b"] = np.array([saturation, -saturation])
        edits[f"cross{lvl}.rgb.w"] = identity_kernel(c)
        edits[f"cross{lvl}.rgb.b"] = np.zeros(c)
    params = params.replace(**edits)
    single = N.ladder("m5", input_size=size)
    keep = N.param_shapes(single)
    single_params = N.ModelParams(single, {k: v for k, v in params.tensors.items() if k in keep})
    return two, params, single, single_params


def two_stream_gap(seed: int = 0) -> float:
    two, params, single, single_params = saturated_two_stream(seed)
    rng = np.random.default_rng(seed)
    rgb = rng.random((2, 3, 32, 32))
    depth = rng.random((2, 1, 32, 32))
    a = N.forward_two_stream(rgb, depth, two, params)
    b = N.forward(rgb, single, single_params)
    return float(max(np.abs(a.sf.data - b.sf.data).max(), np.abs(a.s1.data - b.s1.data).max()))


def check_two_stream(seed: int = 0) -> tuple[bool, str]:
    gap = two_stream_gap(seed)
    return gap <= 1e-9, f"max |two-stream - single| = {gap:.1e}"


def check_weight_round_trip(seed: int = 0) -> tuple[bool, str]:
    config = N.ladder("m5", input_size=(32, 32))
    params = N.init_params(config, seed)
    raw = encode_weights(params.arrays(), config.to_dict())
    arrays, cfg = decode_weights(raw)
    again = encode_weights(arrays, cfg)
    return raw == again, f"{len(raw)} bytes, {'identical' if raw == again else 'DIFFERENT'} after reload"


def run_selfcheck(quick: bool = False, report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    checks: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
        ("metric oracle", lambda: check_metric_oracle(20 if quick else 200)),
        ("perfect/inverted", check_perfect_inverted),
        ("metric identities", lambda: check_identities(100 if quick else 1000)),
        ("fold round trip", lambda: check_fold_round_trip(20 if quick else 100)),
        ("folded atrous conv", check_folded_conv),
        ("op gradients", check_op_gradients),
        ("structure", check_structure),
        ("two-stream reduction", check_two_stream),
        ("weight container", check_weight_round_trip),
    ]
    if not quick:
        checks.insert(6, ("model gradient", check_model_gradient))
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res)
    return results
