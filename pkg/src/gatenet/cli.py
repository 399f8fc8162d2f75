"""Command-line entry point: eval, infer, train-toy, gates, selfcheck."""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from . import metrics as M
from . import net as N
from .tensor import Tensor, resize_bilinear
from .train import train_toy

log = logging.getLogger("gatenet")

PRECISION = 6
HIST_BINS = 10


def _binarize_arg(value: str):
    if value == "adaptive":
        return value
    try:
        t = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1] or 'adaptive', got {value!r}") from None
    if not 0.0 <= t <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in [0, 1], got {t}")
    return t


def _int_at_least(low: int):
    def parse(value: str) -> int:
        try:
            n = int(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
        if n < low:
            raise argparse.ArgumentTypeError(f"expected an integer >= {low}, got {n}")
        return n

    return parse


_positive_int = _int_at_least(1)
_nonneg_int = _int_at_least(0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gatenet", description="Gated segmentation network and metric toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval", help="evaluate prediction masks against ground truth")
    e.add_argument("--pred", required=True, type=Path, help="directory of prediction maps")
    e.add_argument("--gt", required=True, type=Path, help="directory of ground-truth masks")
    e.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1, help="worker processes")
    e.add_argument("--binarize", type=_binarize_arg, default=0.5,
                   help="threshold for PA/IoU/Dice/BER: a number or 'adaptive' (default 0.5)")
    e.add_argument("--output", choices=("json", "csv", "table"), default="json")
    e.add_argument("--out", type=Path, help="write the report here instead of stdout")

    i = sub.add_parser("infer", help="predict a mask for one image")
    i.add_argument("--weights", required=True, type=Path)
    i.add_argument("--input", required=True, type=Path)
    i.add_argument("--depth", type=Path, help="depth map; selects the two-stream model")
    i.add_argument("--output", required=True, type=Path, help="output mask (.png or .pgm)")

    t = sub.add_parser("train-toy", help="train on synthetic rectangles and save the weights")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--steps", required=True, type=_nonneg_int)
    t.add_argument("--seed", required=True, type=int)
    t.add_argument("--config", choices=("m1", "m2", "m3", "m4", "m5", "two-stream"), default="m5")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--size", type=int, default=64, help="square image side (multiple of 16)")

    g = sub.add_parser("gates", help="report per-level gate values")
    g.add_argument("--weights", required=True, type=Path)
    g.add_argument("--input", required=True, type=Path, help="an image or a directory of images")
    g.add_argument("--depth", type=Path, help="depth image or directory (two-stream models)")

    s = sub.add_parser("selfcheck", help="run the built-in invariant checks")
    s.add_argument("--quick", action="store_true", help="smaller sample counts, skip the model gradient check")
    return p


# ---------------------------------------------------------------------------
# eval


def _eval_one(args) -> M.MetricReport:
    pred_path, gt_path, binarize = args
    return M.evaluate_pair(io.load_mask(pred_path), io.load_mask(gt_path), binarize)


def _rounded(d: dict) -> dict:
    return {k: round(float(v), PRECISION) for k, v in d.items()}


def eval_report(pred_dir, gt_dir, binarize=0.5, jobs: int = 1) -> dict:
    """The JSON-ready report the ``eval`` command prints.

    Independent of ``jobs``: images are evaluated in sorted-stem order and
    aggregated in that order.
    """
    pairing = io.pair_dataset(pred_dir, gt_dir)
    for stem in pairing.unmatched_pred:
        log.warning("prediction %s has no ground truth", stem)
    for stem in pairing.unmatched_gt:
        log.warning("ground truth %s has no prediction", stem)
    work = [(p, g, binarize) for _, p, g in pairing.pairs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            reports = list(pool.map(_eval_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        reports = [_eval_one(w) for w in work]
    agg = M.aggregate(reports)
    return {
        "aggregate": _rounded(agg.metrics()),
        "per_image": [{"name": stem, **_rounded(r.metrics())} for (stem, _, _), r in zip(pairing.pairs, reports)],
        "config": {
            "binarize": binarize,
            "f_beta2": 0.3,
            "weighted_f_beta2": 1.0,
            "s_alpha": 0.5,
            "thresholds": len(M.THRESHOLDS),
            "images": len(reports),
            "unmatched": pairing.unmatched,
        },
    }


def format_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2) + "\n"
    rows = report["per_image"] + [{"name": "MEAN", **report["aggregate"]}]
    if fmt == "csv":
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", *M.METRIC_NAMES])
        for row in rows:
            writer.writerow([row["name"]] + [f"{row[k]:.{PRECISION}f}" for k in M.METRIC_NAMES])
        return buf.getvalue()
    width = max(4, *(len(r["name"]) for r in rows))
    head = f"{'name':<{width}} " + " ".join(f"{k:>10}" for k in M.METRIC_NAMES)
    lines = [head, "-" * len(head)]
    for row in rows:
        lines.append(f"{row['name']:<{width}} " + " ".join(f"{row[k]:>10.{PRECISION}f}" for k in M.METRIC_NAMES))
    return "\n".join(lines) + "\n"


def _cmd_eval(args) -> int:
    report = eval_report(args.pred, args.gt, args.binarize, args.jobs)
    text = format_report(report, args.output)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# model loading and inference


def load_model(path) -> tuple[N.ModelConfig, N.ModelParams]:
    arrays, cfg = io.load_weights(path)
    if cfg is None:
        raise ValueError(f"{path}: weight file carries no 'config' entry")
    config = N.ModelConfig.from_dict(cfg)
    return config, N.ModelParams.from_arrays(config, arrays)


def _resize(arr: np.ndarray, hw) -> np.ndarray:
    """Bilinear resize of a (c, h, w) array."""
    if arr.shape[1:] == tuple(hw):
        return arr
    return resize_bilinear(Tensor(arr[None]), *hw).data[0]


def predict(config: N.ModelConfig, params: N.ModelParams, image: np.ndarray,
            depth: np.ndarray | None = None) -> tuple[np.ndarray, N.Prediction]:
    """Run the model on one (3, h, w) image; the returned map has the input's size."""
    if (depth is not None) != (config.stream == "two"):
        need = "needs" if config.stream == "two" else "does not take"
        raise ValueError(f"the {config.stream}-stream model in this weight file {need} a depth input")
    h, w = image.shape[1:]
    x = _resize(image, config.input_size)[None]
    d = None if depth is None else _resize(depth[None], config.input_size)[None]
    pred = N.forward(x, config, params, d)
    out = np.clip(_resize(pred.sf.data[0], (h, w))[0], 0.0, 1.0)
    return out, pred


def _cmd_infer(args) -> int:
    config, params = load_model(args.weights)
    image = io.load_image(args.input)
    depth = None if args.depth is None else io.load_mask(args.depth)
    if depth is not None and depth.shape != image.shape[1:]:
        raise ValueError(f"depth {depth.shape} and image {image.shape[1:]} differ in size")
    out, _ = predict(config, params, image, depth)
    io.save_mask(out, args.output)
    return 0


# ---------------------------------------------------------------------------
# training


def _cmd_train(args) -> int:
    config = N.ladder(args.config, input_size=(args.size, args.size))
    run = train_toy(config, args.steps, args.seed, lr=args.lr, log_every=50 if args.verbose else 0)
    io.save_weights(run.params.arrays(), args.out, config.to_dict())
    gate_norms = {k: v for k, v in run.first_grad_norms.items() if k.startswith(("gate", "agg", "cross"))}
    summary = {
        "config": args.config,
        "steps": args.steps,
        "seed": args.seed,
        "final_loss": round(run.losses[-1], PRECISION) if run.losses else None,
        "final_mae": round(run.mae[-1], PRECISION) if run.mae else None,
        "min_gate_grad_norm_step1": round(min(gate_norms.values()), 12) if gate_norms else None,
        "weights": str(args.out),
    }
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# gates


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".pgm", ".jpg", ".jpeg"))
        if not files:
            raise ValueError(f"no images in {path}")
        return files
    return [path]


def gate_summary(traces: list) -> str:
    fpn = np.concatenate([t.fpn for t in traces])
    par = np.concatenate([t.parallel for t in traces])
    lines = [f"images: {fpn.shape[0]}"]
    for idx, lvl in enumerate(N.LEVELS):
        lines.append(f"level {lvl}: g1={fpn[:, idx].mean():.4f} g2={par[:, idx].mean():.4f}")
    if traces[0].cross is not None:
        cross = np.concatenate([t.cross for t in traces])
        for idx, lvl in enumerate(N.LEVELS):
            lines.append(f"cross {lvl}: rgb={cross[:, idx, 0].mean():.4f} depth={cross[:, idx, 1].mean():.4f}")
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    lines.append("histogram (" + ", ".join(f"{a:.1f}-{b:.1f}" for a, b in zip(edges[:-1], edges[1:])) + ")")
    for label, vals in (("g1", fpn), ("g2", par)):
        counts, _ = np.histogram(vals.ravel(), bins=edges)
        lines.append(f"{label}: " + " ".join(str(int(c)) for c in counts))
    return "\n".join(lines) + "\n"


def _cmd_gates(args) -> int:
    config, params = load_model(args.weights)
    images = _inputs(args.input)
    depths = [None] * len(images) if args.depth is None else _inputs(args.depth)
    if len(depths) != len(images):
        raise ValueError(f"{len(images)} images but {len(depths)} depth maps")
    traces = []
    for img_path, depth_path in zip(images, depths):
        depth = None if depth_path is None else io.load_mask(depth_path)
        _, pred = predict(config, params, io.load_image(img_path), depth)
        traces.append(pred.trace)
    sys.stdout.write(gate_summary(traces))
    return 0


# ---------------------------------------------------------------------------


def _cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck(args.quick, lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "train-toy": _cmd_train,
    "gates": _cmd_gates,
    "selfcheck": _cmd_selfcheck,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"gatenet {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
