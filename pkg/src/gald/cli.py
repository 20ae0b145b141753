"""Command-line interface: gen-data, gradcheck, train, eval, viz-mask.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.
Reports go to stdout as JSON; progress logging goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import check_compatible, directory_digest, load_checkpoint, save_checkpoint
from .config import GaldConfig
from .distribution import mask_summary
from .errors import GaldError, NoMaskInArrangement
from .gradsuite import run_suite
from .gtf import load_gtf
from .segnet import evaluate, forward_model, init_model, train
from .synthbench import SceneSpec, class_shares, generate, load_dataset, save_dataset
from .tensor import no_grad

logger = logging.getLogger("gald")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _json_arg(value: Optional[str]) -> dict:
    """Inline JSON object or a path to a JSON file."""
    if not value:
        return {}
    text = value
    if not value.lstrip().startswith("{"):
        text = Path(value).read_text()
    out = json.loads(text)
    if not isinstance(out, dict):
        raise ValueError("expected a JSON object")
    return out


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM; ``img`` is an H x W uint8-valued array."""
    img = np.asarray(img)
    if img.ndim != 2 or img.min() < 0 or img.max() > 255:
        raise ValueError("PGM image must be H x W with values in [0, 255]")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, np.uint8).reshape(h, w)


def mask_to_gray(m: np.ndarray) -> np.ndarray:
    return np.floor(255.0 * m + 0.5).astype(np.uint8)


def labels_to_gray(pred: np.ndarray, num_classes: int) -> np.ndarray:
    return (pred * 255 // max(num_classes - 1, 1)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    fields = _json_arg(args.spec)
    if args.seed is not None:
        fields["seed"] = args.seed
    spec = SceneSpec.from_dict(fields)
    samples = generate(spec, args.n)
    save_dataset(samples, args.out, spec)
    _emit(
        {
            "out": str(args.out),
            "count": len(samples),
            "seed": spec.seed,
            "class_shares": class_shares(samples),
            "digest": directory_digest(args.out),
        }
    )
    return 0


def _load_config(path: Optional[str]) -> GaldConfig:
    return GaldConfig() if path is None else GaldConfig.load(path)


def cmd_gradcheck(args) -> int:
    kind = None
    if args.config is not None:
        kind = _load_config(args.config).ga.kind
        kind = None if kind == "none" else kind
    try:
        report = run_suite(args.module, ga_kind=kind)
    except KeyError as e:
        logger.error("%s", e.args[0])
        return 2
    # keep the printed report short: failures in full, passes summarised
    report["worst"] = max(report["results"].items(), key=lambda kv: kv[1]["max_rel_err"], default=(None, None))[0]
    report["results"] = {k: v for k, v in report["results"].items() if not v["pass"]}
    _emit(report)
    if not report["pass"]:
        logger.error("gradcheck failed: %s", ", ".join(report["failed"]))
        return 1
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    over = {}
    if args.out is not None:
        over["output_dir"] = str(args.out)
    if args.data is not None:
        over["dataset"] = str(args.data)
    if over:
        cfg = cfg.replace(**over)
    if cfg.dataset is None or cfg.output_dir is None:
        raise GaldError("train needs both a dataset and an output directory")
    samples = load_dataset(cfg.dataset)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    params, records = train(cfg, samples, log_path=out / "metrics.jsonl")
    save_checkpoint(out / "final.ckpt", params, cfg)
    _emit(
        {
            "output_dir": str(out),
            "iterations": len(records),
            "final_loss": records[-1]["loss"],
            "checkpoint_digest": directory_digest(out / "final.ckpt"),
        }
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    data = args.data if args.data is not None else cfg.dataset
    if data is None:
        raise GaldError("eval needs --data or a dataset in the config")
    params, _ = load_checkpoint(args.ckpt)
    check_compatible(params, init_model(cfg))
    report = evaluate(cfg, params, load_dataset(data))
    _emit(report.to_dict())
    return 0


def cmd_viz_mask(args) -> int:
    cfg = _load_config(args.config)
    if not cfg.arrangement.uses_ld:
        raise NoMaskInArrangement(f"arrangement {cfg.arrangement.kind!r} has no LD stage")
    params, _ = load_checkpoint(args.ckpt)
    check_compatible(params, init_model(cfg))
    img = load_gtf(args.input)
    if img.ndim == 3:
        img = img[None]
    trace: dict = {}
    with no_grad():
        logits = forward_model(img, cfg, params, "eval", trace)
    m = mask_summary(trace["mask"]).data[0, 0]
    pred = logits.data[0].argmax(axis=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "mask.pgm", mask_to_gray(m))
    write_pgm(out / "pred.pgm", labels_to_gray(pred, cfg.num_classes))
    _emit({"mask": str(out / "mask.pgm"), "pred": str(out / "pred.pgm"), "mask_mean": float(m.mean())})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gald", description="GA/LD segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", help="scene spec as inline JSON or a JSON file")
    g.add_argument("--n", type=_positive, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--config")
    g.add_argument("--module", help="case name or prefix, e.g. ops, layers, ga.cgnl, arrangements")
    g.set_defaults(func=cmd_gradcheck)

    g = sub.add_parser("train", help="train a model")
    g.add_argument("--config", required=True)
    g.add_argument("--data", help="override the config dataset path")
    g.add_argument("--out", help="override the config output directory")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint")
    g.add_argument("--config", required=True)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("viz-mask", help="write the channel-mean LD mask and prediction as PGM")
    g.add_argument("--config", required=True)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_viz_mask)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (GaldError, ValueError, OSError, KeyError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
