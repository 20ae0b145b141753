"""Arrangement ablation on the synthetic benchmark."""

from __future__ import annotations

import logging
import time
from typing import Iterable, Optional

import numpy as np

from .config import GaldConfig
from .segnet import evaluate, train
from .synthbench import SceneSpec, generate

logger = logging.getLogger(__name__)


def split_dataset(seed: int, n_train: int, n_test: int, spec: Optional[SceneSpec] = None):
    """Disjoint train/test samples drawn from one seeded scene family."""
    spec = SceneSpec(seed=seed) if spec is None else spec
    return generate(spec, n_train), generate(spec, n_test, start=n_train)


def run_ablation(
    base: GaldConfig,
    arrangements: Iterable[str] = ("baseline", "ga_only", "gald"),
    seeds: Iterable[int] = (1, 2, 3),
    n_train: int = 200,
    n_test: int = 50,
) -> dict:
    """Train and evaluate each arrangement for each seed.

    Returns ``{arrangement: {seed: report_dict}}`` where report_dict is an
    EvalReport serialised with ``to_dict`` plus the wall time in seconds.
    """
    results: dict = {a: {} for a in arrangements}
    for seed in seeds:
        train_set, test_set = split_dataset(seed, n_train, n_test)
        for arr in arrangements:
            cfg = base.replace(arrangement={"kind": arr}, train={"seed": seed})
            t0 = time.perf_counter()
            params, _ = train(cfg, train_set)
            report = evaluate(cfg, params, test_set)
            out = report.to_dict()
            out["seconds"] = time.perf_counter() - t0
            results[arr][seed] = out
            logger.info("seed %d %-8s miou %.4f iou %s", seed, arr, out["miou"], out["per_class_iou"])
    return results


def summarize(results: dict) -> dict:
    """Seed-averaged mIoU and thin-class IoU per arrangement."""
    out = {}
    for arr, by_seed in results.items():
        mious = [r["miou"] for r in by_seed.values()]
        thin = [r["per_class_iou"][2] for r in by_seed.values()]
        out[arr] = {"miou": float(np.mean(mious)), "thin_iou": float(np.mean(thin))}
    return out
