"""Multi-seed method comparisons and TNI parameter sweeps."""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional

import numpy as np

from .data import ExperimentData
from .metrics import mean_stderr
from .uda import TrainRunConfig, build_noise_pool, evaluate, train_baseline, train_bn, train_method, train_tni

SWEEP_PARAMS = {"alpha": "alpha", "noise-fraction": "noise_pool_fraction"}


def run_methods(data: ExperimentData, methods, seeds, configure: Callable[[str, int], TrainRunConfig],
                progress: Optional[Callable] = None) -> list:
    """Train every (method, seed) pair; returns one result dict per run.

    ``configure(method, seed)`` supplies each run's config. The BN method
    adapts the same seed's baseline instead of retraining it.
    """
    results = []
    for seed in seeds:
        baseline = None
        for method in methods:
            cfg = configure(method, seed)
            if method == "bn" and baseline is not None:
                state, hist = train_bn(data, cfg, baseline_state=baseline[0], baseline_history=baseline[1])
            else:
                state, hist = train_method(data, cfg)
            if method == "baseline":
                baseline = (state, hist)
            res = {"method": method, "seed": seed, **evaluate(state, data), "best_epoch": hist.best_epoch,
                   "history": hist, "state": state}
            results.append(res)
            if progress is not None:
                progress(res)
    return results


def run_sweep(data: ExperimentData, param: str, values, seeds, base: TrainRunConfig,
              progress: Optional[Callable] = None) -> list:
    """Target-test AUC of TNI across ``values`` of ``alpha`` or ``noise-fraction``."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unsupported sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    field_name = SWEEP_PARAMS[param]
    rows = []
    for v in sorted(float(x) for x in values):
        aucs = []
        for seed in seeds:
            cfg = replace(base, method="tni", seed=seed, **{field_name: v})
            pool = build_noise_pool(data.noise.get("target", []), cfg.noise_pool_fraction)
            state, _ = train_tni(data, cfg, noise_pool=pool)
            aucs.append(evaluate(state, data)["target_test_auc"])
            if progress is not None:
                progress({"param": param, "value": v, "seed": seed, "target_test_auc": aucs[-1]})
        mean, se = mean_stderr(aucs) if len(aucs) > 1 else (float(aucs[0]), 0.0)
        rows.append({"value": v, "mean_auc_target": mean, "stderr": se, "aucs": aucs})
    return rows


def baseline_target_aucs(data: ExperimentData, seeds, base: TrainRunConfig) -> list:
    return [evaluate(train_baseline(data, replace(base, method="baseline", seed=s))[0], data)["target_test_auc"]
            for s in seeds]


def summarize(results: list) -> dict:
    out = {}
    for m in dict.fromkeys(r["method"] for r in results):
        t = [r["target_test_auc"] for r in results if r["method"] == m]
        s = [r["source_test_auc"] for r in results if r["method"] == m]
        out[m] = {"target_mean": float(np.mean(t)), "source_mean": float(np.mean(s)), "n": len(t)}
    return out
