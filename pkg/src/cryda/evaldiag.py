"""Domain-shift diagnostics and result aggregation.

Three diagnostics are provided: a domain classifier ("which hospital is this
from?"), cross-domain generalization of a source-trained classifier, and
a comparison of pooled pitch distributions. :func:`build_report` turns
per-seed results into a table of mean +/- standard error per method.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np
from scipy.optimize import minimize

from .data import DomainData, ExperimentData, Split
from .dsp import AudioClip, detect_activity, estimate_pitch
from .metrics import Histogram, UndefinedMetricError, auc, mean_stderr, wasserstein1d
from .model import ModelState, embed
from .synthcorpus import ConfigError
from .uda import METHOD_LABELS, TrainRunConfig, evaluate, score, train_baseline

__all__ = [
    "Histogram", "UndefinedMetricError", "auc", "mean_stderr", "wasserstein1d",
    "pitch_frames", "pitch_distribution", "DomainIdResult", "domain_id_experiment",
    "xgen_experiment", "domain_probe_accuracy", "MetricsReport", "ReportError", "build_report",
]

PITCH_RANGE = (250.0, 1000.0)
PITCH_BIN = 10.0


class ReportError(ValueError):
    pass


# --------------------------------------------------------------------- pitch


def pitch_frames(clip: AudioClip) -> np.ndarray:
    """Voiced f0 values of frames whose centres fall inside detected activity."""
    track = estimate_pitch(clip, fmin=PITCH_RANGE[0], fmax=PITCH_RANGE[1])
    centres = np.round(track.times * clip.sample_rate).astype(np.int64)
    inside = np.zeros(len(centres), dtype=bool)
    for seg in detect_activity(clip):
        inside |= (centres >= seg.start) & (centres < seg.end)
    return track.f0[track.voiced & inside]


def pitch_distribution(clips: Iterable[AudioClip]) -> Histogram:
    """Histogram (10 Hz bins over 250-1000 Hz) of pooled voiced f0 frames.

    An empty result is returned with a warning when no frame is voiced.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("pitch_distribution needs at least one clip")
    values = [pitch_frames(c) for c in clips]
    hist = Histogram.from_values(np.concatenate(values) if values else np.zeros(0), *PITCH_RANGE, PITCH_BIN)
    if hist.empty:
        warnings.warn("no voiced frames found; histogram is empty", RuntimeWarning, stacklevel=2)
    return hist


# ------------------------------------------------------------- domain id


@dataclass
class DomainIdResult:
    accuracy: float
    confusion: np.ndarray  # rows: true domain, columns: predicted; row-normalized
    domains: tuple = ("source", "target")
    history: Optional[object] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist(), "domains": list(self.domains)}


def _domain_split(a: Split, b: Split) -> Split:
    out = Split.concat([a, b])
    out.labels = np.concatenate([np.zeros(len(a), np.int64), np.ones(len(b), np.int64)])
    return out


def _domain_task(data: ExperimentData) -> ExperimentData:
    parts = {s: _domain_split(data.source.split(s), data.target.split(s)) for s in ("train", "valid", "test")}
    dom = DomainData(**parts)
    return ExperimentData(dom, dom, {}, data.feature_cfg, data.window)


def domain_id_experiment(data: ExperimentData, cfg: TrainRunConfig = TrainRunConfig()) -> DomainIdResult:
    """Train a fresh classifier to name each clip's domain; report test accuracy.

    The corpus splits are patient-disjoint, so no patient contributes to
    both training and test. The reported number is an accuracy, so the
    checkpoint is chosen on validation accuracy: validation AUC saturates
    within an epoch or two on a separable domain task, long before the
    decision threshold settles.
    """
    for name in ("source", "target"):
        if len(data.domain(name).train) == 0 or len(data.domain(name).test) == 0:
            raise ConfigError(f"domain-id needs clips from two domains; {name!r} is empty")
    task = _domain_task(data)
    state, history = train_baseline(task, replace(cfg, method="baseline"), select_on="source_valid_accuracy")
    test = task.source.test
    pred = (score(state, test.features(task.feature_cfg)) >= 0.5).astype(np.int64)
    conf = np.zeros((2, 2))
    for t, p in zip(test.labels, pred):
        conf[t, p] += 1
    conf = conf / conf.sum(axis=1, keepdims=True)
    return DomainIdResult(float(np.mean(pred == test.labels)), conf, history=history)


# -------------------------------------------------------- cross generalization


def xgen_experiment(data: ExperimentData, cfg: TrainRunConfig = TrainRunConfig()) -> dict:
    """AUCs for source-trained (tested on both domains) and target-trained models."""
    cfg = replace(cfg, method="baseline")
    src_state, _ = train_baseline(data, cfg)
    on_src = evaluate(src_state, data)
    mirrored = ExperimentData(data.target, data.source, data.noise, data.feature_cfg, data.window)
    tgt_state, _ = train_baseline(mirrored, cfg)
    tt = evaluate(tgt_state, mirrored)["source_test_auc"]
    out = {
        "source_to_source_auc": on_src["source_test_auc"],
        "source_to_target_auc": on_src["target_test_auc"],
        "target_to_target_auc": tt,
    }
    out["cross_domain_gap"] = out["target_to_target_auc"] - out["source_to_target_auc"]
    out["source_drop"] = out["source_to_source_auc"] - out["source_to_target_auc"]
    return out


# ------------------------------------------------------------- domain probe


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-3) -> np.ndarray:
    xb = np.hstack([x, np.ones((len(x), 1))])

    def obj(w):
        z = xb @ w
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w[:-1] @ w[:-1]
        p = 1.0 / (1.0 + np.exp(-z))
        g = xb.T @ (p - y) / len(y)
        g[:-1] += l2 * w[:-1]
        return loss, g

    res = minimize(obj, np.zeros(xb.shape[1]), jac=True, method="L-BFGS-B")
    return res.x


def domain_probe_accuracy(state: ModelState, data: ExperimentData) -> float:
    """Test accuracy of a logistic-regression domain probe on frozen eval-mode embeddings."""
    fc = data.feature_cfg

    def xy(split):
        a, b = data.source.split(split), data.target.split(split)
        x = np.concatenate([embed(state, a.features(fc)), embed(state, b.features(fc))]).astype(np.float64)
        y = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
        return x, y

    xtr, ytr = xy("train")
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-8
    w = _fit_logistic((xtr - mu) / sd, ytr)
    xte, yte = xy("test")
    z = np.hstack([(xte - mu) / sd, np.ones((len(xte), 1))]) @ w
    return float(np.mean((z > 0) == (yte > 0.5)))


# ------------------------------------------------------------------- report


@dataclass
class MetricsReport:
    rows: list
    runs: list
    n_seeds: int

    def to_dict(self) -> dict:
        return {"n_seeds": self.n_seeds, "rows": self.rows, "runs": self.runs}

    def format_table(self) -> str:
        header = ["Method", "Source test AUC", "Target test AUC", "Source impr. (rel %)", "Target impr. (rel %)"]
        body = []
        for r in self.rows:
            body.append([
                r["label"],
                f"{100 * r['source_mean']:.2f} ± {100 * r['source_stderr']:.2f}",
                f"{100 * r['target_mean']:.2f} ± {100 * r['target_stderr']:.2f}",
                "-" if r["source_improvement_pct"] is None else f"{r['source_improvement_pct']:.2f}%",
                "-" if r["target_improvement_pct"] is None else f"{r['target_improvement_pct']:.2f}%",
            ])
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        return "\n".join(lines)


def _improvement(value: float, base: float) -> float:
    return (value - base) / base * 100.0


def build_report(runs: list, n_seeds: Optional[int] = None) -> MetricsReport:
    """Aggregate per-(method, seed) results into mean +/- stderr rows.

    ``runs`` holds dicts with ``method``, ``seed``, ``source_test_auc`` and
    ``target_test_auc``. Improvements are relative to the baseline mean.
    """
    by_method: dict = {}
    for r in runs:
        by_method.setdefault(r["method"], []).append(r)
    if "baseline" not in by_method:
        raise ReportError("no baseline runs to compare against")
    order = [m for m in METHOD_LABELS if m in by_method] + sorted(m for m in by_method if m not in METHOD_LABELS)
    rows = []
    base = None
    for m in order:
        rs = sorted(by_method[m], key=lambda r: r["seed"])
        if n_seeds is not None and len(rs) != n_seeds:
            raise ReportError(f"method {m!r} has {len(rs)} runs, expected {n_seeds}")
        src = [r["source_test_auc"] for r in rs]
        tgt = [r["target_test_auc"] for r in rs]
        sm, ss = mean_stderr(src) if len(src) > 1 else (float(src[0]), 0.0)
        tm, ts = mean_stderr(tgt) if len(tgt) > 1 else (float(tgt[0]), 0.0)
        row = {"method": m, "label": METHOD_LABELS.get(m, m), "n": len(rs), "seeds": [r["seed"] for r in rs],
               "source_mean": sm, "source_stderr": ss, "target_mean": tm, "target_stderr": ts}
        if m == "baseline":
            base = row
        rows.append(row)
    for row in rows:
        if row is base:
            row["source_improvement_pct"] = row["target_improvement_pct"] = None
        else:
            row["source_improvement_pct"] = _improvement(row["source_mean"], base["source_mean"])
            row["target_improvement_pct"] = _improvement(row["target_mean"], base["target_mean"])
    return MetricsReport(rows, sorted(runs, key=lambda r: (order.index(r["method"]), r["seed"])),
                         n_seeds or max(len(v) for v in by_method.values()))
