"""Training strategies: source-only baseline and six unsupervised adaptation methods.

Every method shares one loop. The source batch order comes from its own
random stream, and target batches, augmentation noise and model init use
separate streams. Setting a method's adaptation weight to zero therefore
skips its extra work and leaves the baseline trajectory untouched.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .data import DataError, ExperimentData, Split, featurize
from .dsp import AudioClip, extract_noise
from .metrics import auc
from .model import (EncoderConfig, ModelState, adam_step, embed, encode, forward, head_logits, init_model,
                    set_bn_momentum, set_bn_policy)
from .synthcorpus import LABELS, stream

METHODS = ("baseline", "bn", "em", "hafn", "safn", "symnet", "tni")
METHOD_LABELS = {
    "baseline": "No DA",
    "bn": "Unsupervised BN",
    "em": "EM",
    "hafn": "HAFN",
    "safn": "SAFN",
    "symnet": "SymNets",
    "tni": "TNI",
}
SYMNET_HEADS = ("cls", "cls_t")


@dataclass(frozen=True)
class TrainRunConfig:
    method: str = "baseline"
    lr_backbone: float = 1e-2
    lr_classifier: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    lambda_em: float = 0.1
    lambda_afn: float = 0.05
    radius: float = 30.0
    delta_r: float = 0.2
    lambda_confusion: float = 0.1
    alpha: float = 0.5
    noise_pool_fraction: float = 1.0
    bn_adapt_epochs: int = 5
    bn_momentum: float = 0.1
    encoder: EncoderConfig = EncoderConfig()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.noise_pool_fraction <= 1.0:
            raise ValueError(f"noise_pool_fraction must lie in (0, 1], got {self.noise_pool_fraction}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("lambda_em", "lambda_afn", "lambda_confusion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.radius <= 0 or self.delta_r <= 0:
            raise ValueError("radius and delta_r must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["encoder"].items()}
        return d


@dataclass
class TrainHistory:
    method: str
    seed: int
    records: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    best_epoch: int = 0

    def series(self, key: str) -> list:
        return [r[key] for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainHistory":
        records = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        method = records[0]["method"] if records else ""
        seed = records[0]["seed"] if records else 0
        best = next((r["epoch"] for r in records if r.get("selected")), 0)
        return cls(method, seed, records, {}, best)


# ----------------------------------------------------------------- batching


class _SourceSchedule:
    """Fresh permutation per epoch; a trailing batch of one sample is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, batch_size, rng

    def epoch(self) -> list:
        order = self.rng.permutation(self.n)
        out = [order[i : i + self.bs] for i in range(0, self.n, self.bs)]
        return [b for b in out if len(b) >= 2]


class _Cycler:
    """Endless stream of batches over the target set, reshuffled on each pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= len(self.order):
                self.order, self.pos = self.rng.permutation(self.n), 0
            chunk = self.order[self.pos : self.pos + k]
            out.append(chunk)
            self.pos += len(chunk)
            k -= len(chunk)
        return np.concatenate(out)


# ----------------------------------------------------------- noise injection


def build_noise_pool(recordings: list, fraction: float = 1.0, min_duration: float = 0.2) -> list:
    """Noise segments extracted from a nested subset of ``recordings``.

    The subset order is fixed, so the pool for a smaller fraction is always
    contained in the pool for a larger one.
    """
    if not recordings:
        raise DataError("no noise recordings available")
    order = stream("noise-pool", len(recordings)).permutation(len(recordings))
    keep = max(1, int(math.ceil(fraction * len(recordings) - 1e-9)))
    pool = []
    for i in sorted(order[:keep]):
        pool.extend(extract_noise(recordings[i], min_duration=min_duration))
    return pool


def _noise_crop(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    if len(noise) >= length:
        off = int(rng.integers(0, len(noise) - length + 1))
        return noise[off : off + length]
    start = int(rng.integers(0, len(noise)))
    return np.resize(np.roll(noise, -start), length)


def tni_augment(s, noise_pool: list, alpha: float, seed) -> AudioClip:
    """``s' = s + alpha * n`` with ``n`` a random crop (or cyclic extension) of a pool entry.

    The result is passed through ``tanh`` only when some sample exceeds
    unit magnitude. ``seed`` may be an int or a ``numpy`` Generator.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not noise_pool:
        raise DataError("noise pool is empty")
    clip = s if isinstance(s, AudioClip) else AudioClip(np.asarray(s, dtype=np.float32))
    x = clip.samples
    if alpha == 0:
        return AudioClip(x.copy(), clip.sample_rate, clip.id, dict(clip.metadata))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = noise_pool[int(rng.integers(len(noise_pool)))]
    n = pick.samples if isinstance(pick, AudioClip) else np.asarray(pick, dtype=np.float32)
    crop = _noise_crop(n, len(x), rng)
    out = x + np.float32(alpha) * crop.astype(np.float32)
    if np.abs(out).max() > 1.0:
        out = np.tanh(out)
    return AudioClip(out.astype(np.float32), clip.sample_rate, clip.id, dict(clip.metadata))


# ------------------------------------------------------------------- helpers


def _probs_from_embedding(state: ModelState, emb: np.ndarray) -> np.ndarray:
    probs = []
    for h in state.heads:
        z = emb @ state.params[f"{h}.w"].data + state.params[f"{h}.b"].data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs.append(e / e.sum(axis=1, keepdims=True))
    return np.mean(probs, axis=0)


def score(state: ModelState, features: np.ndarray) -> np.ndarray:
    """Injury posterior for each clip (eval-mode BN)."""
    return _probs_from_embedding(state, embed(state, features))[:, 1]


def split_auc(state: ModelState, split: Split, cfg) -> float:
    return auc(score(state, split.features(cfg)), split.labels)


def evaluate(state: ModelState, data: ExperimentData, split: str = "test") -> dict:
    fc = data.feature_cfg
    return {
        f"source_{split}_auc": split_auc(state, data.source.split(split), fc),
        f"target_{split}_auc": split_auc(state, data.target.split(split), fc),
    }


def _epoch_metrics(state: ModelState, data: ExperimentData) -> dict:
    fc = data.feature_cfg
    sv, tv = data.source.valid, data.target.valid
    es, et = embed(state, sv.features(fc)), embed(state, tv.features(fc))
    ps, pt = _probs_from_embedding(state, es), _probs_from_embedding(state, et)
    ent = -(pt * np.log(np.clip(pt, 1e-30, None))).sum(axis=1)
    norms = np.linalg.norm(np.concatenate([es, et]).astype(np.float64), axis=1)
    return {
        "source_valid_auc": auc(ps[:, 1], sv.labels),
        "source_valid_accuracy": float(np.mean(ps.argmax(axis=1) == sv.labels)),
        "target_valid_auc": auc(pt[:, 1], tv.labels),
        "target_entropy": float(ent.mean()),
        "embedding_norm": float(norms.mean()),
        "embedding_norm_source": float(np.linalg.norm(es.astype(np.float64), axis=1).mean()),
        "embedding_norm_target": float(np.linalg.norm(et.astype(np.float64), axis=1).mean()),
    }


def _apply(state: ModelState, cfg: TrainRunConfig, grads: Optional[dict] = None, names=None) -> None:
    adam_step(state, state.grads() if grads is None else grads, cfg.lr_backbone, cfg.lr_classifier, names=names)
    state.zero_grad()


def _f(t: ad.Tensor) -> float:
    return float(t.data)


# ---------------------------------------------------------------- step rules


class _Context:
    """Per-run inputs handed to a step rule."""

    def __init__(self, data: ExperimentData, cfg: TrainRunConfig):
        self.data, self.cfg = data, cfg
        fc = data.feature_cfg
        self.src = data.source.train
        self.tgt = data.target.train
        self.xs_all = self.src.features(fc)
        self._xt_all = None
        self.aug_rng = stream(cfg.seed, "augment")
        self.noise_pool: list = []
        self.norm_sum, self.norm_count = 0.0, 0

    def track(self, *embs: ad.Tensor) -> None:
        """Accumulate L2 norms of the training-mode embeddings seen this epoch."""
        for e in embs:
            n = np.linalg.norm(e.data.astype(np.float64), axis=1)
            self.norm_sum += float(n.sum())
            self.norm_count += len(n)

    def take_norm(self) -> float:
        out = self.norm_sum / max(self.norm_count, 1)
        self.norm_sum, self.norm_count = 0.0, 0
        return out

    @property
    def xt_all(self) -> np.ndarray:
        if self._xt_all is None:
            self._xt_all = self.tgt.features(self.data.feature_cfg)
        return self._xt_all


def _step_ce(state, ctx: _Context, si, ti) -> dict:
    with ad.Graph():
        emb, logits = forward(state, ctx.xs_all[si])
        ctx.track(emb)
        ce = ad.softmax_cross_entropy(logits, ctx.src.labels[si])
        ad.backward(ce)
    _apply(state, ctx.cfg)
    return {"ce": _f(ce)}


def _step_em(state, ctx: _Context, si, ti) -> dict:
    lam = ctx.cfg.lambda_em
    with ad.Graph():
        emb, logits = forward(state, ctx.xs_all[si])
        ce = ad.softmax_cross_entropy(logits, ctx.src.labels[si])
        emb_t, logits_t = forward(state, ctx.xt_all[ti])
        ctx.track(emb, emb_t)
        h = ad.entropy(ad.softmax(logits_t))
        em = ad.scale(h, lam)
        total = ce + em
        ad.backward(total)
    _apply(state, ctx.cfg)
    return {"ce": _f(ce), "em": _f(em)}


def _make_afn_step(variant: str):
    def step(state, ctx: _Context, si, ti) -> dict:
        cfg = ctx.cfg
        with ad.Graph():
            emb_s, logits = forward(state, ctx.xs_all[si])
            ce = ad.softmax_cross_entropy(logits, ctx.src.labels[si])
            emb_t = encode(state, ctx.xt_all[ti])
            ctx.track(emb_s, emb_t)
            ps = ad.scale(ad.feature_norm_penalty(emb_s, variant, cfg.radius, cfg.delta_r), cfg.lambda_afn)
            pt = ad.scale(ad.feature_norm_penalty(emb_t, variant, cfg.radius, cfg.delta_r), cfg.lambda_afn)
            total = ce + ps + pt
            ad.backward(total)
        _apply(state, cfg)
        return {"ce": _f(ce), "afn_source": _f(ps), "afn_target": _f(pt)}

    return step


def _step_tni(state, ctx: _Context, si, ti) -> dict:
    cfg = ctx.cfg
    waves = ctx.src.waves[si]
    aug = np.stack([tni_augment(w, ctx.noise_pool, cfg.alpha, ctx.aug_rng).samples for w in waves])
    xs = featurize(aug, ctx.data.feature_cfg)
    with ad.Graph():
        emb, logits = forward(state, xs)
        ctx.track(emb)
        ce = ad.softmax_cross_entropy(logits, ctx.src.labels[si])
        ad.backward(ce)
    _apply(state, cfg)
    return {"ce": _f(ce)}


def symnet_losses(state: ModelState, xs, ys, xt, lambda_confusion: float, track: Optional[Callable] = None) -> tuple:
    """Classifier-side and encoder-side objectives on one source/target batch pair.

    Returns ``(classifier_terms, encoder_terms)``, dicts of scalar tensors
    whose sums are the two objectives.
    """
    K = state.n_classes
    src_half, tgt_half = slice(0, K), slice(K, 2 * K)
    ys = np.asarray(ys, dtype=np.int64)

    emb_s = encode(state, xs)
    ls, lt = head_logits(state, emb_s, "cls"), head_logits(state, emb_s, "cls_t")
    zs = ad.concat([ls, lt], axis=1)
    emb_t = encode(state, xt)
    if track is not None:
        track(emb_s, emb_t)
    zt = ad.concat([head_logits(state, emb_t, "cls"), head_logits(state, emb_t, "cls_t")], axis=1)

    def log_mass(z, half):
        # log of the joint-softmax mass on one half of the 2K outputs
        return ad.logsumexp(ad.getitem(z, (slice(None), half))) - ad.logsumexp(z)

    cls_terms = {
        "ce_source_head": ad.softmax_cross_entropy(ls, ys),
        "ce_target_head": ad.softmax_cross_entropy(lt, ys),
        "domain_discrimination": -(ad.mean_all(log_mass(zs, src_half)) + ad.mean_all(log_mass(zt, tgt_half))),
    }

    logp_s = ad.log_softmax(zs)
    category = ad.scale(ad.mean_all(ad.take_rows(logp_s, ys)) + ad.mean_all(ad.take_rows(logp_s, ys + K)), -0.5)
    domain = ad.scale(ad.mean_all(log_mass(zt, src_half)) + ad.mean_all(log_mass(zt, tgt_half)), -0.5)
    pt = ad.softmax(zt)
    q = ad.getitem(pt, (slice(None), src_half)) + ad.getitem(pt, (slice(None), tgt_half))
    enc_terms = {
        "category_confusion": category,
        "domain_confusion": ad.scale(domain, lambda_confusion),
        "entropy": ad.scale(ad.entropy(q), lambda_confusion),
    }
    return cls_terms, enc_terms


def _sum(terms: dict) -> ad.Tensor:
    vals = list(terms.values())
    out = vals[0]
    for v in vals[1:]:
        out = out + v
    return out


def _step_symnet(state, ctx: _Context, si, ti) -> dict:
    cfg = ctx.cfg
    head_names = [n for n in state.trainable() if state.is_classifier(n)]
    enc_names = [n for n in state.trainable() if not state.is_classifier(n)]
    with ad.Graph():
        cls_terms, enc_terms = symnet_losses(state, ctx.xs_all[si], ctx.src.labels[si], ctx.xt_all[ti],
                                             cfg.lambda_confusion, ctx.track)
        ad.backward(_sum(cls_terms))
        g_cls = {n: state.params[n].grad for n in head_names}
        state.zero_grad()
        ad.backward(_sum(enc_terms))
        g_enc = {n: state.params[n].grad for n in enc_names}
        state.zero_grad()
    _apply(state, cfg, g_cls, names=head_names)
    state.step -= 1  # one optimizer step per batch pair
    _apply(state, cfg, g_enc, names=enc_names)
    out = {f"cls_{k}": _f(v) for k, v in cls_terms.items()}
    out.update({f"enc_{k}": _f(v) for k, v in enc_terms.items()})
    return out


# --------------------------------------------------------------------- loop


def _train(data: ExperimentData, cfg: TrainRunConfig, step: Callable, *, heads=("cls",),
           needs_target: bool = False, noise_pool: Optional[list] = None,
           progress: Optional[Callable] = None, select_on: str = "source_valid_auc") -> tuple:
    cfg.validate()
    if len(data.source.train) == 0:
        raise DataError("source training set is empty")
    if needs_target and len(data.target.train) == 0:
        raise DataError("target training set is empty")
    ctx = _Context(data, cfg)
    if noise_pool is not None:
        ctx.noise_pool = noise_pool
    state = init_model(cfg.encoder, len(LABELS), cfg.seed, heads=heads, bn_momentum=cfg.bn_momentum)
    schedule = _SourceSchedule(len(ctx.src), cfg.batch_size, stream(cfg.seed, "source-batches"))
    cycler = _Cycler(len(data.target.train), stream(cfg.seed, "target-batches")) if needs_target else None

    history = TrainHistory(cfg.method, cfg.seed)
    history.initial = _epoch_metrics(state, data)
    best_state, best_score = None, -np.inf
    for epoch in range(1, cfg.epochs + 1):
        sums: dict = defaultdict(float)
        batches = schedule.epoch()
        for si in batches:
            ti = cycler.take(len(si)) if cycler is not None else None
            for k, v in step(state, ctx, si, ti).items():
                sums[k] += v
        losses = {k: v / len(batches) for k, v in sums.items()}
        rec = {"epoch": epoch, "method": cfg.method, "seed": cfg.seed, "loss": losses,
               "total": float(sum(losses.values())), "steps": state.step}
        rec.update(_epoch_metrics(state, data))
        rec["train_embedding_norm"] = ctx.take_norm()
        rec["selected"] = False
        if rec[select_on] > best_score:
            best_score, best_state, history.best_epoch = rec[select_on], state.clone(), epoch
        history.records.append(rec)
        if progress is not None:
            progress(rec)
    history.records[history.best_epoch - 1]["selected"] = True
    return best_state, history


def train_baseline(data: ExperimentData, cfg: TrainRunConfig, **kw) -> tuple:
    return _train(data, cfg, _step_ce, **kw)


def train_em(data: ExperimentData, cfg: TrainRunConfig, **kw) -> tuple:
    if cfg.lambda_em == 0:
        return _train(data, cfg, _step_ce, **kw)
    return _train(data, cfg, _step_em, needs_target=True, **kw)


def train_afn(data: ExperimentData, cfg: TrainRunConfig, variant: str = "hard", **kw) -> tuple:
    if variant not in ("hard", "stepwise"):
        raise ValueError(f"unknown AFN variant {variant!r}")
    if cfg.lambda_afn == 0:
        return _train(data, cfg, _step_ce, **kw)
    return _train(data, cfg, _make_afn_step(variant), needs_target=True, **kw)


def train_symnet(data: ExperimentData, cfg: TrainRunConfig, **kw) -> tuple:
    return _train(data, cfg, _step_symnet, heads=SYMNET_HEADS, needs_target=True, **kw)


def train_tni(data: ExperimentData, cfg: TrainRunConfig, noise_pool: Optional[list] = None, **kw) -> tuple:
    """Source CE training with each sample augmented by target-domain noise at every step."""
    if noise_pool is None:
        noise_pool = build_noise_pool(data.noise.get("target", []), cfg.noise_pool_fraction)
    if not noise_pool:
        raise DataError("target noise pool is empty")
    return _train(data, cfg, _step_tni, noise_pool=noise_pool, **kw)


def adapt_bn(state: ModelState, features: np.ndarray, epochs: int = 1, batch_size: int = 32,
             momentum: Optional[float] = None) -> ModelState:
    """Re-estimate BN running statistics on unlabeled ``features``; nothing else changes."""
    out = state.clone()
    old = {n: s.momentum for n, s in out.bn.items()}
    if momentum is not None:
        set_bn_momentum(out, momentum)
    policy = out.bn_policy
    set_bn_policy(out, "stats-only-adapt")
    for _ in range(epochs):
        for i in range(0, len(features), batch_size):
            xb = features[i : i + batch_size]
            if len(xb) >= 2:
                encode(out, xb)
    for n, s in out.bn.items():
        s.momentum = old[n]
    set_bn_policy(out, policy)
    return out


def train_bn(data: ExperimentData, cfg: TrainRunConfig, baseline_state: Optional[ModelState] = None,
             baseline_history: Optional[TrainHistory] = None, **kw) -> tuple:
    """Baseline (trained here unless given) followed by target BN statistics adaptation."""
    if baseline_state is None:
        baseline_state, baseline_history = train_baseline(data, replace(cfg, method="baseline"), **kw)
    adapted = adapt_bn(baseline_state, data.target.train.features(data.feature_cfg), cfg.bn_adapt_epochs,
                       cfg.batch_size)
    history = TrainHistory("bn", cfg.seed)
    if baseline_history is not None:
        history.records = [dict(r, method="bn") for r in baseline_history.records]
        history.best_epoch = baseline_history.best_epoch
        history.initial = baseline_history.initial
    history.records.append(dict(_epoch_metrics(adapted, data), epoch=len(history.records) + 1, method="bn",
                                seed=cfg.seed, loss={}, total=0.0, steps=adapted.step, selected=False,
                                phase="bn-adapt"))
    return adapted, history


def train_method(data: ExperimentData, cfg: TrainRunConfig, **kw) -> tuple:
    cfg.validate()
    m = cfg.method
    if m == "baseline":
        return train_baseline(data, cfg, **kw)
    if m == "bn":
        return train_bn(data, cfg, **kw)
    if m == "em":
        return train_em(data, cfg, **kw)
    if m in ("hafn", "safn"):
        return train_afn(data, cfg, "hard" if m == "hafn" else "stepwise", **kw)
    if m == "symnet":
        return train_symnet(data, cfg, **kw)
    return train_tni(data, cfg, **kw)


def config_from_dict(d: dict) -> TrainRunConfig:
    known = {f.name for f in fields(TrainRunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown training option(s): {sorted(unknown)}")
    d = dict(d)
    if isinstance(d.get("encoder"), dict):
        d["encoder"] = EncoderConfig(**d["encoder"])
    return TrainRunConfig(**d)
