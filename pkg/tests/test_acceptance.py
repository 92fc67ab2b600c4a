"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The benchmark runs (default corpus, 30 epochs, five seeds) take about an
hour on one CPU core. The corpus and the method table are session
fixtures shared with test_benchmark.py.
"""

import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest

from cryda import autodiff as ad
from cryda.autodiff import BNState, Tensor
from cryda.cli import main
from cryda.data import build_experiment_data, featurize
from cryda.dsp import AudioClip, FeatureConfig
from cryda.evaldiag import domain_id_experiment, pitch_distribution, xgen_experiment
from cryda.experiments import run_methods, run_sweep
from cryda.metrics import Histogram, auc, mean_stderr, wasserstein1d
from cryda.model import EncoderConfig, encode, forward, init_model, param_digest
from cryda.synthcorpus import CorpusConfig, with_profiles
from cryda.uda import (
    METHODS,
    SYMNET_HEADS,
    TrainRunConfig,
    adapt_bn,
    symnet_losses,
    train_afn,
    train_baseline,
    train_em,
    train_tni,
    tni_augment,
)

from conftest import ACCEPTANCE_LINES, SEEDS, check_grads, model_grad_check, runs_of, to_float64, with_features
from test_metrics import pair_count_auc, sample_w1, two_pass_mean_stderr

ALPHAS = (0.0, 0.25, 0.5, 1.0)
FRACTIONS = (0.1, 0.5, 1.0)


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{n:02d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ----------------------------------------------------------------- 1


def _primitive_cases(rng):
    bn = BNState.create(3, dtype=np.float64)
    bn.gamma.data[:] = rng.normal(size=3)

    def bn_build(t):
        bn.gamma, bn.beta = t["g"], t["b"]
        return ad.sum_all(ad.mul(ad.batchnorm(t["x"], bn, "train"), T(w_bn)))

    w_bn = rng.normal(size=(5, 3))
    x_img = rng.normal(size=(2, 2, 5, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    w_conv = rng.normal(size=(2, 3, 5, 4))
    w_conv_nhwc = rng.normal(size=(2, 5, 4, 3))
    pool_x = rng.permutation(96).reshape(2, 3, 4, 4) * 0.1
    w_pool = rng.normal(size=(2, 3, 2, 2))
    labels = np.array([0, 2, 1, 1])
    rows = np.array([1, 0, 2, 2])
    w_gmp, w_lsm = rng.normal(size=(2, 2)), rng.normal(size=(3, 4))
    return {
        "linear": (lambda t: ad.sum_all(ad.mul(ad.linear(t["x"], t["w"], t["b"]), T(np.arange(8.0).reshape(4, 2)))),
                   {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}),
        "conv2d": (lambda t: ad.sum_all(ad.mul(ad.conv2d(t["x"], t["k"], padding=1), T(w_conv))),
                   {"x": x_img.copy(), "k": k.copy()}),
        "conv2d-nhwc": (lambda t: ad.sum_all(ad.mul(ad.conv2d(t["x"], t["k"], padding=1, channels_last=True),
                                                    T(w_conv_nhwc))),
                        {"x": x_img.transpose(0, 2, 3, 1).copy(), "k": k.copy()}),
        "max_pool2d": (lambda t: ad.sum_all(ad.mul(ad.max_pool2d(t["x"], 2), T(w_pool))), {"x": pool_x}),
        "global_mean_pool": (lambda t: ad.sum_all(ad.mul(ad.global_mean_pool(t["x"]), T(w_gmp))),
                             {"x": rng.normal(size=(2, 2, 3, 3))}),
        "batchnorm": (bn_build, {"x": rng.normal(size=(5, 3)), "g": bn.gamma.data.copy(), "b": bn.beta.data.copy()}),
        "relu": (lambda t: ad.sum_all(ad.mul(ad.relu(t["x"]), t["x"])),
                 {"x": rng.uniform(0.1, 1, size=6) * rng.choice([-1, 1], size=6)}),
        "log": (lambda t: ad.sum_all(ad.log(t["x"])), {"x": rng.uniform(0.5, 2, size=5)}),
        "add-mul-scale": (lambda t: ad.mean_all(ad.scale(ad.mul(t["a"], t["b"]) + t["a"], 1.7)),
                          {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 2))}),
        "log_softmax": (lambda t: ad.sum_all(ad.mul(ad.log_softmax(t["z"]), T(w_lsm))),
                        {"z": rng.normal(size=(3, 4))}),
        "logsumexp": (lambda t: ad.sum_all(ad.logsumexp(t["z"])), {"z": rng.normal(size=(3, 4))}),
        "softmax_cross_entropy": (lambda t: ad.softmax_cross_entropy(t["z"], labels), {"z": rng.normal(size=(4, 3))}),
        "entropy": (lambda t: ad.entropy(ad.softmax(t["z"])), {"z": rng.normal(size=(4, 3))}),
        "feature_norm_penalty(hard)": (lambda t: ad.feature_norm_penalty(t["f"], "hard", radius=3.0),
                                       {"f": rng.normal(size=(4, 5))}),
        "concat-getitem": (lambda t: ad.sum_all(ad.mul(ad.getitem(ad.concat([t["a"], t["b"]], axis=1),
                                                                  (slice(None), slice(1, 4))), T(np.ones((2, 3)) * 2))),
                           {"a": rng.normal(size=(2, 2)), "b": rng.normal(size=(2, 3))}),
        "take_rows": (lambda t: ad.sum_all(ad.take_rows(t["z"], rows)), {"z": rng.normal(size=(4, 3))}),
    }


def _stepwise_penalty_error(rng):
    """The stepwise penalty's value is flat under perturbation (its target moves
    with the feature), so its gradient is checked against the finite-difference
    gradient of the equivalent surrogate -2*dr*mean(||f||)."""
    f = rng.normal(size=(4, 5))
    t = T(f, grad=True)
    with ad.Graph():
        ad.backward(ad.feature_norm_penalty(t, "stepwise", delta_r=0.2))
    eps, num = 1e-5, np.zeros_like(f)
    sur = lambda a: -2 * 0.2 * np.linalg.norm(a, axis=1).mean()
    for i in np.ndindex(f.shape):
        hi, lo = f.copy(), f.copy()
        hi[i] += eps
        lo[i] -= eps
        num[i] = (sur(hi) - sur(lo)) / (2 * eps)
    return float(np.abs(t.grad - num).max() / np.abs(num).max())


def _grad_reverse_error(rng, lam=0.7):
    """Forward is the identity, so finite differences see no reversal; compare
    with the finite-difference gradient of the surrogate -lam * sum(w * x)."""
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    t = T(x, grad=True)
    with ad.Graph():
        ad.backward(ad.sum_all(ad.mul(ad.grad_reverse(t, lam), T(w))))
    sur = lambda a: -lam * float(np.sum(w * a))
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[i] += 1e-5
        lo[i] -= 1e-5
        num[i] = (sur(hi) - sur(lo)) / 2e-5
    return float(np.abs(t.grad - num).max() / np.abs(num).max())


def _method_loss_errors(rng):
    enc = EncoderConfig(n_blocks=2, channels=(4, 8))
    xs, xt = rng.normal(size=(4, 16, 8)), rng.normal(size=(4, 16, 8))
    ys = np.array([0, 1, 1, 0])
    dr, R = 0.2, 3.0

    def fresh(heads=("cls",)):
        st = to_float64(init_model(enc, 2, 0, heads=heads))
        for h in heads:
            st.params[f"{h}.w"].data += rng.normal(size=st.params[f"{h}.w"].shape) * 0.3
        return st

    def ce_of(st, x):
        emb, logits = forward(st, x)
        return emb, ad.softmax_cross_entropy(logits, ys)

    def baseline(st):
        return ce_of(st, xs)[1]

    def em(st):
        _, ce = ce_of(st, xs)
        _, lt = forward(st, xt)
        return ce + ad.scale(ad.entropy(ad.softmax(lt)), 0.1)

    def hafn(st):
        emb, ce = ce_of(st, xs)
        return ce + ad.feature_norm_penalty(emb, "hard", R) + ad.feature_norm_penalty(encode(st, xt), "hard", R)

    def safn(st):
        emb, ce = ce_of(st, xs)
        return ce + ad.feature_norm_penalty(emb, "stepwise", delta_r=dr) + \
            ad.feature_norm_penalty(encode(st, xt), "stepwise", delta_r=dr)

    def safn_value(st):
        emb, ce = ce_of(st, xs)
        et = encode(st, xt)
        norms = lambda e: np.linalg.norm(e.data, axis=1).mean()
        return float(ce.data) - 2 * dr * (norms(emb) + norms(et))

    noise = [AudioClip(rng.normal(size=8000) * 0.05)]
    waves = rng.normal(size=(4, 3200)) * 0.1
    aug = np.stack([tni_augment(w, noise, 0.5, 0).samples for w in waves])
    x_aug = featurize(aug, FeatureConfig(hop=320, n_mels=8))

    def tni(st):
        _, logits = forward(st, x_aug)
        return ad.softmax_cross_entropy(logits, ys)

    def symnet(part):
        def loss(st):
            c, e = symnet_losses(st, xs, ys, xt, 0.1)
            terms = list((c if part == "cls" else e).values())
            out = terms[0]
            for v in terms[1:]:
                out = out + v
            return out
        return loss

    errs = {
        "baseline": model_grad_check(fresh(), baseline),
        "em": model_grad_check(fresh(), em),
        "hafn": model_grad_check(fresh(), hafn),
        "safn": model_grad_check(fresh(), safn, value_fn=safn_value),
        "tni": model_grad_check(fresh(), tni),
        "symnet(classifier step)": model_grad_check(fresh(SYMNET_HEADS), symnet("cls")),
        "symnet(encoder step)": model_grad_check(fresh(SYMNET_HEADS), symnet("enc")),
    }
    return errs


def test_01_gradient_integrity():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    errs = {name: check_grads(build, arrays, eps=1e-5) for name, (build, arrays) in _primitive_cases(rng).items()}
    errs["feature_norm_penalty(stepwise)"] = _stepwise_penalty_error(rng)
    errs["grad_reverse"] = _grad_reverse_error(rng)
    errs.update({f"loss:{k}": v for k, v in _method_loss_errors(rng).items()})
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < 30
    verdict(1, "gradient integrity", ok,
            f"{len(errs)} checks, max rel err {errs[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert ok, errs


# ----------------------------------------------------------------- 2


def test_02_oracle_equivalence():
    rng = np.random.default_rng(99)
    auc_ok = True
    for _ in range(200):
        n = int(rng.integers(2, 80))
        y = rng.integers(0, 2, size=n)
        y[:2] = (0, 1)
        s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        auc_ok &= auc(s, y) == pair_count_auc(s, y)

    edges = np.arange(250.0, 1001.0, 10.0)
    w1_err = 0.0
    for _ in range(50):
        a = rng.choice(edges[:-1], size=int(rng.integers(5, 400)))
        b = rng.choice(edges[:-1], size=int(rng.integers(5, 400)))
        got = wasserstein1d(Histogram(edges, np.histogram(a, edges)[0]), Histogram(edges, np.histogram(b, edges)[0]))
        want = sample_w1(a, b)
        w1_err = max(w1_err, abs(got - want) / max(want, 1e-12))

    ms_err = 0.0
    for _ in range(100):
        v = list(rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 3), size=int(rng.integers(2, 40))))
        (m, se), (om, ose) = mean_stderr(v), two_pass_mean_stderr(v)
        ms_err = max(ms_err, abs(m - om) / max(abs(om), 1e-12), abs(se - ose) / ose)

    ok = auc_ok and w1_err < 1e-6 and ms_err < 1e-9
    verdict(2, "oracle equivalence", ok,
            f"auc exact on 200 sets: {auc_ok}; W1 max rel err {w1_err:.1e}; mean/stderr max rel err {ms_err:.1e}")
    assert ok


# ----------------------------------------------------------------- 3


def _domain_clips(dom):
    return [AudioClip(w) for split in (dom.train, dom.valid, dom.test) for w in split.waves]


def test_03_shift_diagnosis(bench):
    t0 = time.perf_counter()
    cfg = TrainRunConfig(seed=0)
    dom_id = domain_id_experiment(bench, cfg)
    xgen = xgen_experiment(bench, cfg)
    w1 = wasserstein1d(pitch_distribution(_domain_clips(bench.source)), pitch_distribution(_domain_clips(bench.target)))
    elapsed = time.perf_counter() - t0
    a = dom_id.accuracy >= 0.95
    b = xgen["source_to_target_auc"] <= xgen["target_to_target_auc"] - 0.05
    c = w1 < 10.0 and a
    ok = a and b and c and elapsed <= 15 * 60
    verdict(3, "shift diagnosis", ok,
            f"domain-id acc {dom_id.accuracy:.3f}; s->t AUC {xgen['source_to_target_auc']:.3f} vs "
            f"t->t {xgen['target_to_target_auc']:.3f} (s->s {xgen['source_to_source_auc']:.3f}); "
            f"pitch W1 {w1:.2f} Hz; {elapsed / 60:.1f} min")
    assert ok


# ----------------------------------------------------------------- 4


def test_04_no_shift_control():
    base = CorpusConfig()
    data = with_features(build_experiment_data(with_profiles(base, base.source_profile, base.source_profile), 0))
    cfg = TrainRunConfig(seed=0)
    dom_id = domain_id_experiment(data, cfg)
    xgen = xgen_experiment(data, cfg)
    aucs = [xgen[k] for k in ("source_to_source_auc", "source_to_target_auc", "target_to_target_auc")]
    spread = max(aucs) - min(aucs)
    ok = dom_id.accuracy <= 0.60 and spread <= 0.03
    verdict(4, "no-shift control", ok,
            f"domain-id acc {dom_id.accuracy:.3f}; xgen AUCs {', '.join(f'{v:.3f}' for v in aucs)} "
            f"(spread {spread:.3f})")
    assert ok


# ----------------------------------------------------------------- 5


def _trace(state, hist):
    recs = [{k: v for k, v in r.items() if k != "method"} for r in hist.records]
    return recs, hist.best_epoch, param_digest(state, include_running=True)


def test_05_degenerate_weights(small_data):
    cfg = TrainRunConfig(epochs=3, batch_size=8, seed=3)
    ref = _trace(*train_baseline(small_data, cfg))
    results = {
        "EM lambda=0": _trace(*train_em(small_data, replace(cfg, method="em", lambda_em=0.0))),
        "HAFN lambda=0": _trace(*train_afn(small_data, replace(cfg, method="hafn", lambda_afn=0.0), "hard")),
        "SAFN lambda=0": _trace(*train_afn(small_data, replace(cfg, method="safn", lambda_afn=0.0), "stepwise")),
        "TNI alpha=0": _trace(*train_tni(small_data, replace(cfg, method="tni", alpha=0.0))),
    }
    same = {k: v == ref for k, v in results.items()}
    ok = all(same.values())
    verdict(5, "degenerate-weight equivalence", ok,
            "; ".join(f"{k}: {'identical' if v else 'differs'}" for k, v in same.items()))
    assert ok


# ----------------------------------------------------------------- 6


def _bn_inputs(state, x):
    """Each BN layer's input under the unadapted eval-mode network."""
    h = Tensor(x[:, :, :, None].astype(np.float64))
    out = {}
    for i in range(state.cfg.n_blocks):
        conv = ad.conv2d(h, Tensor(state.params[f"enc{i}.conv"].data.astype(np.float64)),
                         padding=state.cfg.kernel_size // 2, channels_last=True).data
        out[f"enc{i}.bn"] = conv
        bn = state.bn[f"enc{i}.bn"]
        y = (conv - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma.data + bn.beta.data
        h = ad.max_pool2d(ad.relu(Tensor(y)), state.cfg.pool, channels_last=True)
    return out


def test_06_bn_adaptation_contract(small_data):
    state, _ = train_baseline(small_data, TrainRunConfig(epochs=2, batch_size=8))
    xt = small_data.target.train.features(small_data.feature_cfg)
    adapted = adapt_bn(state, xt, epochs=2, batch_size=16)
    params_same = param_digest(adapted) == param_digest(state)
    running_changed = param_digest(adapted, include_running=True) != param_digest(state, include_running=True)

    batch = xt[:24]
    one = adapt_bn(state, batch, epochs=1, batch_size=len(batch), momentum=1.0)
    worst = 0.0
    for name, h in _bn_inputs(state, batch).items():
        mean, var = h.mean(axis=(0, 1, 2)), h.var(axis=(0, 1, 2))
        worst = max(worst, float(np.abs(one.bn[name].running_mean - mean).max() / (np.abs(mean).max() + 1e-12)),
                    float(np.abs(one.bn[name].running_var - var).max() / var.max()))
    ok = params_same and running_changed and param_digest(one) == param_digest(state) and worst < 1e-4
    verdict(6, "BN adaptation contract", ok,
            f"parameter hashes equal: {params_same}; running stats moved: {running_changed}; "
            f"momentum-1 stats max rel err vs batch oracle {worst:.1e}")
    assert ok


# ----------------------------------------------------------------- 7


def test_07_feature_norms(table):
    hafn = next(r for r in runs_of(table, "hafn") if r["seed"] == 0)["history"]
    safn = next(r for r in runs_of(table, "safn") if r["seed"] == 0)["history"]
    final = hafn.records[-1]["train_embedding_norm"]
    first5 = safn.series("train_embedding_norm")[:5]
    hafn_ok = abs(final - 30.0) <= 3.0
    safn_ok = all(b > a for a, b in zip(first5, first5[1:]))
    ok = hafn_ok and safn_ok
    verdict(7, "feature-norm behaviour", ok,
            f"HAFN final norm {final:.2f} (eval {hafn.records[-1]['embedding_norm']:.2f}); "
            f"SAFN epochs 1-5 norms {', '.join(f'{v:.2f}' for v in first5)}")
    assert ok


# ----------------------------------------------------------------- 8


def test_08_directional_table(table):
    means = {m: float(np.mean([r["target_test_auc"] for r in runs_of(table, m)])) for m in METHODS}
    base = means["baseline"]
    all_ge = all(means[m] >= base for m in METHODS if m != "baseline")
    margin = max(means["symnet"], means["safn"]) - base
    ok = all_ge and margin >= 0.02
    verdict(8, "directional method ranking (5 seeds)", ok,
            ", ".join(f"{m} {v:.3f}" for m, v in means.items()) + f"; best of SymNets/SAFN +{margin:.3f}")
    assert ok


# ----------------------------------------------------------------- 9


def test_09_tni_sweeps(bench, table):
    base = TrainRunConfig(method="tni")
    alpha_rows = run_sweep(bench, "alpha", ALPHAS, SEEDS, base)
    frac_rows = run_sweep(bench, "noise-fraction", FRACTIONS, SEEDS, base)
    baseline_aucs = [r["target_test_auc"] for r in sorted(runs_of(table, "baseline"), key=lambda r: r["seed"])]
    zero = alpha_rows[0]
    identity = zero["value"] == 0.0 and np.allclose(zero["aucs"], baseline_aucs, rtol=0, atol=1e-6)
    curve = [r["mean_auc_target"] for r in alpha_rows]
    interior = curve[-1] < max(curve)
    fcurve = [r["mean_auc_target"] for r in frac_rows]
    trend = all(b >= a - 0.02 for a, b in zip(fcurve, fcurve[1:]))
    ok = identity and interior and trend
    verdict(9, "TNI sweeps", ok,
            f"alpha=0 equals baseline: {identity}; alpha curve "
            + ", ".join(f"{r['value']:g}:{r['mean_auc_target']:.3f}" for r in alpha_rows)
            + "; noise-fraction curve "
            + ", ".join(f"{r['value']:g}:{r['mean_auc_target']:.3f}" for r in frac_rows))
    assert ok


# ----------------------------------------------------------------- 10


TINY_INI = """
[corpus]
patients_per_domain = 10
clips_per_patient = 2
n_noise_recordings = 3

[model]
n_blocks = 2
channels = 8,16

[train]
epochs = 2
batch_size = 6
"""


def _digests(root, names=None):
    files = sorted(p for p in root.rglob("*") if p.is_file() and (names is None or p.name in names))
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


def test_10_cli_determinism(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_INI, encoding="utf-8")
    for run in ("a", "b"):
        assert main(["synth", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / run / "corpus")]) == 0
        for method in ("baseline", "symnet"):
            assert main(["train", "--config", str(cfg), "--corpus", str(tmp_path / run / "corpus"),
                         "--method", method, "--seed", "2", "--out", str(tmp_path / run / method)]) == 0
    synth_files = lambda r: {k: v for k, v in _digests(tmp_path / r / "corpus").items() if k != "corpus.json"}
    train_files = lambda r: _digests(tmp_path / r, {"model.ckpt", "metrics.json", "history.jsonl"})
    synth_same = synth_files("a") == synth_files("b")
    train_same = train_files("a") == train_files("b")
    ok = synth_same and train_same and len(train_files("a")) == 6
    verdict(10, "CLI determinism", ok,
            f"corpus files identical: {synth_same} ({len(synth_files('a'))} files); "
            f"checkpoints, metrics and histories identical: {train_same}")
    assert ok
