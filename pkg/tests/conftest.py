import numpy as np
import pytest

from cryda import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` at float64 ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def check_grads(build, arrays: dict, eps: float = 1e-3) -> float:
    """Max relative error between analytic and numeric gradients.

    ``build(tensors)`` returns a scalar Tensor from a dict of float64
    leaf tensors that share memory with ``arrays``.
    """
    leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with ad.Graph():
        loss = build(leaves)
        ad.backward(loss)
    worst = 0.0
    for k, t in leaves.items():

        def f():
            with ad.Graph():
                return float(build({n: ad.Tensor(leaves[n].data, requires_grad=False) for n in leaves}).data)

        num = numeric_grad(f, t.data, eps)
        worst = max(worst, rel_err(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def to_float64(state):
    """Copy of a ModelState with every parameter and running statistic in float64."""
    s = state.clone()
    for t in s.params.values():
        t.data = t.data.astype(np.float64)
    for b in s.bn.values():
        b.running_mean = b.running_mean.astype(np.float64)
        b.running_var = b.running_var.astype(np.float64)
    return s


def model_grad_check(state, loss_fn, eps: float = 1e-4, max_entries: int = 12, seed: int = 0,
                     value_fn=None) -> float:
    """Finite-difference check of ``loss_fn(state) -> scalar Tensor`` over a
    random subset of entries of every trainable parameter.

    ``value_fn(state) -> float``, when given, is differenced instead of
    ``loss_fn``; use it for losses whose value is flat but whose gradient
    is defined through stop-gradient terms.
    """
    if value_fn is None:
        value_fn = lambda st: float(loss_fn(st).data)
    names = state.trainable()
    state.zero_grad()
    snapshot = {n: (b.running_mean.copy(), b.running_var.copy()) for n, b in state.bn.items()}

    def restore():
        for n, (m, v) in snapshot.items():
            state.bn[n].running_mean, state.bn[n].running_var = m.copy(), v.copy()

    with ad.Graph():
        ad.backward(loss_fn(state))
    restore()
    grads = {n: state.params[n].grad.copy() for n in names}
    pick = np.random.default_rng(seed)
    worst = 0.0
    for n in names:
        p = state.params[n].data
        flat = pick.choice(p.size, size=min(max_entries, p.size), replace=False)
        num, ana = [], []
        for i in flat:
            idx = np.unravel_index(i, p.shape)
            old = p[idx]
            vals = []
            for d in (eps, -eps):
                p[idx] = old + d
                with ad.Graph():
                    vals.append(value_fn(state))
                restore()
            p[idx] = old
            num.append((vals[0] - vals[1]) / (2 * eps))
            ana.append(grads[n][idx])
        worst = max(worst, rel_err(np.array(ana), np.array(num)))
    return worst


TINY_CORPUS = dict(patients_per_domain=10, clips_per_patient=2, n_noise_recordings=3)


@pytest.fixture(scope="session")
def tiny_data():
    """A 40-clip two-domain corpus with features already computed."""
    from cryda.data import build_experiment_data
    from cryda.synthcorpus import CorpusConfig

    data = build_experiment_data(CorpusConfig(**TINY_CORPUS), seed=0)
    for dom in (data.source, data.target):
        for split in (dom.train, dom.valid, dom.test):
            split.features(data.feature_cfg)
    return data


@pytest.fixture
def tiny_cfg():
    from cryda.model import EncoderConfig
    from cryda.uda import TrainRunConfig

    return TrainRunConfig(encoder=EncoderConfig(n_blocks=2, channels=(8, 16)), epochs=3, batch_size=6)


SMALL_CORPUS = dict(patients_per_domain=20, clips_per_patient=3, n_noise_recordings=3)


@pytest.fixture(scope="session")
def small_data():
    """A 240-clip corpus; big enough for the default encoder to learn in a few epochs."""
    from cryda.data import build_experiment_data
    from cryda.synthcorpus import CorpusConfig

    data = build_experiment_data(CorpusConfig(**SMALL_CORPUS), seed=0)
    for dom in (data.source, data.target):
        for split in (dom.train, dom.valid, dom.test):
            split.features(data.feature_cfg)
    return data


# ------------------------------------------------------------ benchmark runs

SEEDS = (0, 1, 2, 3, 4)


def with_features(data):
    for dom in (data.source, data.target):
        for split in (dom.train, dom.valid, dom.test):
            split.features(data.feature_cfg)
    return data


@pytest.fixture(scope="session")
def bench():
    """The default corpus at seed 0."""
    from cryda.data import build_experiment_data
    from cryda.synthcorpus import CorpusConfig

    return with_features(build_experiment_data(CorpusConfig(), seed=0))


@pytest.fixture(scope="session")
def table(bench):
    """Every method on every seed with the shipped defaults (about 45 minutes)."""
    from cryda.experiments import run_methods
    from cryda.uda import METHODS, TrainRunConfig

    return run_methods(bench, METHODS, SEEDS, lambda m, s: TrainRunConfig(method=m, seed=s))


def runs_of(table, method):
    return [r for r in table if r["method"] == method]


# ------------------------------------------------------------ acceptance log

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
