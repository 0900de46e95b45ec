import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoelab import workbench as wb
from smoelab.workbench import MixingMeasure

G2 = MixingMeasure(np.array([[2.0, 1.0], [-1.5, 0.5]]), np.array([0.1, 0.2]))


def random_measure(rng, k, d=1):
    return MixingMeasure(rng.uniform(-3, 3, size=(k, d + 1)), rng.uniform(0.1, 2.0, size=k))


# -- gating and density -------------------------------------------------------

def test_gating_k_equals_kstar_is_softmax_of_magnitudes():
    rng = np.random.default_rng(0)
    G = random_measure(rng, 3)
    x = rng.uniform(-1, 1, size=(5, 1))
    mag = np.abs(x @ G.W[:, :1].T + G.W[:, 1])
    ref = np.exp(mag) / np.exp(mag).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(wb.gating_probs(x, G, 3), ref, rtol=1e-13)


def test_gating_k1_is_one_hot_at_argmax():
    x = np.linspace(-1, 1, 11)[:, None]
    p = wb.gating_probs(x, G2, 1)
    mag = np.abs(x @ G2.W[:, :1].T + G2.W[:, 1])
    assert np.array_equal(p.argmax(axis=1), mag.argmax(axis=1))
    assert set(np.unique(p)) == {0.0, 1.0}


def test_gating_hand_instance():
    # intercept-only experts with |g| = (2, 1, 0)
    G = MixingMeasure(np.array([[0.0, 2.0], [0.0, -1.0], [0.0, 0.0]]), np.ones(3))
    p = wb.gating_probs(np.array([[0.3]]), G, 2)[0]
    np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1), 0.0], rtol=1e-14)
    np.testing.assert_allclose(p, [0.7311, 0.2689, 0.0], atol=1e-4)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_density_integrates_to_one(seed, k):
    rng = np.random.default_rng(seed)
    G = random_measure(rng, k)
    K = int(rng.integers(1, k + 1))
    x = rng.uniform(-1, 1, size=(3, 1))
    mu = x @ G.W[:, :1].T + G.W[:, 1]
    half = 10 * math.sqrt(G.sigma.max())
    ys = np.linspace(mu.min() - half, mu.max() + half, 20001)
    for i in range(3):
        f = wb.density(np.tile(ys, (1, 1)), x[i:i + 1], G, K)[0]
        assert np.trapezoid(f, ys) == pytest.approx(1.0, abs=1e-6)


def test_density_single_atom_is_gaussian():
    G = MixingMeasure(np.array([[1.5, -0.2]]), np.array([0.4]))
    x, y = np.array([[0.5]]), np.array([0.9])
    mean = 1.5 * 0.5 - 0.2
    ref = math.exp(-0.5 * (0.9 - mean) ** 2 / 0.4) / math.sqrt(2 * math.pi * 0.4)
    assert wb.density(y, x, G, 1)[0] == pytest.approx(ref, rel=1e-14)


def test_density_identical_atoms_ignores_gate():
    G = MixingMeasure(np.array([[1.0, 0.5]] * 3), np.full(3, 0.3))
    single = MixingMeasure(np.array([[1.0, 0.5]]), np.array([0.3]))
    x, y = np.array([[0.1], [0.7]]), np.array([0.2, 1.9])
    for K in (1, 2, 3):
        np.testing.assert_allclose(wb.density(y, x, G, K), wb.density(y, x, single, 1), rtol=1e-14)


# -- sampling -----------------------------------------------------------------

def test_sampler_conditional_mean():
    G = MixingMeasure(np.array([[0.0, 1.0], [0.0, -0.6], [0.0, 0.2]]), np.array([0.3, 0.5, 0.2]))
    rng = np.random.default_rng(0)
    x, y = wb.sample_dataset(G, 100_000, rng, K=2)
    # intercept-only experts make the gate independent of x
    p = wb.gating_probs(x[:1], G, 2)[0]
    mean = float(p @ G.W[:, 1])
    var = float(p @ (G.sigma + G.W[:, 1] ** 2)) - mean ** 2
    assert abs(y.mean() - mean) < 3 * math.sqrt(var / len(y))


def test_sampler_single_gaussian_regression():
    G = MixingMeasure(np.array([[2.0, -1.0]]), np.array([0.25]))
    x, y = wb.sample_dataset(G, 50_000, np.random.default_rng(1), K=1)
    resid = y - (2.0 * x[:, 0] - 1.0)
    assert abs(resid.mean()) < 3 * 0.5 / math.sqrt(len(y))
    assert resid.var() == pytest.approx(0.25, rel=0.03)
    assert x.min() >= -1 and x.max() <= 1


def test_sampler_seeded():
    a = wb.sample_dataset(G2, 50, np.random.default_rng(3), K=1)
    b = wb.sample_dataset(G2, 50, np.random.default_rng(3), K=1)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# -- MLE ----------------------------------------------------------------------

def test_autodiff_loglik_matches_numpy():
    rng = np.random.default_rng(2)
    G = random_measure(rng, 3)
    x, y = wb.sample_dataset(G, 200, rng, K=2)
    x_aug = np.hstack([x, np.ones((200, 1))])
    t = wb.loglik_tensor(wb.Tensor(G.W), wb.Tensor(np.log(G.sigma)), x_aug, y, 2).item()
    assert t == pytest.approx(wb.mean_loglik(G, x, y, 2), rel=1e-12)


def test_fit_from_truth_stays_close_and_is_monotone():
    rng = np.random.default_rng(4)
    x, y = wb.sample_dataset(G2, 2000, rng, K=1)
    res = wb.ascend(G2, x, y, 1, record=True)
    assert np.all(np.diff(res.trace) >= 0)
    assert res.loglik >= wb.mean_loglik(G2, x, y, 1)
    assert wb.voronoi_loss(res.G, G2, 1) < 0.1


def test_single_atom_matches_least_squares():
    G = MixingMeasure(np.array([[1.2, -0.4]]), np.array([0.3]))
    x, y = wb.sample_dataset(G, 3000, np.random.default_rng(5), K=1)
    X = np.hstack([x, np.ones((len(y), 1))])
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    s2 = float(np.mean((y - X @ beta) ** 2))
    res = wb.mle_fit(x, y, 1, 1, restarts=4, rng=np.random.default_rng(0), max_iter=2000)
    np.testing.assert_allclose(res.G.W[0], beta, atol=1e-3)
    assert res.G.sigma[0] == pytest.approx(s2, abs=1e-3)


def test_fit_respects_parameter_box():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, size=(300, 1))
    y = 40 * x[:, 0] + rng.normal(size=300)
    res = wb.mle_fit(x, y, 2, 1, restarts=2, rng=rng)
    assert np.all(np.abs(res.G.W) <= 5.0)
    assert np.all((res.G.sigma >= 0.05 - 1e-12) & (res.G.sigma <= 5.0 + 1e-12))


def test_fit_error_when_every_restart_fails():
    with pytest.raises(wb.FitError):
        wb.mle_fit(np.zeros((3, 1)), np.array([np.nan, 0.0, 1.0]), 2, 1, restarts=2)


def test_larger_samples_fit_better():
    rng = np.random.default_rng(7)
    ds = {}
    for n in (100, 3000):
        vals = []
        for t in range(3):
            x, y = wb.sample_dataset(G2, n, np.random.default_rng([n, t]), K=1)
            fit = wb.mle_fit(x, y, 2, 1, restarts=4, rng=rng, template=G2, max_iter=200)
            vals.append(wb.voronoi_loss(fit.G, G2, 1))
        ds[n] = np.median(vals)
    assert ds[3000] < ds[100]


# -- Voronoi loss -------------------------------------------------------------

def test_voronoi_zero_at_truth():
    assert wb.voronoi_loss(G2, G2, 1) == 0.0


def test_voronoi_single_atom():
    a = MixingMeasure(np.array([[1.0, 2.0]]), np.array([0.5]))
    b = MixingMeasure(np.array([[4.0, -2.0]]), np.array([0.2]))
    assert wb.voronoi_loss(a, b, 1) == pytest.approx(5.0 + 0.3, rel=1e-15)


def test_voronoi_hand_instance_k3_K2():
    true = MixingMeasure(np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]), np.array([1.0, 1.0, 1.0]))
    fit = MixingMeasure(np.array([[0.3, 0.4], [5.0, 0.0], [0.0, 4.0]]), np.array([1.0, 1.5, 1.0]))
    # cell costs: 0.5, 0.5, 1.0; best pair = atoms 0 or 1 plus atom 2
    assert wb.voronoi_cells(fit, true) == [[0], [1], [2]]
    assert wb.voronoi_loss(fit, true, 2) == 1.5
    assert wb.voronoi_loss(fit, true, 2) == wb.exhaustive_voronoi_loss(fit, true, 2)


def test_voronoi_cells_partition():
    rng = np.random.default_rng(8)
    for _ in range(50):
        k = int(rng.integers(1, 5))
        cells = wb.voronoi_cells(random_measure(rng, k), random_measure(rng, k))
        assert sorted(i for c in cells for i in c) == list(range(k))


def test_voronoi_atom_count_mismatch():
    with pytest.raises(ValueError):
        wb.voronoi_loss(G2, MixingMeasure(np.array([[1.0, 0.0]]), np.array([1.0])), 1)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_voronoi_matches_subset_enumeration(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    K = int(rng.integers(1, k + 1))
    G, T = random_measure(rng, k), random_measure(rng, k)
    # independent oracle: recompute cells and enumerate subsets here
    a, b = G.atoms(), T.atoms()
    near = [min(range(k), key=lambda j: (np.linalg.norm(a[i] - b[j]), j)) for i in range(k)]
    best = max(sum(sum(np.linalg.norm(G.W[i] - T.W[j]) + abs(G.sigma[i] - T.sigma[j])
                       for i in range(k) if near[i] == j) for j in tau)
               for tau in itertools.combinations(range(k), K))
    assert wb.voronoi_loss(G, T, K) == pytest.approx(best, rel=1e-12, abs=1e-15)


# -- Hellinger ----------------------------------------------------------------

def test_hellinger_zero_at_truth():
    x = np.random.default_rng(9).uniform(-1, 1, size=(20, 1))
    assert wb.hellinger_expected(G2, G2, 1, x) == pytest.approx(0.0, abs=1e-8)


def test_hellinger_closed_form_gaussians():
    a = MixingMeasure(np.array([[0.0, 0.0]]), np.array([1.0]))
    b = MixingMeasure(np.array([[0.0, 1.0]]), np.array([1.0]))
    h = wb.hellinger_expected(a, b, 1, np.zeros((4, 1)))
    assert h == pytest.approx(math.sqrt(1 - math.exp(-1 / 8)), abs=1e-6)
    # the commonly quoted 0.3430 is rounded; the exact value is 0.34279
    assert h == pytest.approx(0.3430, abs=1e-3)


def test_hellinger_symmetric_bounded_and_triangle():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, size=(30, 1))
    for _ in range(10):
        A, B, C = (random_measure(rng, 2) for _ in range(3))
        ab = wb.hellinger_expected(A, B, 1, x)
        ba = wb.hellinger_expected(B, A, 1, x)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert 0.0 <= ab <= 1.0
        # expected Hellinger is an average of metrics, so it is itself a metric
        assert ab <= wb.hellinger_expected(A, C, 1, x) + wb.hellinger_expected(C, B, 1, x) + 1e-6


def test_hellinger_mass_deficit_raises():
    a = MixingMeasure(np.array([[0.0, 0.0]]), np.array([1.0]))
    with pytest.raises(wb.QuadratureError):
        wb.hellinger_expected(a, a, 1, np.zeros((1, 1)), n_grid=5)


# -- rates --------------------------------------------------------------------

def test_fit_loglog_recovers_power_law():
    n = np.array([100, 1000, 10_000])
    slope, icpt = wb.fit_loglog(n, 3.0 * n ** -0.5)
    assert slope == pytest.approx(-0.5, abs=1e-12) and math.exp(icpt) == pytest.approx(3.0, rel=1e-10)


def test_rate_experiment_requires_two_decades():
    with pytest.raises(wb.ExperimentError):
        wb.rate_experiment(G2, 1, [100, 1000], trials=2)


def test_rate_experiment_small_run():
    cD, cH, rows = wb.rate_experiment(G2, 1, [50, 500, 5000], trials=3, restarts=4, seed=1, max_iter=150,
                                      n_x_eval=50)
    assert len(rows) == 9 and all(r["ok"] for r in rows)
    assert list(cD.n) == [50, 500, 5000] and cD.slope < 0 and cH.slope < 0
    assert cD.slope_ci[0] <= cD.slope_ci[1]
