"""Simulation and MLE for the competition-gated Gaussian mixture of affine experts.

Each atom is ``(W, sigma)`` with ``W = (w_1..w_d, b)`` so the expert mean is
``g(x, W) = w . x + b``, and ``sigma`` is a variance. The gate keeps the K
experts with largest ``|g|`` and softmaxes those magnitudes.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .routing import check_k, topk_mask

LOG_2PI = math.log(2.0 * math.pi)


class FitError(RuntimeError):
    pass


class QuadratureError(RuntimeError):
    pass


class ExperimentError(RuntimeError):
    pass


@dataclass
class MixingMeasure:
    W: np.ndarray  # (k, d + 1): slopes then intercept
    sigma: np.ndarray  # (k,) variances
    x_low: float = -1.0
    x_high: float = 1.0
    w_box: float = 5.0
    sigma_min: float = 0.05
    sigma_max: float = 5.0

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.W.shape[0] != self.sigma.shape[0]:
            raise ValueError("one variance per atom is required")
        if np.any(self.sigma <= 0):
            raise ValueError("variances must be positive")

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1] - 1

    def atoms(self) -> np.ndarray:
        """Concatenated ``(W, sigma)`` rows."""
        return np.hstack([self.W, self.sigma[:, None]])

    def with_params(self, W, sigma) -> MixingMeasure:
        return MixingMeasure(W, sigma, self.x_low, self.x_high, self.w_box, self.sigma_min, self.sigma_max)

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "sigma": self.sigma.tolist(), "x_low": self.x_low, "x_high": self.x_high,
                "w_box": self.w_box, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max}

    @classmethod
    def from_dict(cls, d: dict) -> MixingMeasure:
        return cls(**d)


def expert_means(x, W) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 1 and x.shape[1] != W.shape[1] - 1:
        x = x.T
    return x @ W[:, :-1].T + W[:, -1]


def gating_probs(x, G: MixingMeasure, K: int) -> np.ndarray:
    """Softmax over the K largest ``|g(x, W_i)|``; zero elsewhere. Shape (n, k)."""
    check_k(K, G.k)
    mag = np.abs(expert_means(x, G.W))
    masked = topk_mask(mag, K)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=1, keepdims=True)


def normal_pdf(y, mean, var):
    return np.exp(-0.5 * (y - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def density(y, x, G: MixingMeasure, K: int) -> np.ndarray:
    """``p_G(y | x)`` for paired samples (n,) or a (n, m) grid of y per x row."""
    p = gating_probs(x, G, K)
    mu = expert_means(x, G.W)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        return np.einsum("nk,nmk->nm", p, normal_pdf(y[..., None], mu[:, None, :], G.sigma))
    return (p * normal_pdf(y.reshape(-1, 1), mu, G.sigma)).sum(axis=1)


def sample_dataset(G: MixingMeasure, n: int, rng: np.random.Generator, K: int = 1):
    """Ancestral sampling: x uniform on the box, expert from the gate, y Gaussian."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rng.uniform(G.x_low, G.x_high, size=(n, G.d))
    p = gating_probs(x, G, K)
    u = rng.random(n)
    comp = np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), G.k - 1)
    mu = expert_means(x, G.W)[np.arange(n), comp]
    y = mu + np.sqrt(G.sigma[comp]) * rng.standard_normal(n)
    return x, y


# -- likelihood --------------------------------------------------------------

def mean_loglik(G: MixingMeasure, x, y, K: int) -> float:
    mu = expert_means(x, G.W)
    masked = topk_mask(np.abs(mu), K)
    logp = masked - masked.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    logf = -0.5 * (LOG_2PI + np.log(G.sigma)) - 0.5 * (y[:, None] - mu) ** 2 / G.sigma
    z = logp + logf
    m = z.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(z - m).sum(axis=1))).mean())


def loglik_tensor(W: Tensor, rho: Tensor, x_aug: np.ndarray, y: np.ndarray, K: int) -> Tensor:
    """Mean log-likelihood with variances ``exp(rho)``, built on the autodiff tape."""
    mu = ad.matmul(Tensor(x_aug), ad.transpose(W))  # n x k
    masked = topk_mask(ad.abs_(mu), K)
    logp = ad.log_softmax_rows(masked)
    var = ad.exp(rho)
    resid = ad.sub(Tensor(y[:, None]), mu)
    logf = ad.sub(ad.scale(ad.add(rho, LOG_2PI), -0.5), ad.scale(ad.div(ad.square(resid), var), 0.5))
    return ad.mean(ad.logsumexp_rows(ad.add(logp, logf)))


@dataclass
class FitResult:
    G: MixingMeasure
    loglik: float
    iterations: int
    trace: list[float] = field(default_factory=list)
    restarts_ok: int = 0


def _project(theta: np.ndarray, k: int, q: int, G0: MixingMeasure) -> np.ndarray:
    theta = theta.copy()
    theta[: k * q] = np.clip(theta[: k * q], -G0.w_box, G0.w_box)
    theta[k * q:] = np.clip(theta[k * q:], math.log(G0.sigma_min), math.log(G0.sigma_max))
    return theta


def _unpack(theta, k, q):
    return theta[: k * q].reshape(k, q), theta[k * q:]


def ascend(G_init: MixingMeasure, x, y, K: int, max_iter: int = 500, tol: float = 1e-10,
           record: bool = False) -> FitResult:
    """Projected gradient ascent with Barzilai-Borwein trial steps and Armijo backtracking.

    Only steps that do not decrease the log-likelihood are accepted, so the
    trace is non-decreasing.
    """
    k, q = G_init.W.shape
    x_aug = np.hstack([np.atleast_2d(x).reshape(len(y), -1), np.ones((len(y), 1))])

    def value(theta):
        W, rho = _unpack(theta, k, q)
        return mean_loglik(G_init.with_params(W, np.exp(rho)), x_aug[:, :-1], y, K)

    def grad(theta):
        W, rho = _unpack(theta, k, q)
        Wt, rt = Tensor(W, requires_grad=True), Tensor(rho, requires_grad=True)
        ll = loglik_tensor(Wt, rt, x_aug, y, K)
        ad.backward(ll)
        return ll.item(), np.concatenate([Wt.grad.reshape(-1), rt.grad])

    theta = _project(np.concatenate([G_init.W.reshape(-1), np.log(G_init.sigma)]), k, q, G_init)
    f, g = grad(theta)
    if not np.isfinite(f):
        raise FitError("non-finite likelihood at initialisation")
    trace = [f] if record else []
    step = 1e-2
    prev_theta = prev_g = None
    it = 0
    for it in range(1, max_iter + 1):
        if prev_theta is not None:
            s, r = theta - prev_theta, g - prev_g
            sr = float(s @ r)
            if sr < 0:  # ascent: curvature term is negative for concave regions
                step = float(s @ s) / -sr
            step = min(max(step, 1e-8), 1e3)
        accepted = False
        t = step
        for _ in range(40):
            cand = _project(theta + t * g, k, q, G_init)
            fc = value(cand)
            if np.isfinite(fc) and fc >= f + 1e-4 * float(g @ (cand - theta)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        prev_theta, prev_g = theta, g
        theta = cand
        f_new, g = grad(theta)
        gain = f_new - f
        f = f_new
        if record:
            trace.append(f)
        if gain < tol * max(1.0, abs(f)) and np.linalg.norm(_project(theta + g, k, q, G_init) - theta) < 1e-7:
            break
    W, rho = _unpack(theta, k, q)
    return FitResult(G_init.with_params(W, np.exp(rho)), f, it, trace)


def _init_candidates(x, y, k: int, template: MixingMeasure, rng: np.random.Generator, restarts: int):
    n, d = x.shape
    q = d + 1
    x_aug = np.hstack([x, np.ones((n, 1))])
    vy = float(np.var(y)) if n > 1 else 1.0
    for r in range(restarts):
        if r % 2 == 0:
            W = np.empty((k, q))
            for j in range(k):
                idx = rng.choice(n, size=min(n, q + 1), replace=False)
                W[j] = np.linalg.lstsq(x_aug[idx], y[idx], rcond=None)[0]
            W = np.clip(W, -template.w_box, template.w_box)
        else:
            W = rng.uniform(-0.6 * template.w_box, 0.6 * template.w_box, size=(k, q))
        sigma = np.clip(np.full(k, vy / k), template.sigma_min, template.sigma_max)
        yield template.with_params(W, sigma)


def mle_fit(x, y, k: int, K: int, restarts: int = 16, rng: np.random.Generator | None = None,
            template: MixingMeasure | None = None, max_iter: int = 500, init: MixingMeasure | None = None) -> FitResult:
    """Best-of-restarts maximum likelihood estimate with exactly ``k`` atoms."""
    x = np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64)
    check_k(K, k)
    rng = rng or np.random.default_rng(0)
    template = template or MixingMeasure(np.zeros((k, x.shape[1] + 1)), np.ones(k))
    starts = [init] if init is not None else list(_init_candidates(x, y, k, template, rng, restarts))
    best = None
    ok = 0
    for G0 in starts:
        try:
            res = ascend(G0, x, y, K, max_iter=max_iter)
        except (FitError, FloatingPointError, ValueError):
            continue
        if not np.isfinite(res.loglik):
            continue
        ok += 1
        if best is None or res.loglik > best.loglik:
            best = res
    if best is None:
        raise FitError("all restarts failed")
    best.restarts_ok = ok
    return best


# -- discrepancies -------------------------------------------------------------

def voronoi_cells(G: MixingMeasure, G_true: MixingMeasure) -> list[list[int]]:
    """For each true atom j, the fitted atoms whose nearest true atom is j (ties -> lowest j)."""
    a, b = G.atoms(), G_true.atoms()
    dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    nearest = dist.argmin(axis=1)
    return [[int(i) for i in np.flatnonzero(nearest == j)] for j in range(G_true.k)]


def _cell_costs(G: MixingMeasure, G_true: MixingMeasure) -> list[float]:
    costs = []
    for j, cell in enumerate(voronoi_cells(G, G_true)):
        c = 0.0
        for i in cell:
            c += float(np.linalg.norm(G.W[i] - G_true.W[j])) + abs(float(G.sigma[i] - G_true.sigma[j]))
        costs.append(c)
    return costs


def voronoi_loss(G: MixingMeasure, G_true: MixingMeasure, K: int) -> float:
    """Largest total cell discrepancy over K of the true atoms.

    Cell costs are non-negative, so the maximising subset is the K largest
    costs; they are summed in ascending atom order.
    """
    if G.k != G_true.k:
        raise ValueError(f"atom count mismatch: {G.k} vs {G_true.k}")
    check_k(K, G_true.k)
    costs = _cell_costs(G, G_true)
    order = sorted(range(len(costs)), key=lambda j: (-costs[j], j))[:K]
    total = 0.0
    for j in sorted(order):
        total += costs[j]
    return total


def hellinger_expected(G: MixingMeasure, G_true: MixingMeasure, K: int, x_samples, n_grid: int = 4001,
                       mass_tol: float = 1e-4) -> float:
    """Monte Carlo over ``x_samples`` of the Hellinger distance in y, by quadrature."""
    x = np.asarray(x_samples, dtype=np.float64).reshape(len(x_samples), -1)
    mu = np.hstack([expert_means(x, G.W), expert_means(x, G_true.W)])
    half = 8.0 * math.sqrt(max(G.sigma.max(), G_true.sigma.max()))
    lo = mu.min(axis=1) - half
    hi = mu.max(axis=1) + half
    u = np.linspace(0.0, 1.0, n_grid)
    ys = lo[:, None] + (hi - lo)[:, None] * u[None, :]
    f1 = density(ys, x, G, K)
    f2 = density(ys, x, G_true, K)
    width = (hi - lo)[:, None]
    mass1 = np.trapezoid(f1, u, axis=1) * width[:, 0]
    mass2 = np.trapezoid(f2, u, axis=1) * width[:, 0]
    if np.abs(mass1 - 1).max() > mass_tol or np.abs(mass2 - 1).max() > mass_tol:
        raise QuadratureError("quadrature grid misses density mass; widen the grid")
    h2 = 0.5 * np.trapezoid((np.sqrt(f1) - np.sqrt(f2)) ** 2, u, axis=1) * width[:, 0]
    return float(np.sqrt(np.clip(h2, 0.0, 1.0)).mean())


# -- rate experiment ----------------------------------------------------------

@dataclass
class RateCurve:
    n: np.ndarray
    median: np.ndarray
    slope: float
    intercept: float
    slope_ci: tuple[float, float] = (math.nan, math.nan)
    label: str = ""


def fit_loglog(n, values) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(np.asarray(n, float)), np.log(np.asarray(values, float)), 1)
    return float(slope), float(intercept)


PRESETS = {
    "thm2-k2": {
        "G": {"W": [[2.0, 1.0], [-1.5, 0.5]], "sigma": [0.1, 0.2]},
        "K": 1,
        "n_grid": [100, 316, 1000, 3162, 10000],
        "trials": 20,
        "restarts": 16,
    },
    "thm2-k3": {
        "G": {"W": [[2.0, 1.0], [-1.5, 0.5], [0.5, -2.5]], "sigma": [0.1, 0.2, 0.15]},
        "K": 2,
        "n_grid": [100, 316, 1000, 3162, 10000],
        "trials": 20,
        "restarts": 16,
    },
}


def _one_trial(args):
    G_true, K, n, trial, seed, restarts, x_eval, max_iter = args
    rng = np.random.default_rng([seed, n, trial])
    t0 = time.perf_counter()
    x, y = sample_dataset(G_true, n, rng, K)
    try:
        fit = mle_fit(x, y, G_true.k, K, restarts=restarts, rng=rng, template=G_true, max_iter=max_iter)
    except FitError:
        return {"n": n, "trial": trial, "ok": False}
    return {"n": n, "trial": trial, "ok": True, "loglik": fit.loglik,
            "D": voronoi_loss(fit.G, G_true, K),
            "hellinger": hellinger_expected(fit.G, G_true, K, x_eval),
            "seconds": time.perf_counter() - t0}


def _bootstrap_slope(ns, per_n: list[np.ndarray], rng: np.random.Generator, reps: int = 200):
    slopes = []
    for _ in range(reps):
        med = [np.median(v[rng.integers(0, len(v), len(v))]) for v in per_n]
        slopes.append(fit_loglog(ns, med)[0])
    return float(np.percentile(slopes, 2.5)), float(np.percentile(slopes, 97.5))


def rate_experiment(G_true: MixingMeasure, K: int, n_grid, trials: int, restarts: int = 16, seed: int = 0,
                    workers: int = 1, n_x_eval: int = 400, max_iter: int = 500):
    """Fit ``trials`` datasets per sample size and regress log median loss on log n.

    Returns ``(curve_D, curve_hellinger, rows)``.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if n_grid[-1] / n_grid[0] < 100:
        raise ExperimentError("sample-size grid must span at least two decades")
    x_eval = np.random.default_rng([seed, 7]).uniform(G_true.x_low, G_true.x_high, size=(n_x_eval, G_true.d))
    jobs = [(G_true, K, n, t, seed, restarts, x_eval, max_iter) for n in n_grid for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_one_trial, jobs))
    else:
        rows = [_one_trial(j) for j in jobs]
    curves = []
    brng = np.random.default_rng([seed, 11])
    for key in ("D", "hellinger"):
        per_n = []
        for n in n_grid:
            vals = np.array([r[key] for r in rows if r["n"] == n and r["ok"]])
            if len(vals) < trials / 2:
                raise ExperimentError(f"only {len(vals)} of {trials} fits succeeded at n={n}")
            per_n.append(vals)
        med = np.array([np.median(v) for v in per_n])
        slope, icpt = fit_loglog(n_grid, med)
        curves.append(RateCurve(np.array(n_grid), med, slope, icpt, _bootstrap_slope(n_grid, per_n, brng), key))
    return curves[0], curves[1], rows


def exhaustive_voronoi_loss(G: MixingMeasure, G_true: MixingMeasure, K: int) -> float:
    """Reference: enumerate every K-subset of the true atoms."""
    costs = _cell_costs(G, G_true)
    best = -math.inf
    for tau in itertools.combinations(range(G_true.k), K):
        s = 0.0
        for j in tau:
            s += costs[j]
        best = max(best, s)
    return best
