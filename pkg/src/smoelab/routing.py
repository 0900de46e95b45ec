"""Affinity scores, TopK gating, the competition mechanism and the router loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ROUTER_KINDS = ("linear", "cosine_xmoe", "fixed_random", "stablemoe", "competition_proxy")


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class AffinityScores:
    scores: Tensor  # tokens x N
    source: str = "router"  # "router" | "competition"

    @property
    def shape(self):
        return self.scores.shape


@dataclass
class GatingOutput:
    weights: Tensor  # tokens x N, exactly K nonzero per row
    selected: np.ndarray  # tokens x K, descending score, ties to lower index

    @property
    def k(self) -> int:
        return self.selected.shape[1]


@dataclass
class RouterConfig:
    kind: str = "linear"
    k: int = 2
    down_dim: int | None = None  # cosine router width, defaults to d // 4
    init_temperature: float = 0.07

    def validate(self, n_experts: int) -> None:
        if self.kind not in ROUTER_KINDS:
            raise ConfigError(f"unknown router kind {self.kind!r}; expected one of {ROUTER_KINDS}")
        check_k(self.k, n_experts)
        if self.init_temperature <= 0:
            raise ConfigError("temperature must be positive")


def check_k(k: int, n: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise ConfigError(f"K must satisfy 1 <= K <= N={n}, got {k!r}")


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, descending; ties go to the lower index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    check_k(k, scores.shape[-1])
    # stable sort on the negated scores keeps ascending index order among ties
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def topk_mask(v, k: int):
    """Keep the ``k`` largest entries of each row of ``v``; the rest become -inf.

    Accepts a 1-D/2-D array or a Tensor (in which case the result is a Tensor
    whose masked entries pass zero gradient).
    """
    arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ConfigError("topk_mask expects finite scores")
    flat = np.atleast_2d(arr)
    sel = topk_indices(flat, k)
    keep = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(keep, sel, True, axis=-1)
    keep = keep.reshape(arr.shape)
    if isinstance(v, Tensor):
        return ad.masked_fill(v, ~keep, -np.inf)
    return np.where(keep, arr, -np.inf)


def gate(s: AffinityScores | Tensor, k: int) -> GatingOutput:
    scores = s.scores if isinstance(s, AffinityScores) else s
    masked = topk_mask(scores, k)
    weights = ad.softmax_rows(masked)
    return GatingOutput(weights=weights, selected=topk_indices(scores.data, k))


def linear_router(z: Tensor, w_r: Tensor) -> AffinityScores:
    return AffinityScores(ad.matmul(z, w_r), "router")


def cosine_router(z: Tensor, w_down: Tensor, emb: Tensor, tau: Tensor | float) -> AffinityScores:
    """XMoE-style scores: cosine between the down-projected token and each expert embedding, over tau."""
    tau_t = tau if isinstance(tau, Tensor) else Tensor(tau)
    if not np.all(tau_t.data > 0):
        raise ConfigError(f"temperature must be positive, got {tau_t.data}")
    h = ad.normalize_rows(ad.matmul(z, w_down))
    e = ad.transpose(ad.normalize_rows(ad.transpose(emb)))
    return AffinityScores(ad.div(ad.matmul(h, e), tau_t), "router")


def fixed_random_router(z: Tensor, w_r: Tensor) -> AffinityScores:
    """Linear scores from a frozen, randomly initialised matrix."""
    frozen = w_r if not w_r.requires_grad else ad.detach(w_r)
    return AffinityScores(ad.matmul(z, frozen), "router")


def competition_affinity(expert_outputs: Tensor | list[Tensor]) -> AffinityScores:
    """Score each expert by the L2 norm of its own output (tokens x N)."""
    if isinstance(expert_outputs, Tensor):
        return AffinityScores(ad.l2_norm_rows(expert_outputs), "competition")
    cols = [ad.l2_norm_rows(o) for o in expert_outputs]
    return AffinityScores(ad.stack(cols, axis=1), "competition")


def router_loss(s_r: AffinityScores | Tensor, s_c: AffinityScores | Tensor, k: int) -> Tensor:
    """MSE between router and competition post-gating weights; the competition side is a constant."""
    r = s_r.scores if isinstance(s_r, AffinityScores) else s_r
    c = s_c.scores if isinstance(s_c, AffinityScores) else s_c
    if r.shape != c.shape:
        raise ad.ShapeError("router_loss", r.shape, c.shape)
    target = gate(ad.detach(c), k).weights
    return ad.mse(gate(r, k).weights, ad.detach(target))


def routing_entropy(g: GatingOutput | np.ndarray) -> float:
    """Mean over tokens of the Shannon entropy (nats) of the gate weight rows; 0 ln 0 = 0."""
    w = g.weights.data if isinstance(g, GatingOutput) else np.asarray(g, dtype=np.float64)
    w = np.atleast_2d(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, -w * np.log(w), 0.0)
    return float(terms.sum(axis=-1).mean())


def expert_load(g: GatingOutput, n_experts: int) -> np.ndarray:
    """Fraction of token-slots dispatched to each expert."""
    counts = np.bincount(g.selected.reshape(-1), minlength=n_experts).astype(np.float64)
    return counts / max(counts.sum(), 1.0)
