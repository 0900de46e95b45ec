"""Finite-difference checks of every differentiable op and of a small model end to end."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .model import ModelConfig, SMoETransformer, smoe_forward


def _p(rng, *shape, positive=False):
    a = rng.normal(size=shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (loss builder, params). Losses are random projections of op outputs."""
    cases = {}

    def proj(t: Tensor, seed: int) -> Tensor:
        w = np.random.default_rng(seed).normal(size=t.shape)
        return ad.sum_(ad.mul(t, Tensor(w)))

    a, b = _p(rng, 3, 4), _p(rng, 4, 5)
    cases["matmul"] = (lambda: proj(ad.matmul(a, b), 1), [a, b])
    x3, w2 = _p(rng, 2, 3, 4), _p(rng, 4, 3)
    cases["matmul_batched"] = (lambda: proj(ad.matmul(x3, w2), 2), [x3, w2])
    c, d = _p(rng, 3, 4), _p(rng, 4)
    cases["add_broadcast"] = (lambda: proj(ad.add(c, d), 3), [c, d])
    cases["sub"] = (lambda: proj(ad.sub(c, d), 4), [c, d])
    cases["mul"] = (lambda: proj(ad.mul(c, d), 5), [c, d])
    e = _p(rng, 3, 4, positive=True)
    cases["div"] = (lambda: proj(ad.div(c, e), 6), [c, e])
    cases["scale"] = (lambda: proj(ad.scale(c, -2.5), 7), [c])
    cases["exp"] = (lambda: proj(ad.exp(c), 8), [c])
    cases["log"] = (lambda: proj(ad.log(e), 9), [e])
    cases["sqrt"] = (lambda: proj(ad.sqrt(e), 10), [e])
    cases["square"] = (lambda: proj(ad.square(c), 11), [c])
    # keep away from the kinks
    k = Tensor(np.where(rng.random((3, 4)) < 0.5, -1, 1) * (rng.random((3, 4)) + 0.1), requires_grad=True)
    cases["abs"] = (lambda: proj(ad.abs_(k), 12), [k])
    cases["relu"] = (lambda: proj(ad.relu(k), 13), [k])
    cases["gelu"] = (lambda: proj(ad.gelu(c), 14), [c])
    cases["softmax_rows"] = (lambda: proj(ad.softmax_rows(c), 15), [c])
    mask = np.array([[False, True, False, False], [True, False, False, True], [False] * 4])
    cases["masked_softmax"] = (lambda: proj(ad.softmax_rows(ad.masked_fill(c, mask)), 16), [c])
    cases["log_softmax_rows"] = (lambda: proj(ad.log_softmax_rows(c), 17), [c])
    cases["logsumexp_rows"] = (lambda: proj(ad.logsumexp_rows(c), 18), [c])
    cases["l2_norm_rows"] = (lambda: proj(ad.l2_norm_rows(c), 19), [c])
    g, bb = _p(rng, 4), _p(rng, 4)
    cases["layer_norm"] = (lambda: proj(ad.layer_norm(c, g, bb), 20), [c, g, bb])
    targets = rng.integers(0, 4, size=3)
    cases["cross_entropy_nll"] = (lambda: ad.cross_entropy_nll(c, targets), [c])
    tgt = Tensor(rng.normal(size=(3, 4)))
    cases["mse"] = (lambda: ad.mse(c, tgt), [c])
    table = _p(rng, 6, 4)
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    cases["embedding_lookup"] = (lambda: proj(ad.embedding_lookup(table, ids), 21), [table])
    cases["gather_rows"] = (lambda: proj(ad.gather_rows(table, [4, 0, 4]), 22), [table])
    cases["scatter_rows"] = (lambda: proj(ad.scatter_rows(c, [1, 1, 4], 6), 23), [c])
    cases["index"] = (lambda: proj(c[:, 1:3], 24), [c])
    cases["concat"] = (lambda: proj(ad.concat([c, a], axis=0), 25), [c, a])
    cases["stack"] = (lambda: proj(ad.stack([c, a], axis=1), 26), [c, a])
    cases["reshape_transpose"] = (lambda: proj(ad.transpose(ad.reshape(x3, (4, 2, 3)), (2, 0, 1)), 27), [x3])
    cases["sum_mean"] = (lambda: ad.add(ad.sum_(ad.square(c), axis=1).sum(), ad.mean(c, axis=0).sum()), [c])
    cases["normalize_rows"] = (lambda: proj(ad.normalize_rows(c), 28), [c])
    return cases


def check_ops(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: finite_difference_check(fn, params, h=h) for name, (fn, params) in op_cases(rng).items()}


def check_smoe_layer(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Both SMoE modes on a single layer.

    The router loss sees a detached input and detached targets, so it is
    checked against the router parameters alone.
    """
    cfg = ModelConfig(n_layers=1, d_model=6, n_heads=1, d_ff=8, n_experts=3, k=2, vocab_size=5, context=4,
                      init_std=0.5)
    model = SMoETransformer(cfg, seed=seed)
    layer = model.moe_layers[0]
    z = Tensor(np.random.default_rng(seed + 1).normal(size=(5, 6)), requires_grad=True)
    w = Tensor(np.random.default_rng(seed + 2).normal(size=(5, 6)))
    moe = [t for name, t in model.params.trainable() if ".moe." in name]
    router = [layer.router_params[k] for k in sorted(layer.router_params)]

    def task(mode):
        res = smoe_forward(layer, z, mode, router_loss=False)
        return ad.sum_(ad.mul(res.output, w))

    def rloss():
        return smoe_forward(layer, z, "competition").router_loss

    return {
        "smoe_routed": finite_difference_check(lambda: task("routed"), [z] + moe, h=h),
        "smoe_competition": finite_difference_check(lambda: task("competition"), [z] + moe, h=h),
        "smoe_router_loss": finite_difference_check(rloss, router, h=h),
    }


def check_model(seed: int = 0, h: float = 1e-5, layout: str = "switch", max_entries: int = 12) -> float:
    """End-to-end check through a 2-block model on a 4-token batch."""
    cfg = ModelConfig(layout=layout, n_layers=2, d_model=8, n_heads=2, d_ff=12, n_experts=3, k=2,
                      vocab_size=7, context=4, init_std=0.3)
    model = SMoETransformer(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 7, size=(1, 5))
    params = [t for _, t in model.params.trainable()]

    def fn():
        res = model.forward(ids[:, :4])
        return ad.cross_entropy_nll(res.logits, ids[:, 1:])

    return finite_difference_check(fn, params, h=h, max_entries=max_entries, rng=rng)


def run_all(seed: int = 0) -> dict[str, float]:
    res = check_ops(seed)
    res.update(check_smoe_layer(seed))
    res["model_switch"] = check_model(seed, layout="switch")
    res["model_glam"] = check_model(seed, layout="glam")
    return res


OP_TOL = 1e-4
MODEL_TOL = 1e-3
