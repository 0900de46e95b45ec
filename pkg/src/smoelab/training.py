"""Scheduled competition training, baseline trainers, Adam, evaluation and finetuning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import routing
from .data import Corpus, batcher, eval_windows
from .metrics import MetricsSink
from .model import ModelConfig, SMoETransformer, save_checkpoint
from .routing import ConfigError

log = logging.getLogger(__name__)

ALGORITHMS = ("competesmoe", "smoe", "smoe_fixed", "xmoe", "stablemoe")
LN2 = math.log(2.0)

# router score function used by each training algorithm
ROUTER_FOR = {
    "competesmoe": "linear",
    "smoe": "linear",
    "stablemoe": "linear",
    "smoe_fixed": "fixed_random",
    "xmoe": "cosine_xmoe",
}


class TrainingError(RuntimeError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class TrainerConfig:
    algorithm: str = "competesmoe"
    lam: float = 0.05
    alpha: float | None = None  # None -> layout default
    base_lr: float = 0.01
    steps: int = 1000
    batch_size: int = 8
    context: int = 128
    eval_interval: int = 200
    eval_max_windows: int | None = 64
    seed: int = 0
    deterministic: bool = True
    grad_clip: float | None = 1.0
    stablemoe_phase1: float = 0.3
    strict_router_schedule: bool = False
    finetune_lr: float = 1e-3

    def validate(self, require_positive_lambda: bool = True) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"trainer.algorithm: expected one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"trainer.lam: must lie in [0, 1], got {self.lam}")
        if require_positive_lambda and self.algorithm == "competesmoe" and self.lam <= 0.0:
            raise ConfigError("trainer.lam: competesmoe requires lam in (0, 1]")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError(f"trainer.alpha: must be >= 0, got {self.alpha}")
        if self.base_lr <= 0:
            raise ConfigError("trainer.base_lr: must be positive")
        for name in ("steps", "batch_size", "context", "eval_interval"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"trainer.{name}: expected a positive integer, got {v!r}")
        if not 0.0 <= self.stablemoe_phase1 <= 1.0:
            raise ConfigError("trainer.stablemoe_phase1: must lie in [0, 1]")


def default_alpha(layout: str) -> float:
    return 5.0 if layout == "switch" else 0.1


@dataclass
class Schedule:
    lam: float = 0.05
    per_layer: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"schedule probability must lie in [0, 1], got {self.lam}")


def coin_flips(t: int, n_layers: int, lam: float, rngs: list[np.random.Generator]) -> set[int]:
    """Independent per-layer Bernoulli(lam) draws for step ``t``; heads => competition step."""
    if len(rngs) < n_layers:
        raise ValueError("one RNG stream per layer is required")
    return {l for l in range(n_layers) if rngs[l].random() < lam}


@dataclass
class TrainState:
    step: int = 0
    base_lr: float = 0.01
    alpha: float = 0.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    data_rng: np.random.Generator | None = None
    coin_rngs: list[np.random.Generator] = field(default_factory=list)
    best_valid: float = math.inf
    best_state: dict[str, np.ndarray] | None = None
    best_step: int = 0

    @classmethod
    def create(cls, seed: int, n_layers: int, base_lr: float, alpha: float) -> TrainState:
        ss = np.random.SeedSequence(seed)
        data_ss, *coin_ss = ss.spawn(1 + n_layers)
        return cls(base_lr=base_lr, alpha=alpha, data_rng=np.random.default_rng(data_ss),
                   coin_rngs=[np.random.default_rng(s) for s in coin_ss])

    def lr(self, t: int | None = None) -> float:
        t = self.step if t is None else t
        return self.base_lr / math.sqrt(max(t, 1))


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params, state: TrainState, skip: set[str] = frozenset(), lr: float | None = None) -> None:
    """One Adam update on ``(name, tensor)`` pairs; advances ``state.step`` first.

    Tensors without a gradient, or named in ``skip``, are left untouched along
    with their moments.
    """
    state.step += 1
    t = state.step
    lr = state.lr(t) if lr is None else lr
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for name, p in params:
        if p.grad is None or name in skip:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def clip_grad_norm(params, max_norm: float) -> float:
    sq = 0.0
    for _, p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad *= c
    return norm


@dataclass
class LossBreakdown:
    nll: float
    router_loss: dict[int, float] = field(default_factory=dict)
    router_term: float = 0.0  # alpha * nll, the router's task-loss weight on competition layers
    scheduled: frozenset = frozenset()
    entropy: dict[int, float] = field(default_factory=dict)
    expert_calls: int = 0
    grad_norm: float = 0.0

    @property
    def bpc(self) -> float:
        return self.nll / LN2


def _nan_dump(model: SMoETransformer, moe_outputs) -> dict:
    dump = {}
    for li, out in enumerate(moe_outputs):
        layer = model.moe_layers[li]
        entry = {"layer": layer.name, "mode": out.mode,
                 "scores_finite": bool(np.isfinite(out.scores.scores.data).all()),
                 "output_finite": bool(np.isfinite(out.output.data).all())}
        for n in model.router_param_names(li) + [n for n in model.expert_param_names() if n.startswith(layer.name)]:
            d = model.params[n].data
            entry[n] = {"finite": bool(np.isfinite(d).all()), "absmax": float(np.nanmax(np.abs(d)))}
        dump[str(li)] = entry
    return dump


def train_step(model: SMoETransformer, batch, state: TrainState, schedule: Schedule | None,
               cfg: TrainerConfig) -> LossBreakdown:
    """One optimisation step.

    Layers drawn into the competition set run all experts and combine them by
    output norm; their routers are trained on the router loss plus ``alpha``
    times the task loss. All other layers run routed. Experts always follow
    the task-loss gradient.
    """
    x, y = batch
    n_moe = model.n_moe_layers
    sched = coin_flips(state.step + 1, n_moe, schedule.lam, state.coin_rngs) if schedule is not None else set()
    modes = {l: "competition" for l in sched}
    model.reset_expert_calls()
    model.params.zero_grad()
    res = model.forward(x, modes, alpha=state.alpha)
    nll = ad.cross_entropy_nll(res.logits, y)
    total = nll
    rl = {}
    for l in sorted(sched):
        out = res.moe[l]
        rl[l] = out.router_loss.item()
        total = ad.add(total, out.router_loss)
    if not np.isfinite(total.item()):
        raise TrainingError(f"non-finite loss at step {state.step + 1}", _nan_dump(model, res.moe))
    ad.backward(total)
    trainable = model.params.trainable()
    gnorm = clip_grad_norm(trainable, cfg.grad_clip) if cfg.grad_clip else 0.0
    skip: set[str] = set()
    if cfg.strict_router_schedule and schedule is not None:
        for l in range(n_moe):
            if l not in sched:
                skip.update(model.router_param_names(l))
    adam_step(trainable, state, skip)
    return LossBreakdown(
        nll=nll.item(), router_loss=rl, router_term=state.alpha * nll.item() if sched else 0.0,
        scheduled=frozenset(sched),
        entropy={l: routing.routing_entropy(o.gating) for l, o in enumerate(res.moe)},
        expert_calls=model.expert_calls(), grad_norm=gnorm)


@dataclass
class EvalResult:
    nll: float
    bpc: float
    perplexity: float
    entropy: dict[int, float] = field(default_factory=dict)
    tokens: int = 0


def evaluate(model: SMoETransformer, ids: np.ndarray, context: int | None = None, batch_size: int = 16,
             max_windows: int | None = None, records: list | None = None) -> EvalResult:
    """Mean token NLL over non-overlapping windows, in routed (inference) mode.

    When ``records`` is a list, per-token routing rows
    ``(layer, selected, weights, entropy)`` are appended to it.
    """
    if ids is None or len(ids) < 2:
        raise ValueError("cannot evaluate on an empty split")
    context = context or model.config.context
    xs, ys = eval_windows(ids, context, max_windows)
    total, count = 0.0, 0
    ent_sum: dict[int, float] = {}
    for i in range(0, len(xs), batch_size):
        xb, yb = xs[i:i + batch_size], ys[i:i + batch_size]
        res = model.forward(xb)
        nll = ad.cross_entropy_nll(res.logits, yb).item()
        total += nll * yb.size
        count += yb.size
        for l, out in enumerate(res.moe):
            ent_sum[l] = ent_sum.get(l, 0.0) + routing.routing_entropy(out.gating) * yb.size
            if records is not None:
                w = out.gating.weights.data
                for tok in range(w.shape[0]):
                    records.append((l, out.gating.selected[tok], w[tok]))
    nll = total / count
    return EvalResult(nll, nll / LN2, math.exp(nll), {l: s / count for l, s in ent_sum.items()}, count)


@dataclass
class TrainResult:
    model: SMoETransformer
    state: TrainState
    history: list[LossBreakdown]
    valid: EvalResult | None
    test: EvalResult | None
    train_seconds: float
    checkpoint: Path | None = None


def build_model(model_cfg: ModelConfig, algorithm: str, seed: int) -> SMoETransformer:
    cfg = replace(model_cfg, router=ROUTER_FOR[algorithm])
    return SMoETransformer(cfg, seed=seed)


def train(model_cfg: ModelConfig, cfg: TrainerConfig, corpus: Corpus, out_dir: str | Path | None = None,
          model: SMoETransformer | None = None, final_eval: bool = True,
          require_positive_lambda: bool = False, progress: bool = False) -> TrainResult:
    """Train with the configured algorithm; keep the lowest-validation-loss parameters."""
    cfg.validate(require_positive_lambda=require_positive_lambda)
    if cfg.context > model_cfg.context:
        raise ConfigError(f"trainer.context: {cfg.context} exceeds model.context {model_cfg.context}")
    model_cfg = replace(model_cfg, vocab_size=corpus.vocab_size)
    if model is None:
        model = build_model(model_cfg, cfg.algorithm, cfg.seed)
    alpha = cfg.alpha if cfg.alpha is not None else default_alpha(model.config.layout)
    state = TrainState.create(cfg.seed, model.n_moe_layers, cfg.base_lr, alpha)
    schedule = Schedule(cfg.lam) if cfg.algorithm == "competesmoe" else None
    stream = batcher(corpus.ids("train"), cfg.context, cfg.batch_size, state.data_rng)
    valid_ids = corpus.ids("valid")

    sink = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        # a new run owns its metrics file
        (out / "metrics.csv").unlink(missing_ok=True)
        sink = MetricsSink(out / "metrics.csv", metrics_columns(model.n_moe_layers))

    phase2_at = int(round(cfg.stablemoe_phase1 * cfg.steps)) if cfg.algorithm == "stablemoe" else None
    history: list[LossBreakdown] = []
    train_seconds = 0.0
    try:
        for step in range(1, cfg.steps + 1):
            if phase2_at is not None and step == phase2_at + 1:
                for n in model.router_param_names():
                    model.params.freeze(n)
            batch = next(stream)
            t0 = time.perf_counter()
            lb = train_step(model, batch, state, schedule, cfg)
            dt = time.perf_counter() - t0
            train_seconds += dt
            history.append(lb)
            if sink is not None:
                sink.write(metrics_row(step, "train", lb.nll, lb.router_loss, lb.entropy, lb.expert_calls, dt * 1e3,
                                       model.n_moe_layers))
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                ev = evaluate(model, valid_ids, cfg.context, max_windows=cfg.eval_max_windows)
                if sink is not None:
                    sink.write(metrics_row(step, "valid", ev.nll, {}, ev.entropy, 0, 0.0, model.n_moe_layers))
                if ev.nll < state.best_valid:
                    state.best_valid, state.best_step = ev.nll, step
                    state.best_state = model.params.state_dict()
                if progress:
                    log.info("step %d train_bpc %.4f valid_bpc %.4f", step, lb.bpc, ev.bpc)
    finally:
        if sink is not None:
            sink.close()
    if state.best_state is not None:
        model.params.load_state_dict(state.best_state)
    valid = test = None
    if final_eval:
        valid = evaluate(model, valid_ids, cfg.context)
        test = evaluate(model, corpus.ids("test"), cfg.context)
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.bin"
        save_checkpoint(ckpt, model)
    return TrainResult(model, state, history, valid, test, train_seconds, ckpt)


def stablemoe_train(model_cfg: ModelConfig, cfg: TrainerConfig, corpus: Corpus, phase1_fraction: float | None = None,
                    **kw) -> TrainResult:
    cfg = replace(cfg, algorithm="stablemoe",
                  stablemoe_phase1=cfg.stablemoe_phase1 if phase1_fraction is None else phase1_fraction)
    return train(model_cfg, cfg, corpus, **kw)


def metrics_columns(n_layers: int) -> list[str]:
    return (["step", "split", "nll", "bpc"] + [f"router_loss_l{l}" for l in range(n_layers)]
            + [f"entropy_l{l}" for l in range(n_layers)] + ["expert_calls", "wall_ms"])


def metrics_row(step, split, nll, router_loss, entropy, calls, wall_ms, n_layers) -> dict:
    row = {"step": step, "split": split, "nll": f"{nll:.6f}", "bpc": f"{nll / LN2:.6f}",
           "expert_calls": calls, "wall_ms": f"{wall_ms:.3f}"}
    for l in range(n_layers):
        row[f"router_loss_l{l}"] = f"{router_loss[l]:.6g}" if l in router_loss else ""
        row[f"entropy_l{l}"] = f"{entropy[l]:.6f}" if l in entropy else ""
    return row


# -- finetuning ---------------------------------------------------------------

def toy_classification_task(n: int, length: int, vocab_size: int, seed: int = 0, n_classes: int = 2):
    """Sequences whose class is the id block they are drawn from (linearly separable by mean embedding)."""
    if vocab_size < 2 * n_classes:
        raise ValueError("vocabulary too small for the toy task")
    rng = np.random.default_rng(seed)
    block = vocab_size // n_classes
    labels = rng.integers(0, n_classes, size=n)
    x = rng.integers(0, block, size=(n, length)) + labels[:, None] * block
    return x.astype(np.int64), labels.astype(np.int64)


@dataclass
class FinetuneResult:
    accuracy: float
    train_loss: float
    router_unchanged: bool


def finetune(model: SMoETransformer, task_train, task_test, steps: int = 300, batch_size: int = 16,
             lr: float = 1e-3, seed: int = 0, train_experts: bool = True, hidden: int | None = None) -> FinetuneResult:
    """Freeze everything but the experts (optionally) and a fresh two-layer classifier head."""
    (xtr, ytr), (xte, yte) = task_train, task_test
    if xtr.max() >= model.config.vocab_size or xtr.shape[1] > model.config.context:
        raise ValueError("task does not fit the checkpoint's vocabulary or context")
    n_classes = int(max(ytr.max(), yte.max())) + 1
    d = model.config.d_model
    hidden = hidden or d
    rng = np.random.default_rng(seed)
    head = ad.ParameterStore()
    w1 = head.add("cls.w1", rng.normal(0, 1 / math.sqrt(d), (d, hidden)))
    b1 = head.add("cls.b1", np.zeros(hidden))
    w2 = head.add("cls.w2", rng.normal(0, 1 / math.sqrt(hidden), (hidden, n_classes)))
    b2 = head.add("cls.b2", np.zeros(n_classes))

    experts = set(model.expert_param_names()) if train_experts else set()
    for n in model.params:
        if n not in experts:
            model.params.freeze(n)
    routers_before = {n: model.params[n].data.copy() for n in model.router_param_names()}
    params = [(n, model.params[n]) for n in model.params if n in experts] + list(head.items())
    state = TrainState(base_lr=lr)

    def logits_for(xb):
        h, _ = model.hidden(xb)
        pooled = ad.mean(h, axis=1)
        z = ad.relu(ad.add(ad.matmul(pooled, w1), b1))
        return ad.add(ad.matmul(z, w2), b2)

    loss_v = float("nan")
    for _ in range(steps):
        idx = rng.integers(0, len(xtr), size=batch_size)
        for _, p in params:
            p.grad = None
        loss = ad.cross_entropy_nll(logits_for(xtr[idx]), ytr[idx])
        ad.backward(loss)
        adam_step(params, state, lr=lr)
        loss_v = loss.item()
    correct = 0
    for i in range(0, len(xte), 64):
        pred = logits_for(xte[i:i + 64]).data.argmax(axis=-1)
        correct += int((pred == yte[i:i + 64]).sum())
    unchanged = all(np.array_equal(routers_before[n], model.params[n].data) for n in routers_before)
    return FinetuneResult(correct / len(xte), loss_v, unchanged)
