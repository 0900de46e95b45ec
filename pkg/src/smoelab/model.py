"""Expert FFNs, the SMoE layer and the decoder-only Switch / GLaM stacks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import routing
from .autodiff import ParameterStore, Tensor
from .routing import AffinityScores, ConfigError, GatingOutput

LAYOUTS = ("switch", "glam")
CHECKPOINT_MAGIC = b"SMOELAB-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    layout: str = "switch"
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    n_experts: int = 4
    k: int = 2
    vocab_size: int = 256
    context: int = 128
    router: str = "linear"
    activation: str = "relu"
    router_down_dim: int | None = None
    router_temperature: float = 0.07
    init_std: float = 0.02
    tie_embeddings: bool = False

    def validate(self) -> None:
        if self.layout not in LAYOUTS:
            raise ConfigError(f"model.layout: expected one of {LAYOUTS}, got {self.layout!r}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "n_experts", "vocab_size", "context"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"model.{name}: expected a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.n_heads: d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"model.activation: expected relu or gelu, got {self.activation!r}")
        if self.layout == "glam" and self.n_layers < 2:
            raise ConfigError("model.n_layers: glam layout needs at least 2 blocks to contain an SMoE layer")
        try:
            routing.RouterConfig(self.router, self.k, self.router_down_dim, self.router_temperature).validate(
                self.n_experts)
        except ConfigError as exc:
            raise ConfigError(f"model.router: {exc}") from None

    def moe_blocks(self) -> list[int]:
        if self.layout == "switch":
            return list(range(self.n_layers))
        # dense first, then alternate
        return [b for b in range(self.n_layers) if b % 2 == 1]

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"model: unknown keys {sorted(unknown)}")
        return cls(**d)


def _activation(name: str):
    return ad.relu if name == "relu" else ad.gelu


@dataclass
class ExpertFFN:
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    activation: str = "relu"

    def __call__(self, z: Tensor) -> Tensor:
        return expert_forward(self, z)


def expert_forward(e: ExpertFFN, z: Tensor) -> Tensor:
    if z.shape[-1] != e.w_in.shape[0]:
        raise ad.ShapeError("expert_forward", z.shape, e.w_in.shape)
    h = _activation(e.activation)(ad.add(ad.matmul(z, e.w_in), e.b_in))
    return ad.add(ad.matmul(h, e.w_out), e.b_out)


@dataclass
class MoEOutput:
    output: Tensor
    gating: GatingOutput
    scores: AffinityScores
    mode: str
    router_scores: AffinityScores | None = None
    router_loss: Tensor | None = None


@dataclass
class SMoELayer:
    experts: list[ExpertFFN]
    router_kind: str
    router_params: dict[str, Tensor]
    k: int
    expert_calls: int = 0
    name: str = ""

    def __post_init__(self):
        routing.check_k(self.k, len(self.experts))
        shapes = {(e.w_in.shape, e.w_out.shape) for e in self.experts}
        if len(shapes) != 1:
            raise ConfigError("all experts in a layer must share shapes")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def router_scores(self, z: Tensor) -> AffinityScores:
        p = self.router_params
        if self.router_kind == "cosine_xmoe":
            return routing.cosine_router(z, p["w_down"], p["emb"], ad.exp(p["log_tau"]))
        if self.router_kind == "fixed_random":
            return routing.fixed_random_router(z, p["w"])
        return routing.linear_router(z, p["w"])

    def _expert(self, i: int, z: Tensor) -> Tensor:
        self.expert_calls += z.shape[0]
        return expert_forward(self.experts[i], z)


def smoe_forward(layer: SMoELayer, z: Tensor, mode: str = "routed", alpha: float = 0.0,
                 router_loss: bool = True) -> MoEOutput:
    """Run one SMoE layer on ``z`` (tokens x d).

    ``routed``: the router picks K experts per token and only those run.
    ``competition``: every expert runs, experts are scored by output norm and
    the top-K by norm are combined. The router is then scored on a detached
    copy of ``z`` to produce the router loss; with ``alpha > 0`` the router
    additionally receives ``alpha`` times the task-loss gradient that reaches
    the combination weights.
    """
    if z.ndim != 2:
        raise ad.ShapeError("smoe_forward", z.shape, ("tokens", "d"))
    n_tok = z.shape[0]
    if mode == "routed":
        s = layer.router_scores(z)
        g = routing.gate(s, layer.k)
        y = None
        for i in range(layer.n_experts):
            rows = np.flatnonzero((g.selected == i).any(axis=1))
            if rows.size == 0:
                continue
            out_i = layer._expert(i, ad.gather_rows(z, rows))
            w_i = ad.reshape(ad.index(g.weights, (rows, np.full(rows.size, i))), (rows.size, 1))
            part = ad.scatter_rows(ad.mul(out_i, w_i), rows, n_tok)
            y = part if y is None else ad.add(y, part)
        return MoEOutput(y, g, s, mode)
    if mode == "competition":
        outs = [layer._expert(i, z) for i in range(layer.n_experts)]
        s_c = routing.competition_affinity(outs)
        g_c = routing.gate(s_c, layer.k)
        weights = g_c.weights
        s_r = loss = None
        if router_loss:
            s_r = layer.router_scores(ad.detach(z))
            w_r = routing.gate(s_r, layer.k).weights
            loss = ad.mse(w_r, ad.detach(weights))
            if alpha > 0:
                weights = ad.straight_through(weights, ad.scale_grad(w_r, alpha))
        y = None
        for i, out_i in enumerate(outs):
            part = ad.mul(out_i, ad.reshape(weights[:, i], (n_tok, 1)))
            y = part if y is None else ad.add(y, part)
        return MoEOutput(y, g_c, s_c, mode, s_r, loss)
    raise ConfigError(f"unknown SMoE mode {mode!r}")


def mhsa_forward(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int) -> Tensor:
    """Causal multi-head self-attention on a (batch, time, d) tensor."""
    b, t, d = x.shape
    dh = d // n_heads

    def heads(w):
        return ad.transpose(ad.reshape(ad.matmul(x, w), (b, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(wq), heads(wk), heads(wv)
    att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    att = ad.softmax_rows(ad.masked_fill(att, future, -np.inf))
    y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(y, wo)


@dataclass
class ForwardResult:
    logits: Tensor
    moe: list[MoEOutput] = field(default_factory=list)


class SMoETransformer:
    """Pre-norm decoder-only transformer whose FFNs are (partly) SMoE layers."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params = ParameterStore()
        self.moe_layers: list[SMoELayer] = []
        self._moe_at: dict[int, int] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # parameter naming is part of the checkpoint format
    def _build(self, rng: np.random.Generator) -> None:
        c, P = self.config, self.params
        std = c.init_std

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        d = c.d_model
        P.add("tok_emb", normal(c.vocab_size, d))
        P.add("pos_emb", normal(c.context, d))
        moe_blocks = set(c.moe_blocks())
        for b in range(c.n_layers):
            pre = f"blocks.{b}"
            P.add(f"{pre}.ln1.g", np.ones(d))
            P.add(f"{pre}.ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                P.add(f"{pre}.attn.{w}", normal(d, d))
            P.add(f"{pre}.ln2.g", np.ones(d))
            P.add(f"{pre}.ln2.b", np.zeros(d))
            if b in moe_blocks:
                experts = []
                for i in range(c.n_experts):
                    ep = f"{pre}.moe.experts.{i}"
                    experts.append(ExpertFFN(
                        P.add(f"{ep}.w_in", normal(d, c.d_ff)), P.add(f"{ep}.b_in", np.zeros(c.d_ff)),
                        P.add(f"{ep}.w_out", normal(c.d_ff, d)), P.add(f"{ep}.b_out", np.zeros(d)),
                        c.activation))
                rp = f"{pre}.moe.router"
                frozen = c.router == "fixed_random"
                if c.router == "cosine_xmoe":
                    p = c.router_down_dim or max(1, d // 4)
                    router = {"w_down": P.add(f"{rp}.w_down", normal(d, p)),
                              "emb": P.add(f"{rp}.emb", normal(p, c.n_experts)),
                              "log_tau": P.add(f"{rp}.log_tau", np.array(math.log(c.router_temperature)))}
                else:
                    router = {"w": P.add(f"{rp}.w", normal(d, c.n_experts), frozen=frozen)}
                self._moe_at[b] = len(self.moe_layers)
                self.moe_layers.append(SMoELayer(experts, c.router, router, c.k, name=f"{pre}.moe"))
            else:
                fp = f"{pre}.ffn"
                P.add(f"{fp}.w_in", normal(d, c.d_ff))
                P.add(f"{fp}.b_in", np.zeros(c.d_ff))
                P.add(f"{fp}.w_out", normal(c.d_ff, d))
                P.add(f"{fp}.b_out", np.zeros(d))
        P.add("ln_f.g", np.ones(d))
        P.add("ln_f.b", np.zeros(d))
        if not c.tie_embeddings:
            P.add("head.w", normal(d, c.vocab_size))
        P.add("head.b", np.zeros(c.vocab_size))

    # -- parameter groups ------------------------------------------------
    def router_param_names(self, layer: int | None = None) -> list[str]:
        names = [n for n in self.params if ".moe.router." in n]
        if layer is None:
            return names
        prefix = self.moe_layers[layer].name + ".router."
        return [n for n in names if n.startswith(prefix)]

    def expert_param_names(self) -> list[str]:
        return [n for n in self.params if ".moe.experts." in n]

    @property
    def n_moe_layers(self) -> int:
        return len(self.moe_layers)

    def expert_calls(self) -> int:
        return sum(l.expert_calls for l in self.moe_layers)

    def reset_expert_calls(self) -> None:
        for l in self.moe_layers:
            l.expert_calls = 0

    # -- forward ---------------------------------------------------------
    def hidden(self, ids, modes: dict[int, str] | None = None, alpha: float = 0.0) -> tuple[Tensor, list[MoEOutput]]:
        """Final-normalised hidden states (batch, time, d) plus per-SMoE-layer outputs."""
        c, P = self.config, self.params
        ids = np.atleast_2d(np.asarray(ids, dtype=np.intp))
        b, t = ids.shape
        if t > c.context:
            raise ad.ShapeError("model_forward", ids.shape, (b, c.context))
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise IndexError(f"token id out of range for vocab_size={c.vocab_size}")
        modes = modes or {}
        x = ad.add(ad.embedding_lookup(P["tok_emb"], ids), ad.index(P["pos_emb"], slice(0, t)))
        moe_out: list[MoEOutput] = []
        for blk in range(c.n_layers):
            pre = f"blocks.{blk}"
            h = ad.layer_norm(x, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
            x = ad.add(x, mhsa_forward(h, P[f"{pre}.attn.wq"], P[f"{pre}.attn.wk"], P[f"{pre}.attn.wv"],
                                       P[f"{pre}.attn.wo"], c.n_heads))
            h = ad.reshape(ad.layer_norm(x, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"]), (b * t, c.d_model))
            if blk in self._moe_at:
                li = self._moe_at[blk]
                res = smoe_forward(self.moe_layers[li], h, modes.get(li, "routed"), alpha=alpha)
                moe_out.append(res)
                f = res.output
            else:
                fp = f"{pre}.ffn"
                dense = ExpertFFN(P[f"{fp}.w_in"], P[f"{fp}.b_in"], P[f"{fp}.w_out"], P[f"{fp}.b_out"], c.activation)
                f = expert_forward(dense, h)
            x = ad.add(x, ad.reshape(f, (b, t, c.d_model)))
        return ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"]), moe_out

    def forward(self, ids, modes: dict[int, str] | None = None, alpha: float = 0.0) -> ForwardResult:
        h, moe_out = self.hidden(ids, modes, alpha)
        w = self.params["head.w"] if "head.w" in self.params else ad.transpose(self.params["tok_emb"])
        logits = ad.add(ad.matmul(h, w), self.params["head.b"])
        return ForwardResult(logits, moe_out)

    __call__ = forward


def model_forward(model: SMoETransformer, ids, modes=None, alpha: float = 0.0) -> ForwardResult:
    return model.forward(ids, modes, alpha)


# -- checkpoint format -----------------------------------------------------
# magic | u32 version | u64 header length | JSON header | raw float64 LE payload

def save_checkpoint(path: str | Path, model: SMoETransformer, extra: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(model.config),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, t in model.params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(raw[off:off + hlen])
    off += hlen
    arrays = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(entry["shape"]).copy()
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return header, arrays


def load_checkpoint(path: str | Path) -> SMoETransformer:
    header, arrays = read_checkpoint(path)
    model = SMoETransformer(ModelConfig.from_dict(header["model"]))
    if model.params.names() != [e["name"] for e in header["params"]]:
        raise ValueError(f"{path}: parameter layout does not match its model config")
    model.params.load_state_dict(arrays)
    return model
