"""Small decoder-only transformer with a swappable FFN sublayer.

Four variants share an identical attention backbone: a plain dense FFN, a
top-1 routed expert bank (switch), a top-2 routed expert bank (moe), and
the continuous-index masked FFN (inf-moe). Discrete experts are sized
d_ff / n_experts each so the top-k active hidden width matches the
inf-moe variant's K * N budget.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import experts as E
from . import routing as R
from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

VARIANTS = ("dense", "switch", "moe", "inf-moe")

_NEG_INF = -1e30
_LN_EPS = 1e-5


@dataclass
class ModelConfig:
    """Architecture plus the FFN-variant selector.

    Defaults are sized for single-core CPU training in minutes while keeping
    the structural ratios (d_ff = 4 d_model, 4 experts / top-2, K=2 samples
    at a 0.25 active fraction) of the full-scale setting.
    """

    variant: str = "inf-moe"
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    d_z: int = 64
    block_size: int = 128
    vocab_size: int = 256
    n_experts: int = 4
    top_k: int = 2
    K_samples: int = 2
    active_fraction: float = 0.25
    seed: int = 1337
    moe_layer_stride: int = 1
    aux_loss_coeff: float = 0.01
    router_depth: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"variant {self.variant!r} not one of {VARIANTS}")
        if self.layers < 1 or self.heads < 1:
            raise ContractError("layers and heads must be positive")
        if self.d_model % self.heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.block_size < 1 or self.vocab_size < 2:
            raise ContractError("block_size >= 1 and vocab_size >= 2 required")
        if self.moe_layer_stride < 1:
            raise ContractError("moe_layer_stride must be >= 1")
        if self.variant == "switch" and self.top_k != 1:
            raise ContractError("switch variant is top-1 by definition")
        if self.variant in ("switch", "moe"):
            if not 1 <= self.top_k <= self.n_experts:
                raise ContractError(f"top_k {self.top_k} outside [1, n_experts={self.n_experts}]")
            if self.d_ff % self.n_experts != 0:
                raise ContractError("d_ff must divide evenly among the experts")
        if self.variant == "inf-moe":
            if self.d_z < 1 or self.K_samples < 1:
                raise ContractError("inf-moe requires d_z >= 1 and K_samples >= 1")
            if not 0.0 < self.active_fraction <= 1.0:
                raise ContractError("active_fraction must lie in (0, 1]")
            if math.ceil(self.active_fraction * self.d_ff) < 1:
                raise ContractError("active_fraction keeps no hidden units")
            if self.router_depth < 1:
                raise ContractError("router_depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def d_ff_expert(self) -> int:
        return self.d_ff // self.n_experts

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def is_moe_layer(self, layer: int) -> bool:
        return self.variant != "dense" and layer % self.moe_layer_stride == 0


@dataclass
class AttnParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    def tensors(self):
        for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            yield name, getattr(self, name)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    attn: AttnParams
    ffn_kind: str                      # "dense" | "discrete" | "inf"
    dense_w1: Tensor | None = None
    dense_w2: Tensor | None = None
    bank: E.ExpertBank | None = None
    gate: R.DiscreteRouterParams | None = None
    masked: E.MaskedFFNParams | None = None
    router: R.GaussianRouterParams | None = None
    router_trunk: list = field(default_factory=list)  # [(w, b), ...]

    def tensors(self):
        yield "ln1.g", self.ln1_g
        yield "ln1.b", self.ln1_b
        for n, t in self.attn.tensors():
            yield f"attn.{n}", t
        yield "ln2.g", self.ln2_g
        yield "ln2.b", self.ln2_b
        if self.ffn_kind == "dense":
            yield "ffn.w1", self.dense_w1
            yield "ffn.w2", self.dense_w2
        elif self.ffn_kind == "discrete":
            for n, t in self.gate.tensors():
                yield f"ffn.gate.{n}", t
            for n, t in self.bank.tensors():
                yield f"ffn.{n}", t
        else:
            for n, t in self.masked.tensors():
                yield f"ffn.{n}", t
            for i, (w, b) in enumerate(self.router_trunk):
                yield f"ffn.router.trunk{i}.w", w
                yield f"ffn.router.trunk{i}.b", b
            for n, t in self.router.tensors():
                yield f"ffn.router.{n}", t


@dataclass
class ModelParams:
    wte: Tensor
    wpe: Tensor
    lm_head: Tensor
    lnf_g: Tensor
    lnf_b: Tensor
    blocks: list

    def named_tensors(self):
        yield "wte", self.wte
        yield "wpe", self.wpe
        for i, blk in enumerate(self.blocks):
            for n, t in blk.tensors():
                yield f"h{i}.{n}", t
        yield "lnf.g", self.lnf_g
        yield "lnf.b", self.lnf_b
        yield "lm_head", self.lm_head

    def tensor_list(self):
        return [t for _, t in self.named_tensors()]

    def zero_grads(self):
        for t in self.tensor_list():
            t.zero_grad()


def _param(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_params(config: ModelConfig, dtype=np.float64) -> ModelParams:
    """GPT-2-style initialization: N(0, 0.02) matrices, residual projections
    scaled by 1/sqrt(2 * layers), zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed)
    std = 0.02
    resid_std = std / math.sqrt(2 * config.layers)
    D = config.d_model

    blocks = []
    for layer in range(config.layers):
        attn = AttnParams(
            wq=_param(rng, (D, D), std, dtype), wk=_param(rng, (D, D), std, dtype),
            wv=_param(rng, (D, D), std, dtype), wo=_param(rng, (D, D), resid_std, dtype),
            bq=_zeros(D, dtype), bk=_zeros(D, dtype), bv=_zeros(D, dtype), bo=_zeros(D, dtype),
        )
        blk = BlockParams(
            ln1_g=_ones(D, dtype), ln1_b=_zeros(D, dtype),
            ln2_g=_ones(D, dtype), ln2_b=_zeros(D, dtype),
            attn=attn, ffn_kind="dense",
        )
        if not config.is_moe_layer(layer):
            blk.dense_w1 = _param(rng, (config.d_ff, D), std, dtype)
            blk.dense_w2 = _param(rng, (D, config.d_ff), resid_std, dtype)
        elif config.variant in ("switch", "moe"):
            blk.ffn_kind = "discrete"
            blk.gate = R.DiscreteRouterParams.init(
                D, config.n_experts, k=config.top_k, rng=rng, std=std, dtype=dtype)
            blk.bank = E.ExpertBank.init(
                D, config.d_ff_expert, D, config.n_experts, rng,
                std=std, w2_std=resid_std, dtype=dtype)
        else:
            blk.ffn_kind = "inf"
            blk.masked = E.MaskedFFNParams.init(
                D, config.d_ff, D, config.d_z, rng,
                active_fraction=config.active_fraction,
                std=std, w2_std=resid_std, dtype=dtype)
            for _ in range(config.router_depth - 1):
                blk.router_trunk.append((_param(rng, (D, D), std, dtype), _zeros(D, dtype)))
            blk.router = R.GaussianRouterParams.init(D, config.d_z, rng, std=std, dtype=dtype)
        blocks.append(blk)

    return ModelParams(
        wte=_param(rng, (config.vocab_size, D), std, dtype),
        wpe=_param(rng, (config.block_size, D), std, dtype),
        lm_head=_param(rng, (config.vocab_size, D), std, dtype),
        lnf_g=_ones(D, dtype), lnf_b=_zeros(D, dtype),
        blocks=blocks,
    )


@dataclass
class ForwardResult:
    logits: Tensor                 # [batch, seq, vocab]
    layer_stats: list              # per layer: RoutingStats or None
    aux_loss: Tensor | None        # load-balance penalty (discrete variants)

    def merged_stats(self) -> R.RoutingStats | None:
        live = [s for s in self.layer_stats if s is not None]
        if not live:
            return None
        merged = R.RoutingStats.zeros(live[0].counts.size)
        for s in live:
            merged.merge(s)
        return merged


def _attention(config: ModelConfig, blk: BlockParams, xf: Tensor,
               batch: int, seq: int, causal_bias: np.ndarray) -> Tensor:
    D, H, hd = config.d_model, config.heads, config.head_dim

    def split_heads(t):
        # [B*T, D] -> [B, H, T, hd]; the transpose stays a strided view
        return T.swapaxes(T.reshape(t, (batch, seq, H, hd)), 1, 2)

    q = split_heads(T.linear(xf, blk.attn.wq, blk.attn.bq))
    k = split_heads(T.linear(xf, blk.attn.wk, blk.attn.bk))
    v = split_heads(T.linear(xf, blk.attn.wv, blk.attn.bv))

    scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / math.sqrt(hd))
    probs = T.softmax(T.add_const(scores, causal_bias))
    ctx = T.matmul(probs, v)

    ctx = T.reshape(T.swapaxes(ctx, 1, 2), (batch * seq, D))
    return T.linear(ctx, blk.attn.wo, blk.attn.bo)


def _discrete_ffn(config: ModelConfig, blk: BlockParams, xf: Tensor):
    y = E.discrete_moe_forward(blk.bank, blk.gate, xf)

    indices, _ = R.discrete_route(blk.gate, xf)
    stats = R.RoutingStats.zeros(config.d_ff)
    stats.record_expert_selection(indices, config.d_ff_expert)

    aux = None
    if config.aux_loss_coeff > 0.0:
        # switch-style balance penalty: n * sum_i freq_i * mean_prob_i
        n_tokens = xf.shape[0]
        probs = T.softmax(R.router_scores(blk.gate, xf))
        freq = np.bincount(indices.reshape(-1), minlength=config.n_experts)
        freq = freq.astype(probs.dtype) / indices.size
        mean_probs = T.scale(T.sum_axis0(probs), 1.0 / n_tokens)
        aux = T.scale(T.sum_all(T.mul_const(mean_probs, freq)), float(config.n_experts))
    return y, stats, aux


def _router_input(blk: BlockParams, xf: Tensor) -> Tensor:
    out = xf
    for w, b in blk.router_trunk:
        out = T.gelu(T.linear(out, w, b))
    return out


def model_forward(config: ModelConfig, params: ModelParams, tokens: np.ndarray,
                  rng: np.random.Generator | None = None,
                  k_override: int | None = None) -> ForwardResult:
    """Causal LM forward pass.

    ``tokens`` is an integer array [batch, seq]. Sampling variants draw from
    ``rng`` (defaulting to a generator seeded with config.seed, so a fixed
    seed gives bit-identical logits). ``k_override`` changes the number of
    expert samples at inference time without touching the parameters.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractError("tokens must be [batch, seq]")
    batch, seq = tokens.shape
    if seq > config.block_size:
        raise ContractError(f"sequence length {seq} exceeds block_size {config.block_size}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise IndexError("token id out of range")
    if k_override is not None and config.variant != "inf-moe":
        raise ContractError("K override only applies to the inf-moe variant")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    dtype = params.wte.dtype
    causal_bias = np.where(np.tril(np.ones((seq, seq), dtype=bool)), 0.0, _NEG_INF)
    causal_bias = causal_bias.astype(dtype)

    x = T.add(T.embedding(params.wte, tokens),
              T.embedding(params.wpe, np.arange(seq)[None, :].repeat(batch, axis=0)))

    layer_stats: list = []
    aux_total: Tensor | None = None
    for layer, blk in enumerate(params.blocks):
        xf = T.reshape(x, (batch * seq, config.d_model))
        a = _attention(config, blk,
                       T.layer_norm(xf, blk.ln1_g, blk.ln1_b, _LN_EPS),
                       batch, seq, causal_bias)
        xf = T.add(xf, a)

        h = T.layer_norm(xf, blk.ln2_g, blk.ln2_b, _LN_EPS)
        if blk.ffn_kind == "dense":
            y = E.dense_ffn_forward(blk.dense_w1, blk.dense_w2, h)
            stats, aux = None, None
        elif blk.ffn_kind == "discrete":
            y, stats, aux = _discrete_ffn(config, blk, h)
        else:
            y, stats = E.inf_moe_forward(
                blk.masked, blk.router, _router_input(blk, h),
                config.K_samples, rng, k_override=k_override)
            aux = None
        if aux is not None:
            aux_total = aux if aux_total is None else T.add(aux_total, aux)
        layer_stats.append(stats)
        xf = T.add(xf, y)
        x = T.reshape(xf, (batch, seq, config.d_model))

    xf = T.layer_norm(T.reshape(x, (batch * seq, config.d_model)),
                      params.lnf_g, params.lnf_b, _LN_EPS)
    logits = T.linear(xf, params.lm_head)
    logits = T.reshape(logits, (batch, seq, config.vocab_size))
    return ForwardResult(logits=logits, layer_stats=layer_stats, aux_loss=aux_total)


def count_params(config: ModelConfig, params: ModelParams) -> tuple[int, int]:
    """(active, total) trainable scalar counts.

    Active follows the per-token accounting convention: everything outside
    expert FFNs counts fully; discrete experts contribute a top_k / n_experts
    share; the masked FFN contributes a min(1, K * N) share of W1/W2 plus the
    full index projection and router.
    """
    total = sum(t.size for _, t in params.named_tensors())
    active = total
    # subtract the inactive expert share, walking blocks structurally
    for blk in params.blocks:
        if blk.ffn_kind == "discrete":
            expert_total = sum(t.size for n, t in blk.bank.tensors())
            active -= round(expert_total * (1.0 - config.top_k / config.n_experts))
        elif blk.ffn_kind == "inf":
            share = min(1.0, config.K_samples * config.active_fraction)
            w = blk.masked.w1.size + blk.masked.w2.size
            active -= round(w * (1.0 - share))
    return active, total
