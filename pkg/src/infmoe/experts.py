"""Expert functions over continuous and discrete index spaces.

The continuous expert is one shared wide FFN modulated per sample: the
index vector z projects through Wz to a score per hidden unit, the largest
N% of scores are kept at their values (the rest zeroed), and the masked
hidden layer feeds the output projection. Each distinct z thereby selects
(and softly scales) a distinct subnetwork. The layer output averages K
sampled subnetworks. Discrete baselines (a bank of small independent FFNs
under a top-k gate) and the plain dense FFN live here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import routing as R
from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class MaskedFFNParams:
    """Shared wide FFN plus the index-to-neuron projection."""

    w1: Tensor  # [d_ff, d_in]
    w2: Tensor  # [d_out, d_ff]
    wz: Tensor  # [d_ff, d_z]
    active_fraction: float = 0.25
    activation: str = "gelu"

    def __post_init__(self):
        if not 0.0 < self.active_fraction <= 1.0:
            raise ContractError(f"active_fraction {self.active_fraction} outside (0, 1]")
        if self.activation not in T.ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.active_count < 1:
            raise ContractError("active_fraction keeps no hidden units")

    @property
    def d_ff(self) -> int:
        return self.w1.shape[0]

    @property
    def active_count(self) -> int:
        return math.ceil(self.active_fraction * self.d_ff)

    @classmethod
    def init(cls, d_in: int, d_ff: int, d_out: int, d_z: int,
             rng: np.random.Generator, active_fraction: float = 0.25,
             activation: str = "gelu", std: float = 0.02, w2_std: float | None = None,
             dtype=np.float64) -> "MaskedFFNParams":
        return cls(
            w1=Tensor(rng.normal(0.0, std, (d_ff, d_in)).astype(dtype), requires_grad=True),
            w2=Tensor(rng.normal(0.0, w2_std if w2_std is not None else std,
                                 (d_out, d_ff)).astype(dtype), requires_grad=True),
            wz=Tensor(rng.normal(0.0, std, (d_ff, d_z)).astype(dtype), requires_grad=True),
            active_fraction=active_fraction,
            activation=activation,
        )

    def tensors(self):
        yield "w1", self.w1
        yield "w2", self.w2
        yield "wz", self.wz


@dataclass
class Mask:
    """Per-token, per-sample soft modulation over the hidden units.

    Retained entries carry their projected scores ("soft"); zeroed entries
    are exactly zero. Exactly ``active_count`` entries survive per row.
    """

    tensors: list        # K tensors of shape [batch, d_ff]
    keep: list           # K boolean arrays [batch, d_ff]
    active_count: int

    @property
    def K(self) -> int:
        return len(self.tensors)

    @property
    def values(self) -> np.ndarray:
        """Dense mask values, [batch, K, d_ff]."""
        return np.stack([t.data for t in self.tensors], axis=1)


def compute_mask(params: MaskedFFNParams, sample) -> Mask:
    """Project index samples to neuron scores and keep the top fraction.

    ``sample`` is an ExpertIndexSample (or any list of [batch, d_z] tensors).
    Gradients flow to Wz and z through retained entries only.
    """
    zs = sample.tensors if hasattr(sample, "tensors") else list(sample)
    count = params.active_count
    masks, keeps = [], []
    for z in zs:
        m_hat = T.linear(z, params.wz)
        keep = T._top_count_bool(m_hat.data, count)
        masks.append(T.mul_const(m_hat, keep.astype(m_hat.dtype)))
        keeps.append(keep)
    return Mask(tensors=masks, keep=keeps, active_count=count)


def expert_forward(params: MaskedFFNParams, x: Tensor, mask: Mask,
                   sample_index: int = 0) -> Tensor:
    """f(x, z) = W2(Act(W1 x) * mask(z)) for one sample's mask."""
    if not 0 <= sample_index < mask.K:
        raise ContractError(f"sample_index {sample_index} outside 0..{mask.K - 1}")
    act = T.ACTIVATIONS[params.activation]
    h = act(T.linear(x, params.w1))
    if h.shape != mask.tensors[sample_index].shape:
        raise ShapeError(f"mask shape {mask.tensors[sample_index].shape} vs hidden {h.shape}")
    return T.linear(T.mul(h, mask.tensors[sample_index]), params.w2)


def inf_moe_forward(params: MaskedFFNParams, router: R.GaussianRouterParams,
                    x: Tensor, K: int, rng: np.random.Generator,
                    k_override: int | None = None):
    """Monte Carlo estimate of the continuous mixture: average f(x, z^(k)).

    Samples K expert indices per token from the router's Gaussian, builds a
    top-fraction mask per sample, and returns the equal-weight average of
    the K masked forwards together with the selection counts for entropy
    tracking. ``k_override`` swaps the sample count at inference time.
    """
    K = k_override if k_override is not None else K
    if K < 1:
        raise ContractError(f"inf_moe_forward: K must be >= 1, got {K}")
    out = R.gaussian_route(router, x)
    sample = R.sample_z(out, K, rng)
    mask = compute_mask(params, sample)

    act = T.ACTIVATIONS[params.activation]
    h = act(T.linear(x, params.w1))  # shared across samples: independent of z
    y = None
    for k in range(K):
        yk = T.linear(T.mul(h, mask.tensors[k]), params.w2)
        y = yk if y is None else T.add(y, yk)
    y = T.scale(y, 1.0 / K)

    stats = R.RoutingStats.zeros(params.d_ff)
    for keep in mask.keep:
        stats.record_mask(keep)
    return y, stats


@dataclass
class ExpertBank:
    """n independent small FFNs sharing dimensions."""

    w1s: list  # n tensors [d_ff_expert, d_in]
    w2s: list  # n tensors [d_out, d_ff_expert]
    activation: str = "gelu"

    def __post_init__(self):
        if len(self.w1s) != len(self.w2s) or not self.w1s:
            raise ContractError("expert bank needs matching, non-empty weight lists")
        shapes1 = {t.shape for t in self.w1s}
        shapes2 = {t.shape for t in self.w2s}
        if len(shapes1) != 1 or len(shapes2) != 1:
            raise ContractError("experts must share dimensions")

    @property
    def n(self) -> int:
        return len(self.w1s)

    @property
    def d_ff_expert(self) -> int:
        return self.w1s[0].shape[0]

    @classmethod
    def init(cls, d_in: int, d_ff_expert: int, d_out: int, n: int,
             rng: np.random.Generator, activation: str = "gelu",
             std: float = 0.02, w2_std: float | None = None,
             dtype=np.float64) -> "ExpertBank":
        w1s, w2s = [], []
        for _ in range(n):
            w1s.append(Tensor(rng.normal(0.0, std, (d_ff_expert, d_in)).astype(dtype),
                              requires_grad=True))
            w2s.append(Tensor(rng.normal(0.0, w2_std if w2_std is not None else std,
                                         (d_out, d_ff_expert)).astype(dtype),
                              requires_grad=True))
        return cls(w1s=w1s, w2s=w2s, activation=activation)

    def tensors(self):
        for i, (w1, w2) in enumerate(zip(self.w1s, self.w2s)):
            yield f"expert{i}.w1", w1
            yield f"expert{i}.w2", w2


def dense_ffn_forward(w1: Tensor, w2: Tensor, x: Tensor, activation: str = "gelu") -> Tensor:
    """Plain two-layer FFN: W2(Act(W1 x))."""
    act = T.ACTIVATIONS[activation]
    return T.linear(act(T.linear(x, w1)), w2)


def discrete_moe_forward(bank: ExpertBank, router: R.DiscreteRouterParams,
                         x: Tensor) -> Tensor:
    """y = sum over selected experts of p(i|x) e_i(x).

    Top-1 selection realizes the Switch baseline; top-2 over four experts is
    the classic sparse mixture. All experts are evaluated and weighted by a
    zero-padded gate row, which at this scale is cheaper than per-expert
    token dispatch and keeps the backward pass trivial.
    """
    if router.n != bank.n:
        raise ContractError(f"router n={router.n} vs bank n={bank.n}")
    indices, weights = R.discrete_route(router, x)
    full = T.scatter_cols(weights, indices, router.n)  # zero weight off the top-k
    y = None
    for i in range(bank.n):
        ei = dense_ffn_forward(bank.w1s[i], bank.w2s[i], x, bank.activation)
        yi = T.mul_colvec(ei, T.col(full, i))
        y = yi if y is None else T.add(y, yi)
    return y
