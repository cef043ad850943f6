"""Routers over the expert space.

Two families: a Gaussian density over a continuous index space (predicted
per token by affine mean / scale heads) sampled with the reparameterization
trick, and the classic softmax-over-top-k gate over a finite expert set.
Also houses the neuron-utilization entropy used to monitor routing health.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

# Scale floor keeps the router from collapsing to a point mass early on;
# softplus guarantees positivity before the floor is added.
SIGMA_MIN = 1e-4


@dataclass
class GaussianRouterParams:
    """Affine mean head and log-scale head over the continuous index space."""

    w_mu: Tensor      # [d_z, d_in]
    b_mu: Tensor      # [d_z]
    w_sigma: Tensor   # [d_z, d_in]
    b_sigma: Tensor   # [d_z]

    @classmethod
    def init(cls, d_in: int, d_z: int, rng: np.random.Generator,
             std: float = 0.02, dtype=np.float64) -> "GaussianRouterParams":
        return cls(
            w_mu=Tensor(rng.normal(0.0, std, (d_z, d_in)).astype(dtype), requires_grad=True),
            b_mu=Tensor(np.zeros(d_z, dtype=dtype), requires_grad=True),
            w_sigma=Tensor(rng.normal(0.0, std, (d_z, d_in)).astype(dtype), requires_grad=True),
            b_sigma=Tensor(np.zeros(d_z, dtype=dtype), requires_grad=True),
        )

    @property
    def d_z(self) -> int:
        return self.w_mu.shape[0]

    def tensors(self):
        yield "w_mu", self.w_mu
        yield "b_mu", self.b_mu
        yield "w_sigma", self.w_sigma
        yield "b_sigma", self.b_sigma


@dataclass
class RouterOutput:
    """Per-token Gaussian over the expert index space (diagonal scale)."""

    mu: Tensor     # [batch, d_z]
    sigma: Tensor  # [batch, d_z], strictly positive by construction


@dataclass
class ExpertIndexSample:
    """K reparameterized draws z = mu + sigma * eps, with the draws retained."""

    tensors: list     # K tensors of shape [batch, d_z]
    epsilon: np.ndarray  # [batch, K, d_z] standard-normal draws

    @property
    def K(self) -> int:
        return len(self.tensors)

    @property
    def z(self) -> np.ndarray:
        """Stacked sample values, [batch, K, d_z]."""
        return np.stack([t.data for t in self.tensors], axis=1)


def gaussian_route(params: GaussianRouterParams, x: Tensor) -> RouterOutput:
    """Predict the per-token Gaussian: mu affine, sigma = softplus(affine) + floor."""
    mu = T.linear(x, params.w_mu, params.b_mu)
    raw = T.linear(x, params.w_sigma, params.b_sigma)
    sigma = T.add_const(T.softplus(raw), SIGMA_MIN)
    return RouterOutput(mu=mu, sigma=sigma)


def sample_z(out: RouterOutput, K: int, rng: np.random.Generator) -> ExpertIndexSample:
    """Draw K index samples per token; gradients reach mu and sigma through
    the reparameterization, with epsilon held fixed."""
    if K < 1:
        raise ContractError(f"sample_z: K must be >= 1, got {K}")
    b, d_z = out.mu.shape
    dtype = out.mu.dtype
    if dtype in (np.float32, np.float64):
        eps = rng.standard_normal((b, K, d_z), dtype=dtype)
    else:
        eps = rng.standard_normal((b, K, d_z)).astype(dtype, copy=False)
    samples = [T.add(out.mu, T.mul_const(out.sigma, eps[:, k, :])) for k in range(K)]
    return ExpertIndexSample(tensors=samples, epsilon=eps)


@dataclass
class DiscreteRouterParams:
    """Linear gate producing one score per expert, with top-k selection."""

    w_gate: Tensor  # [n, d_in]
    k: int
    n: int

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ContractError(f"discrete router: k={self.k} outside [1, n={self.n}]")
        if self.w_gate.shape[0] != self.n:
            raise ContractError("discrete router: gate rows must equal expert count")

    @classmethod
    def init(cls, d_in: int, n: int, k: int, rng: np.random.Generator,
             std: float = 0.02, dtype=np.float64) -> "DiscreteRouterParams":
        w = Tensor(rng.normal(0.0, std, (n, d_in)).astype(dtype), requires_grad=True)
        return cls(w_gate=w, k=k, n=n)

    def tensors(self):
        yield "w_gate", self.w_gate


def router_scores(params: DiscreteRouterParams, x: Tensor) -> Tensor:
    """Raw gate scores g(x), one per expert."""
    return T.linear(x, params.w_gate)


def discrete_route(params: DiscreteRouterParams, x: Tensor):
    """Top-k expert selection with softmax weights over the selected scores.

    Returns (indices [batch, k] int array, weights [batch, k] Tensor).
    Ties are broken toward the lowest expert index; non-selected experts get
    exactly zero weight (they never enter the softmax).
    """
    if params.k > params.n:
        raise ContractError("discrete_route: k > n")
    scores = router_scores(params, x)
    indices = T.top_indices(scores.data, params.k)
    weights = T.softmax(T.take_cols(scores, indices))
    return indices, weights


@dataclass
class RoutingStats:
    """Accumulated per-neuron selection counts across (token, sample) pairs."""

    counts: np.ndarray  # int64 [d_ff]
    total: int = 0

    @classmethod
    def zeros(cls, d_ff: int) -> "RoutingStats":
        return cls(counts=np.zeros(d_ff, dtype=np.int64), total=0)

    def record_mask(self, keep: np.ndarray) -> None:
        """Accumulate a boolean retention pattern [..., d_ff]."""
        flat = keep.reshape(-1, keep.shape[-1])
        self.counts += flat.sum(axis=0, dtype=np.int64)
        self.total += int(flat.sum())

    def record_expert_selection(self, indices: np.ndarray, d_ff_expert: int) -> None:
        """Accumulate discrete expert choices as blocks of expert-owned neurons."""
        sel = np.bincount(indices.reshape(-1), minlength=self.counts.size // d_ff_expert)
        self.counts += np.repeat(sel, d_ff_expert).astype(np.int64)
        self.total += int(indices.size) * d_ff_expert

    def merge(self, other: "RoutingStats") -> None:
        self.counts += other.counts
        self.total += other.total


def routing_entropy(stats: RoutingStats) -> float:
    """Entropy of the empirical neuron-selection distribution, normalized to [0, 1].

    1 means perfectly uniform utilization, 0 means collapse onto one neuron.
    0 * log 0 is taken as 0.
    """
    d_ff = stats.counts.size
    if stats.total <= 0:
        raise ContractError("routing_entropy: no selections recorded")
    if d_ff < 2:
        raise ContractError("routing_entropy: needs at least 2 neurons")
    q = stats.counts / stats.total
    nz = q[q > 0]
    h = -(nz * np.log(nz)).sum() / np.log(d_ff)
    return float(min(1.0, max(0.0, h)))
