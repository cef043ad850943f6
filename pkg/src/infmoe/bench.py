"""Masked-FFN forward latency study, CPU, single thread.

Compares three strategies on identical pre-generated inputs:

  naive         two-pass reference: materialize the full hidden layer,
                multiply the mask as a separate pass, then the second matmul
  fused         compiled single-pass kernel touching only retained indices
                (falls back to the numpy gather implementation if the
                extension is missing; "fused-py" requests that explicitly)
  masked-dense  full-shape GEMM pipeline with the mask multiply folded in
                between the two products, no intermediate temporaries

Outputs are cross-checked against the reference before any timing is
reported; a failed equivalence check yields a record without latency.
Measurements run in float64 (equivalence tolerance 1e-12 max-norm relative;
the float32 kernel path is exercised by unit tests at 1e-6).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .errors import ContractError
from .tensor import _gelu_np, _top_count_bool

STRATEGIES = ("naive", "fused", "masked-dense", "fused-py")
DEFAULT_STRATEGIES = ("naive", "fused", "masked-dense")

_EQUIV_RTOL = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-6}
_MASK_DZ = 64
_BASE_SEED = 0x1007


@dataclass
class BenchConfig:
    d_in: int = 512
    d_ff: int = 2048
    d_out: int = 512
    batch: int = 8
    seq: int = 128
    active_rates: tuple = (0.125, 0.25, 0.5, 0.75, 1.0)
    repeats: int = 30
    warmup_iters: int = 5
    strategies: tuple = tuple(DEFAULT_STRATEGIES)

    def __post_init__(self):
        self.active_rates = tuple(float(r) for r in self.active_rates)
        self.strategies = tuple(self.strategies)
        if self.repeats < 5:
            raise ContractError("repeats must be >= 5")
        if not all(0.0 < r <= 1.0 for r in self.active_rates):
            raise ContractError("active rates must lie in (0, 1]")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ContractError(f"unknown strategies: {sorted(unknown)}")
        if not self.strategies:
            raise ContractError("no strategies selected")

    @property
    def tokens(self) -> int:
        return self.batch * self.seq

    def to_dict(self) -> dict:
        d = asdict(self)
        d["active_rates"] = list(self.active_rates)
        d["strategies"] = list(self.strategies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FFNWeights:
    w1: np.ndarray   # [d_ff, d_in]
    w2: np.ndarray   # [d_out, d_ff]
    w2t: np.ndarray = None  # [d_ff, d_out], contiguous, derived

    def __post_init__(self):
        if self.w2t is None:
            self.w2t = np.ascontiguousarray(self.w2.T)


def ffn_naive(x: np.ndarray, params: FFNWeights, mask: np.ndarray) -> np.ndarray:
    """Reference semantics: full hidden materialization, then mask, then matmul."""
    h = _gelu_np(x @ params.w1.T)
    h = h * mask
    return h @ params.w2.T


def ffn_fused(x: np.ndarray, params: FFNWeights, mask: np.ndarray,
              force_numpy: bool = False) -> np.ndarray:
    """Single-traversal strategy over the retained indices only."""
    idx, mvals = kernels.mask_to_indices(mask)
    out = np.empty((x.shape[0], params.w2t.shape[1]), dtype=x.dtype)
    kernels.fused_masked_ffn(x, params.w1, params.w2t, mvals, idx, out,
                             force_numpy=force_numpy)
    return out


def ffn_masked_dense(x: np.ndarray, params: FFNWeights, mask: np.ndarray) -> np.ndarray:
    """Fixed-shape GEMMs with the mask folded into the pipeline in place."""
    h = np.empty((x.shape[0], params.w1.shape[0]), dtype=x.dtype)
    np.matmul(x, params.w1.T, out=h)
    # in-place tanh-form gelu, no temporaries beyond one scratch buffer
    u = np.empty_like(h)
    np.multiply(h, h, out=u)
    u *= h
    u *= 0.044715
    u += h
    u *= 0.7978845608028654
    np.tanh(u, out=u)
    u += 1.0
    h *= u
    h *= 0.5
    h *= mask
    out = np.empty((x.shape[0], params.w2t.shape[1]), dtype=x.dtype)
    np.matmul(h, params.w2t, out=out)
    return out


_RUNNERS = {
    "naive": ffn_naive,
    "fused": ffn_fused,
    "masked-dense": ffn_masked_dense,
    "fused-py": lambda x, p, m: ffn_fused(x, p, m, force_numpy=True),
}


@dataclass
class LatencyRecord:
    strategy: str
    active_rate: float
    median_ms: float | None
    p10_ms: float | None
    p90_ms: float | None
    tokens_per_s: float | None
    checksum: float | None
    checksum_ok: bool
    stable: bool


def generate_inputs(config: BenchConfig, rate: float, dtype=np.float64):
    """Seeded inputs for one active rate: activations, weights, mask."""
    rng = np.random.default_rng([_BASE_SEED, int(rate * 10_000)])
    tokens = config.tokens
    x = rng.standard_normal((tokens, config.d_in)).astype(dtype)
    w1 = (rng.standard_normal((config.d_ff, config.d_in)) / np.sqrt(config.d_in)).astype(dtype)
    w2 = (rng.standard_normal((config.d_out, config.d_ff)) / np.sqrt(config.d_ff)).astype(dtype)
    wz = (rng.standard_normal((config.d_ff, _MASK_DZ)) / np.sqrt(_MASK_DZ)).astype(dtype)
    z = rng.standard_normal((tokens, _MASK_DZ)).astype(dtype)
    m_hat = z @ wz.T
    count = int(np.ceil(rate * config.d_ff))
    keep = _top_count_bool(m_hat, count)
    mask = np.where(keep, m_hat, 0.0).astype(dtype)
    return x, FFNWeights(w1=w1, w2=w2), mask


def outputs_equivalent(out: np.ndarray, ref: np.ndarray) -> bool:
    rtol = _EQUIV_RTOL[ref.dtype]
    scale = np.abs(ref).max()
    if scale == 0.0:
        return bool(np.abs(out).max() == 0.0)
    return bool(np.abs(out - ref).max() <= rtol * scale)


def run_bench(config: BenchConfig, log=None, dtype=np.float64) -> list[LatencyRecord]:
    """Measure every (strategy, rate) cell; correctness gates precede all timing.

    Strategies run strictly sequentially on one thread. Timed iterations are
    interleaved round-robin across cells so that slow background drift on a
    shared machine biases every cell equally instead of whichever cell was
    measured last.
    """
    cells = []
    failures = []
    for rate in config.active_rates:
        x, params, mask = generate_inputs(config, rate, dtype=dtype)
        ref = ffn_naive(x, params, mask)
        for strategy in config.strategies:
            fn = _RUNNERS[strategy]
            out = fn(x, params, mask)
            if outputs_equivalent(out, ref):
                cells.append((strategy, rate, fn, x, params, mask, float(out.sum())))
            else:
                failures.append(LatencyRecord(
                    strategy=strategy, active_rate=rate, median_ms=None,
                    p10_ms=None, p90_ms=None, tokens_per_s=None,
                    checksum=float(out.sum()), checksum_ok=False, stable=False))
                if log:
                    log(f"{strategy} @ {rate}: EQUIVALENCE FAILED, no timing reported")

    times = {(s, r): [] for s, r, *_ in cells}
    for rep in range(config.warmup_iters + config.repeats):
        for strategy, rate, fn, x, params, mask, _ in cells:
            t0 = time.perf_counter()
            fn(x, params, mask)
            elapsed = time.perf_counter() - t0
            if rep >= config.warmup_iters:
                times[(strategy, rate)].append(elapsed * 1e3)

    records = []
    for strategy, rate, fn, x, params, mask, checksum in cells:
        samples = np.asarray(times[(strategy, rate)])
        median = float(np.median(samples))
        p10 = float(np.percentile(samples, 10))
        p90 = float(np.percentile(samples, 90))
        records.append(LatencyRecord(
            strategy=strategy, active_rate=rate, median_ms=median,
            p10_ms=p10, p90_ms=p90,
            tokens_per_s=config.tokens / (median / 1e3),
            checksum=checksum, checksum_ok=True,
            stable=bool(p90 <= 2.0 * p10)))
        if log:
            log(f"{strategy} @ {rate}: median {median:.2f} ms"
                f"{'' if records[-1].stable else ' (unstable)'}")
    records.extend(failures)
    return records


def write_bench_csv(path, records: list[LatencyRecord]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "active_rate", "median_ms", "p10_ms", "p90_ms",
                    "tokens_per_s", "checksum_ok", "stable"])
        for r in records:
            fmt = lambda v: "" if v is None else f"{v:.4f}"
            w.writerow([r.strategy, r.active_rate, fmt(r.median_ms), fmt(r.p10_ms),
                        fmt(r.p90_ms), fmt(r.tokens_per_s),
                        str(r.checksum_ok).lower(), str(r.stable).lower()])
