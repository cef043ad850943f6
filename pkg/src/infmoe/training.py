"""Optimizer, schedule, training loop, perplexity evaluation, ablations.

Training runs in float32 by default (correctness tests elsewhere use
float64) with a single generator stream driving both batch sampling and
expert-index draws, so a fixed seed reproduces checkpoints byte for byte.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import routing as R
from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ContractError, NumericError
from .model import ForwardResult, ModelConfig, ModelParams, init_params, model_forward


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 1024          # tokens per step
    lr: float = 6e-4
    weight_decay: float = 0.1
    warmup_iters: int = 100
    betas: tuple = (0.9, 0.95)
    eps_adam: float = 1e-8
    grad_clip: float = 1.0
    eval_interval: int = 250
    entropy_log_interval: int = 100
    seed: int = 1337

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.warmup_iters > self.steps:
            raise ContractError("warmup_iters must not exceed steps")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup to lr, then cosine decay to a 10% floor at `steps`."""
    if step < 0:
        raise ContractError("step must be nonnegative")
    if step < config.warmup_iters:
        return config.lr * step / config.warmup_iters
    if step >= config.steps:
        return 0.1 * config.lr
    span = max(1, config.steps - config.warmup_iters)
    progress = (step - config.warmup_iters) / span
    floor = 0.1 * config.lr
    return floor + 0.5 * (config.lr - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments, keyed by parameter name."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.named_tensors()},
            v={n: np.zeros_like(t.data) for n, t in params.named_tensors()},
        )


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    norm = T.global_grad_norm(params.tensor_list())
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for t in params.tensor_list():
            if t.grad is not None:
                t.grad *= factor
    return norm


def adamw_step(state: OptimizerState, params: ModelParams, grads: dict,
               lr_t: float, config: TrainConfig) -> None:
    """Decoupled-weight-decay Adam update with bias correction.

    Decay applies to matrices only; biases and layer-norm gains are exempt.
    """
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.named_tensors():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay > 0 and p.data.ndim >= 2:
            p.data *= 1.0 - lr_t * config.weight_decay
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr_t * mhat / (np.sqrt(vhat) + config.eps_adam)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------


def load_corpus(path) -> np.ndarray:
    """Read a UTF-8 text file as a flat byte array."""
    data = Path(path).read_bytes()
    if not data:
        raise ContractError(f"corpus {path} is empty")
    return np.frombuffer(data, dtype=np.uint8)


def split_corpus(data: np.ndarray, train_fraction: float = 0.9):
    """Contiguous train/validation split."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError("train_fraction must lie in (0, 1)")
    cut = int(len(data) * train_fraction)
    return data[:cut], data[cut:]


def sample_batch(data: np.ndarray, block_size: int, n_seq: int,
                 rng: np.random.Generator):
    if len(data) < block_size + 2:
        raise ContractError("corpus shorter than one context window")
    starts = rng.integers(0, len(data) - block_size - 1, size=n_seq)
    x = np.stack([data[s:s + block_size] for s in starts]).astype(np.int64)
    y = np.stack([data[s + 1:s + block_size + 1] for s in starts]).astype(np.int64)
    return x, y


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsLog:
    n_layers: int
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    ms_per_step: list = field(default_factory=list)
    ppl: dict = field(default_factory=dict)          # step -> value
    entropy: dict = field(default_factory=dict)      # step -> [per-layer or None]

    def header(self) -> list:
        ent = [f"entropy_layer_{i}" for i in range(self.n_layers)]
        return ["step", "loss", "lr", "ppl", *ent, "ms_per_step"]

    def row(self, i: int) -> list:
        step = self.steps[i]
        ppl = self.ppl.get(step, "")
        ent = self.entropy.get(step)
        ent_cells = ["" if (ent is None or e is None) else f"{e:.6f}"
                     for e in (ent if ent is not None else [None] * self.n_layers)]
        return [step, f"{self.loss[i]:.6f}", f"{self.lr[i]:.8f}",
                f"{ppl:.6f}" if ppl != "" else "", *ent_cells,
                f"{self.ms_per_step[i]:.3f}"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for i in range(len(self.steps)):
                w.writerow(self.row(i))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

_MONITOR_EVAL_WINDOWS = 64


def _layer_entropies(result: ForwardResult) -> list:
    out = []
    for s in result.layer_stats:
        out.append(None if s is None or s.total == 0 else R.routing_entropy(s))
    return out


def train(model_config: ModelConfig, train_config: TrainConfig,
          corpus: np.ndarray, out_dir=None, dtype=np.float32,
          log=None) -> tuple[ModelParams, MetricsLog]:
    """Run the full loop: sample, forward, loss, backward, clip, update.

    `corpus` is a flat byte array; it is split 90/10 into train/validation
    internally. Writes `checkpoint.imoe` and `metrics.csv` into `out_dir`
    when given. Fully reproducible under (model seed, train seed).
    """
    train_data, val_data = split_corpus(np.asarray(corpus, dtype=np.uint8))
    params = init_params(model_config, dtype=dtype)
    opt = OptimizerState.init(params)
    # independent streams: batch order must not depend on how many draws the
    # model consumes per forward (which varies with K)
    rng_batch = np.random.default_rng([train_config.seed, 0])
    rng_model = np.random.default_rng([train_config.seed, 1])
    n_seq = max(1, train_config.batch_size // model_config.block_size)
    metrics = MetricsLog(n_layers=model_config.layers)

    with T.finite_checks(False):
        for step in range(train_config.steps):
            t0 = time.perf_counter()
            x, y = sample_batch(train_data, model_config.block_size, n_seq, rng_batch)
            params.zero_grads()
            result = model_forward(model_config, params, x, rng_model)
            flat = T.reshape(result.logits, (-1, model_config.vocab_size))
            lm_loss = T.cross_entropy(flat, y.reshape(-1))
            loss_val = lm_loss.item()
            if not math.isfinite(loss_val):
                window = metrics.loss[-10:]
                raise NumericError(
                    f"training diverged at step {step}: loss={loss_val}, "
                    f"recent losses={window}, "
                    f"recent entropy={[metrics.entropy.get(s) for s in metrics.steps[-3:]]}")
            total = lm_loss
            if result.aux_loss is not None and model_config.aux_loss_coeff > 0:
                total = T.add(total, T.scale(result.aux_loss, model_config.aux_loss_coeff))
            total.backward()
            clip_gradients(params, train_config.grad_clip)
            lr_t = lr_at(train_config, step)
            grads = {n: t.grad for n, t in params.named_tensors()}
            adamw_step(opt, params, grads, lr_t, train_config)

            metrics.steps.append(step)
            metrics.loss.append(loss_val)
            metrics.lr.append(lr_t)
            metrics.ms_per_step.append((time.perf_counter() - t0) * 1e3)
            if step % train_config.entropy_log_interval == 0:
                metrics.entropy[step] = _layer_entropies(result)
            if step % train_config.eval_interval == 0 or step == train_config.steps - 1:
                # monitoring eval runs on a capped slice; final quality numbers
                # come from an explicit eval_ppl call on the full split
                cap = _MONITOR_EVAL_WINDOWS * model_config.block_size + 1
                metrics.ppl[step] = eval_ppl(model_config, params, val_data[:cap])
                if log:
                    log(f"step {step}: loss {loss_val:.4f}, val ppl {metrics.ppl[step]:.3f}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.imoe", model_config, params)
        metrics.write_csv(out_dir / "metrics.csv")
    return params, metrics


def eval_ppl(config: ModelConfig, params: ModelParams, data: np.ndarray,
             K: int | None = None, seed: int = 0, window_batch: int = 16) -> float:
    """exp(mean token NLL) over non-overlapping full-context windows."""
    data = np.asarray(data, dtype=np.uint8)
    B = config.block_size
    n_windows = (len(data) - 1) // B
    if n_windows < 1:
        raise ContractError("held-out corpus shorter than one context window")
    rng = np.random.default_rng(seed)
    total_nll = 0.0
    total_tokens = 0
    with T.no_grad(), T.finite_checks(False):
        for w0 in range(0, n_windows, window_batch):
            w1 = min(w0 + window_batch, n_windows)
            xs = np.stack([data[i * B:i * B + B] for i in range(w0, w1)]).astype(np.int64)
            ys = np.stack([data[i * B + 1:i * B + B + 1] for i in range(w0, w1)]).astype(np.int64)
            result = model_forward(config, params, xs, rng, k_override=K)
            flat = T.reshape(result.logits, (-1, config.vocab_size))
            nll = T.cross_entropy(flat, ys.reshape(-1)).item()
            total_nll += nll * ys.size
            total_tokens += ys.size
    return float(math.exp(total_nll / total_tokens))


# ---------------------------------------------------------------------------
# ablation driver
# ---------------------------------------------------------------------------

ABLATION_AXES = ("dz", "K", "experts")


def run_ablation(axis: str, values: list, model_config: ModelConfig,
                 train_config: TrainConfig, corpus: np.ndarray,
                 train_k: int | None = None, log=None) -> list[dict]:
    """Train/evaluate one configuration per value, identical seeds and steps.

    axis "dz" varies the continuous index dimension, "experts" the discrete
    expert count, and "K" the sample count. For "K" with `train_k` set, a
    single model is trained at K=train_k and the values are applied at
    evaluation time only (the inference-time sample-count adjustment).
    """
    if axis not in ABLATION_AXES:
        raise ContractError(f"axis {axis!r} not one of {ABLATION_AXES}")
    if not values:
        raise ContractError("ablation needs at least one value")

    _, val_data = split_corpus(np.asarray(corpus, dtype=np.uint8))
    rows = []

    def final_entropy(metrics: MetricsLog):
        for step in sorted(metrics.entropy, reverse=True):
            ents = [e for e in metrics.entropy[step] if e is not None]
            if ents:
                return sum(ents) / len(ents)
        return None

    if axis == "K" and train_k is not None:
        cfg = ModelConfig.from_dict({**model_config.to_dict(), "K_samples": int(train_k)})
        t0 = time.perf_counter()
        params, metrics = train(cfg, train_config, corpus, log=log)
        base_wall = time.perf_counter() - t0
        ent = final_entropy(metrics)
        for v in values:
            t1 = time.perf_counter()
            ppl = eval_ppl(cfg, params, val_data, K=int(v))
            rows.append({"value": int(v), "ppl": ppl, "final_entropy": ent,
                         "wallclock_s": base_wall + (time.perf_counter() - t1)})
        return rows

    for v in values:
        overrides = {"dz": "d_z", "K": "K_samples", "experts": "n_experts"}[axis]
        cfg = ModelConfig.from_dict({**model_config.to_dict(), overrides: int(v)})
        t0 = time.perf_counter()
        params, metrics = train(cfg, train_config, corpus, log=log)
        ppl = eval_ppl(cfg, params, val_data)
        rows.append({"value": int(v), "ppl": ppl,
                     "final_entropy": final_entropy(metrics),
                     "wallclock_s": time.perf_counter() - t0})
    return rows


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "ppl", "final_entropy", "wallclock_s"])
        for r in rows:
            ent = r["final_entropy"]
            w.writerow([r["value"], f"{r['ppl']:.6f}",
                        "" if ent is None else f"{ent:.6f}",
                        f"{r['wallclock_s']:.3f}"])
