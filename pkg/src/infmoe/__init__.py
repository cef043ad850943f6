"""Continuous-expert-space mixture of experts in a small byte-level LM."""

__version__ = "0.1.0"

from .bench import BenchConfig, run_bench
from .checkpoint import load_checkpoint, save_checkpoint
from .experts import (ExpertBank, Mask, MaskedFFNParams, compute_mask,
                      dense_ffn_forward, discrete_moe_forward, expert_forward,
                      inf_moe_forward)
from .model import ModelConfig, ModelParams, count_params, init_params, model_forward
from .routing import (DiscreteRouterParams, ExpertIndexSample,
                      GaussianRouterParams, RouterOutput, RoutingStats,
                      discrete_route, gaussian_route, routing_entropy, sample_z)
from .tensor import Tensor, grad_check, no_grad
from .training import TrainConfig, eval_ppl, load_corpus, run_ablation, train

__all__ = [
    "BenchConfig", "run_bench",
    "load_checkpoint", "save_checkpoint",
    "ExpertBank", "Mask", "MaskedFFNParams", "compute_mask",
    "dense_ffn_forward", "discrete_moe_forward", "expert_forward",
    "inf_moe_forward",
    "ModelConfig", "ModelParams", "count_params", "init_params", "model_forward",
    "DiscreteRouterParams", "ExpertIndexSample", "GaussianRouterParams",
    "RouterOutput", "RoutingStats", "discrete_route", "gaussian_route",
    "routing_entropy", "sample_z",
    "Tensor", "grad_check", "no_grad",
    "TrainConfig", "eval_ppl", "load_corpus", "run_ablation", "train",
    "__version__",
]
