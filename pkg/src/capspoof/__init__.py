"""Capacity-aware watermark spoofing on a seeded toy language model."""

from capspoof.capacity import (CapacityReport, binary_kl, capacity_sup, coarsened_kl, factorized_gain,
                               kl_divergence, theorem1_check, vanishing_capacity_probe)
from capspoof.evalkit import EvalResult, PairDataset, build_pairs, run_training, ssr, sr
from capspoof.policy import GRPOConfig, TabularPolicy, ce_anchor, grpo_objective, train
from capspoof.reward import BigramCosine, combine_semantic, normalize_group, sigmoid_reward, token_reward
from capspoof.toylm import ContextKey, ToyLM, shannon_entropy
from capspoof.watermark import Detection, Detector, WatermarkScheme, make_scheme

__all__ = [
    "BigramCosine", "CapacityReport", "ContextKey", "Detection", "Detector", "EvalResult", "GRPOConfig",
    "PairDataset", "TabularPolicy", "ToyLM", "WatermarkScheme", "binary_kl", "build_pairs", "capacity_sup",
    "ce_anchor", "coarsened_kl", "combine_semantic", "factorized_gain", "grpo_objective", "kl_divergence",
    "make_scheme", "normalize_group", "run_training", "shannon_entropy", "sigmoid_reward", "sr", "ssr",
    "theorem1_check", "token_reward", "train", "vanishing_capacity_probe",
]
