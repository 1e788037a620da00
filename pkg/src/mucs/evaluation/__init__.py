"""Leave-k-out counterfactual evaluation."""

from .harness import Benchmark, EvalConfig, run_leave_k_out
from .report import EvalReport
from .similarity import METRICS, SimilaritySuite, builtin_similarity, ssim
from .stats import AucResult, compute_auc, mean_normalized_similarity_difference

__all__ = ["Benchmark", "EvalConfig", "run_leave_k_out", "EvalReport", "METRICS", "SimilaritySuite",
           "builtin_similarity", "ssim", "AucResult", "compute_auc", "mean_normalized_similarity_difference"]
