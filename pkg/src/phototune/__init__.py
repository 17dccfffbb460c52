"""Photo-finishing parameter tuning: a 9-slider pipeline, black-box tuners and a TD3 policy."""
from .pipeline import N_PARAMS, PARAM_NAMES, apply_pipeline
from .stats import psnr, ssim
from .tuners import TuneResult, tune_cmaes, tune_greedy, tune_random, tune_rl

__version__ = "0.1.0"

__all__ = [
    "N_PARAMS",
    "PARAM_NAMES",
    "apply_pipeline",
    "psnr",
    "ssim",
    "TuneResult",
    "tune_cmaes",
    "tune_greedy",
    "tune_random",
    "tune_rl",
]
