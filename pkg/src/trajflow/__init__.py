"""Few-step flow models trained with an alpha-annealed trajectory curriculum.

Everything runs on NumPy. A small autodiff engine with reverse and forward
mode drives a conditional MLP that predicts average velocities, and the
alpha-Flow objective family trains it for one- or two-step sampling.
"""
from .analysis import CosineReport, cosine_protocol, energy_distance, eval_loss_suite, grad_cosine_pair
from .estimator import TrajectoryFlowGenerator
from .network import EmaState, ModelConfig, ModelParams, init_params, load_checkpoint, predict_u
from .objectives import AlphaLossConfig, GuidanceConfig, LossTerms, loss_terms
from .paths import PathBatch, sample_dataset
from .sampling import SamplerConfig, default_intermediate, generate
from .schedule import ConstantSchedule, ScheduleConfig, alpha_at
from .training import TrainConfig, TrainingDiverged, run_training, train_step

__all__ = [
    "AlphaLossConfig", "ConstantSchedule", "CosineReport", "EmaState", "GuidanceConfig",
    "LossTerms", "ModelConfig", "ModelParams", "PathBatch", "SamplerConfig", "ScheduleConfig",
    "TrainConfig", "TrainingDiverged", "TrajectoryFlowGenerator", "alpha_at", "cosine_protocol",
    "default_intermediate", "energy_distance", "eval_loss_suite", "generate", "grad_cosine_pair",
    "init_params", "load_checkpoint", "loss_terms", "predict_u", "run_training",
    "sample_dataset", "train_step",
]
