"""Data-free low-bit quantization with a content/style-decoupled generator."""
from .analysis import cka_heatmap, lambda_sweep, linear_cka
from .causal import CausalObjectiveConfig, Critic, causal_dfq_loss, causal_kl, intervened_conditional
from .config import RunConfig, parse_config
from .generator import Generator
from .models import ArchitectureSpec, build, load_teacher, pretrain
from .quantization import QuantSpec, compute_scale, fake_quantize, wrap_model
from .training import run, setup, train_step

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "CausalObjectiveConfig", "Critic", "Generator", "QuantSpec", "RunConfig",
    "build", "causal_dfq_loss", "causal_kl", "cka_heatmap", "compute_scale", "fake_quantize",
    "intervened_conditional", "lambda_sweep", "linear_cka", "load_teacher", "parse_config",
    "pretrain", "run", "setup", "train_step", "wrap_model",
]
