import os
from dataclasses import dataclass, field
from typing import Tuple

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

VERSION = "0.1.0"


def _env_threads() -> int:
    try:
        return max(1, int(os.getenv("HANSLENS_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Config:
    """Configuration settings for hanslens runs"""
    # Runtime settings
    THREADS: int = field(default_factory=_env_threads)  # Caps per-sample parallelism
    LOG_LEVEL: str = field(default_factory=lambda: os.getenv("HANSLENS_LOG_LEVEL", "INFO"))
    VERSION: str = VERSION

    # Explanation settings
    LRP_GAMMA: float = 0.25      # Gamma rule for Linear/ReLU feature layers
    LRP_EPSILON: float = 1e-9    # Denominator stabilizer

    # KDE stiffness grid: gamma = 2**i / mean pairwise squared distance
    KDE_GRID_EXPONENTS: Tuple[int, ...] = tuple(range(-8, 9))

    # Autoencoder settings
    AE_HIDDEN: int = 128
    AE_BOTTLENECK: int = 16
    EPOCHS: int = 30
    BATCH_SIZE: int = 32
    ADAM_STEP: float = 1e-3
    ADAM_BETA1: float = 0.9
    ADAM_BETA2: float = 0.999
    ADAM_EPSILON: float = 1e-8

    # Deep one-class settings
    BACKBONE_WIDTHS: Tuple[int, ...] = (128, 64)
    LAMBDA_GRID_EXPONENTS: Tuple[int, ...] = tuple(range(-4, 2))  # Plus lambda = 0
    JACOBI_TOLERANCE: float = 1e-12
    JACOBI_MAX_SWEEPS: int = 100

    # Reports
    TOP_K: int = 3  # Classes listed per detector in Clever Hans rankings

    # Synthetic data defaults
    IMAGE_SIZE: Tuple[int, int] = (16, 16)

config = Config()
