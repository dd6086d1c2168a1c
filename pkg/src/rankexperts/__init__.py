"""Input-dependent rank selection for SVD-compressed language models.

Each factorized weight ``W ~ A B^T`` is treated as a set of rank-1 experts; a
linear router picks ``K`` of them per prompt, a pattern cache reuses picks
across similar prompts, and an execution engine serves the chosen experts
from contiguous memory with fused launches.
"""
from .experts import RankSelection, StaticSelector
from .factorizer import CompressionConfig, FactorizedModel, compress_model
from .lm import ToyLM, ToyLMConfig
from .router import RouterParams, RouterTrainConfig, train_router

__all__ = ["CompressionConfig", "FactorizedModel", "RankSelection", "RouterParams", "RouterTrainConfig",
           "StaticSelector", "ToyLM", "ToyLMConfig", "compress_model", "train_router"]
__version__ = "0.1.0"
