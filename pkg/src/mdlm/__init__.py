"""Desk-scale audio-language model pipeline with a performance harness."""

from mdlm.config import ModelConfig, RunConfig
from mdlm.model import AudioLanguageModel

__version__ = "0.1.0"

__all__ = ["AudioLanguageModel", "ModelConfig", "RunConfig", "__version__"]
