"""25 Hz encoder features -> 5 Hz audio tokens in decoder embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdlm.encoder import FrameFeatures, feature_count
from mdlm.frontend import duration_to_samples, frame_count
from mdlm.nn_core import Linear, Module, Tensor, concat, gelu

SECONDS_PER_TOKEN = 0.2


@dataclass
class AudioTokens:
    tokens: Tensor  # [K, decoder_dim] (or [B, K, decoder_dim])
    seconds_per_token: float = SECONDS_PER_TOKEN

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]


def downsample_stack(features, stack: int = 5) -> Tensor:
    """Concatenate each run of ``stack`` consecutive feature rows; zero-pad the tail group."""
    x = features.features if isinstance(features, FrameFeatures) else features
    *lead, n, dim = x.shape
    if n < 1:
        raise ValueError("no features to stack")
    rows = -(-n // stack)
    pad = rows * stack - n
    if pad:
        x = concat([x, Tensor(np.zeros((*lead, pad, dim), dtype=x.dtype))], axis=-2)
    return x.reshape(*lead, rows, stack * dim)


class Projector(Module):
    """Two-layer MLP (stack*enc_dim -> hidden -> dec_dim) with GELU in between."""

    def __init__(self, enc_dim: int, hidden_dim: int, dec_dim: int, stack: int,
                 rng: np.random.Generator) -> None:
        self.stack = stack
        self.fc1 = Linear(stack * enc_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, dec_dim, rng)

    def project(self, stacked: Tensor) -> AudioTokens:
        if stacked.shape[-1] != self.fc1.in_dim:
            raise ValueError(f"expected rows of width {self.fc1.in_dim}, got {stacked.shape[-1]}")
        return AudioTokens(self.fc2(gelu(self.fc1(stacked))))

    def __call__(self, features: FrameFeatures) -> AudioTokens:
        return self.project(downsample_stack(features, self.stack))


def tokens_for_frames(n_frames: int, max_window: int = 1008, time_patch: int = 4, stack: int = 5) -> int:
    return -(-feature_count(n_frames, max_window, time_patch) // stack)


def tokens_for_samples(n_samples: int, **kw) -> int:
    return tokens_for_frames(frame_count(n_samples), **kw)


def audio_token_count(duration_s: float, **kw) -> int:
    """Exact number of audio tokens the pipeline emits for ``duration_s`` seconds at 16 kHz."""
    return tokens_for_samples(duration_to_samples(duration_s), **kw)
