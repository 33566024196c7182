"""Frame-level transformer audio encoder with 4x time patching and 1008-frame windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdlm.config import EncoderConfig
from mdlm.frontend import MelSpectrogram
from mdlm.nn_core import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    TransformerBlock,
    add,
    concat,
    normal_init,
)


@dataclass
class FrameFeatures:
    """Encoder output at 25 Hz (one row per 40 ms)."""

    features: Tensor  # [F, d_model] (or [B, F, d_model] in batched paths)
    source_frames: int

    @property
    def num_features(self) -> int:
        return self.features.shape[-2]


def window_lengths(n_frames: int, max_window: int = 1008) -> list[int]:
    """Consecutive non-overlapping window sizes; only the last may be short."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    full, rest = divmod(n_frames, max_window)
    return [max_window] * full + ([rest] if rest else [])


def feature_count(n_frames: int, max_window: int = 1008, time_patch: int = 4) -> int:
    return sum(-(-w // time_patch) for w in window_lengths(n_frames, max_window))


class AudioEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.patch = Linear(cfg.time_patch * cfg.n_mels, cfg.d_model, rng)
        self.pos = Parameter(normal_init(rng, (cfg.max_positions, cfg.d_model)))
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ff_dim, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        """[..., T, mels] -> [..., ceil(T/4), 4*mels], zero-padding the tail."""
        cfg = self.cfg
        *lead, t, mels = frames.shape
        if t < 1:
            raise ValueError("empty mel window")
        if t > cfg.max_window_frames:
            raise ValueError(f"window of {t} frames exceeds {cfg.max_window_frames}; split it first")
        n_pos = -(-t // cfg.time_patch)
        pad = n_pos * cfg.time_patch - t
        if pad:
            widths = [(0, 0)] * len(lead) + [(0, pad), (0, 0)]
            frames = np.pad(frames, widths)
        return frames.reshape(*lead, n_pos, cfg.time_patch * mels)

    def patch_embed(self, frames) -> Tensor:
        frames = frames.frames if isinstance(frames, MelSpectrogram) else np.asarray(frames)
        patches = self._patchify(frames)
        n_pos = patches.shape[-2]
        return add(self.patch(Tensor(patches)), self.pos[:n_pos])

    def encode_window(self, frames) -> FrameFeatures:
        """Encode one window of at most 1008 frames; supports a leading batch axis."""
        frames = frames.frames if isinstance(frames, MelSpectrogram) else np.asarray(frames)
        x = self.patch_embed(frames)
        for block in self.blocks:
            x = block(x, causal=False)
        return FrameFeatures(self.ln_f(x), frames.shape[-2])

    def encode(self, mel) -> FrameFeatures:
        """Encode every window independently and concatenate along time."""
        frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        total = frames.shape[-2]
        outputs = []
        start = 0
        for length in window_lengths(total, self.cfg.max_window_frames):
            outputs.append(self.encode_window(frames[..., start:start + length, :]).features)
            start += length
        feats = outputs[0] if len(outputs) == 1 else concat(outputs, axis=-2)
        return FrameFeatures(feats, total)
