"""The full audio-language model: encoder -> projector -> prefix decoder."""

from __future__ import annotations

import numpy as np

from mdlm.config import ModelConfig
from mdlm.decoder import PrefixSequence, TextDecoder
from mdlm.encoder import AudioEncoder
from mdlm.frontend import MelSpectrogram, Waveform, log_mel, resample
from mdlm.nn_core import Module, Tensor, no_grad
from mdlm.projector import AudioTokens, Projector


class AudioLanguageModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0) -> None:
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg.encoder, rng)
        self.projector = Projector(cfg.encoder.d_model, cfg.projector_hidden, cfg.decoder.d_model,
                                   cfg.projector.stack_factor, rng)
        self.decoder = TextDecoder(cfg.decoder, rng)

    def audio_tokens(self, mel: MelSpectrogram | np.ndarray) -> AudioTokens:
        return self.projector(self.encoder.encode(mel))

    def sequence(self, mel, prompt_ids, target_ids) -> PrefixSequence:
        audio = None if mel is None else self.audio_tokens(mel)
        return self.decoder.build_prefix(audio, prompt_ids, target_ids)

    def sample_loss(self, mel, prompt_ids, target_ids) -> Tensor:
        seq = self.sequence(mel, prompt_ids, target_ids)
        return self.decoder.loss(self.decoder(seq), seq)

    def caption(self, wave: Waveform, prompt_ids, max_new: int) -> tuple[list[int], int]:
        """Greedy output ids and the number of audio tokens used as prefix."""
        with no_grad():
            audio = self.audio_tokens(log_mel(resample(wave)))
        return self.decoder.generate(audio, prompt_ids, max_new), audio.count

    def base_parameters(self):
        return [p for name, p in self.named_parameters() if ".lora." not in name]

    def adapter_parameters(self):
        return [p for name, p in self.named_parameters() if ".lora." in name]
