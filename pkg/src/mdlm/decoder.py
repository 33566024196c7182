"""Causal prefix language model over [audio tokens] ++ [prompt] ++ [target].

Includes the byte-level tokenizer, cross-entropy over supervised positions,
greedy KV-cache generation and attachable LoRA adapters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mdlm.config import DecoderConfig
from mdlm.nn_core import (
    KVCache,
    LayerNorm,
    Linear,
    LoRAPair,
    Module,
    Parameter,
    Tensor,
    TransformerBlock,
    add,
    concat,
    cross_entropy,
    embedding,
    no_grad,
    normal_init,
)
from mdlm.projector import AudioTokens

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

LORA_RANK = 8
LORA_ALPHA = 32.0
LORA_DROPOUT = 0.1
LORA_TARGETS = {
    "qv": ("attn.q", "attn.v"),
    "all_linear": ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"),
}


def encode_text(text: str | bytes) -> list[int]:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return list(data)


def decode_text(ids) -> bytes:
    return bytes(int(i) for i in ids if 0 <= int(i) < 256)


@dataclass
class TokenSequence:
    ids: list[int]
    loss_mask: list[int]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.loss_mask):
            raise ValueError("ids and loss_mask differ in length")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class PrefixSequence:
    audio: AudioTokens | None
    text: TokenSequence
    embedded: Tensor  # [K + T, d]

    @property
    def audio_len(self) -> int:
        return 0 if self.audio is None else self.audio.count

    def target_positions(self) -> tuple[np.ndarray, np.ndarray]:
        """(positions whose logits predict a supervised token, those token ids)."""
        k = self.audio_len
        idx = np.flatnonzero(np.asarray(self.text.loss_mask, dtype=bool))
        idx = idx[k + idx >= 1]
        ids = np.asarray(self.text.ids, dtype=np.int64)[idx]
        return k + idx - 1, ids


@dataclass
class LoRAAdapter:
    """Low-rank pairs keyed by linear-map name (e.g. ``layers.0.attn.q``)."""

    target_set: str
    rank: int = LORA_RANK
    alpha: float = LORA_ALPHA
    dropout: float = LORA_DROPOUT
    pairs: dict[str, LoRAPair] = field(default_factory=dict)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def set_alpha(self, alpha: float) -> None:
        self.alpha = alpha
        for pair in self.pairs.values():
            pair.alpha = alpha

    @classmethod
    def create(cls, decoder: TextDecoder, target_set: str, rng: np.random.Generator,
               rank: int = LORA_RANK, alpha: float = LORA_ALPHA, dropout: float = LORA_DROPOUT) -> LoRAAdapter:
        if target_set not in LORA_TARGETS:
            raise ValueError(f"unknown LoRA target set {target_set!r}")
        suffixes = LORA_TARGETS[target_set]
        adapter = cls(target_set, rank, alpha, dropout)
        for name, lin in decoder.linear_maps().items():
            if name.split(".", 2)[-1] in suffixes:
                adapter.pairs[name] = LoRAPair(lin.in_dim, lin.out_dim, rank, alpha, dropout, rng)
        return adapter


class TextDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.tok_emb = Parameter(normal_init(rng, (cfg.vocab_size, cfg.d_model)))
        self.pos = Parameter(normal_init(rng, (cfg.max_positions, cfg.d_model)))
        self.layers = [TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ff_dim, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, bias=False)
        self._adapter: LoRAAdapter | None = None

    # -- structure ---------------------------------------------------------

    def linear_maps(self) -> dict[str, Linear]:
        """Every projection inside the decoder blocks (the output head is excluded)."""
        out = {}
        for i, block in enumerate(self.layers):
            for name, lin in block.linear_maps().items():
                out[f"layers.{i}.{name}"] = lin
        return out

    @property
    def adapter(self) -> LoRAAdapter | None:
        return self._adapter

    def apply_lora(self, adapter: LoRAAdapter) -> None:
        maps = self.linear_maps()
        for name, pair in adapter.pairs.items():
            if name not in maps:
                raise ValueError(f"no linear map named {name!r}")
            lin = maps[name]
            if pair.A.shape != (pair.rank, lin.in_dim) or pair.B.shape != (lin.out_dim, pair.rank):
                raise ValueError(f"adapter for {name} has shapes {pair.A.shape}/{pair.B.shape}")
        if self._adapter is not None:
            self.remove_lora()
        for name, pair in adapter.pairs.items():
            maps[name].lora = pair
        self._adapter = adapter

    def remove_lora(self) -> LoRAAdapter | None:
        for lin in self.linear_maps().values():
            lin.lora = None
        adapter, self._adapter = self._adapter, None
        return adapter

    def merge_lora(self) -> None:
        """Fold the attached adapter into the base weights and detach it."""
        maps = self.linear_maps()
        adapter = self.remove_lora()
        if adapter is None:
            return
        for name, pair in adapter.pairs.items():
            w = maps[name].weight
            w.data = (w.data + pair.merged_delta().astype(w.dtype)).astype(w.dtype)

    # -- sequences ---------------------------------------------------------

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id outside [0, {self.cfg.vocab_size})")
        return ids

    def _positions(self, start: int, length: int) -> Tensor:
        if start + length > self.cfg.max_positions:
            raise ValueError(f"sequence of {start + length} positions exceeds {self.cfg.max_positions}")
        return self.pos[start:start + length]

    def embed_tokens(self, ids, start: int = 0) -> Tensor:
        ids = self._check_ids(ids)
        return add(embedding(self.tok_emb, ids), self._positions(start, len(ids)))

    def build_prefix(self, audio: AudioTokens | None, prompt_ids, target_ids) -> PrefixSequence:
        prompt = self._check_ids(prompt_ids)
        target = self._check_ids(target_ids)
        ids = np.concatenate([prompt, target])
        text = TokenSequence([int(i) for i in ids], [0] * len(prompt) + [1] * len(target))
        parts = []
        if audio is not None and audio.count:
            parts.append(audio.tokens)
        if len(ids):
            parts.append(embedding(self.tok_emb, ids))
        if not parts:
            raise ValueError("empty sequence")
        x = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        return PrefixSequence(audio, text, add(x, self._positions(0, x.shape[0])))

    # -- forward -----------------------------------------------------------

    def hidden(self, x: Tensor, cache: KVCache | None = None) -> Tensor:
        for i, block in enumerate(self.layers):
            x = block(x, causal=True, cache=cache, layer=i)
        return self.ln_f(x)

    def forward(self, seq: PrefixSequence) -> Tensor:
        """Logits [(K+T), V] for every position of the prefix sequence."""
        return self.head(self.hidden(seq.embedded))

    __call__ = forward

    def loss(self, logits: Tensor, seq: PrefixSequence) -> Tensor:
        """Mean next-token cross-entropy over supervised (mask=1) text positions."""
        rows, ids = seq.target_positions()
        if len(rows) == 0:
            raise ValueError("loss needs at least one supervised target token")
        return cross_entropy(logits[rows], ids)

    # -- generation --------------------------------------------------------

    def _prefill_input(self, audio: AudioTokens | None, prompt_ids) -> Tensor:
        return self.build_prefix(audio, prompt_ids, []).embedded

    def generate(self, audio: AudioTokens | None, prompt_ids, max_new: int, eos: int | None = EOS,
                 return_logits: bool = False):
        """Greedy decoding with a KV cache; argmax ties resolve to the lowest id.

        Stops after ``max_new`` tokens or once ``eos`` is emitted (the EOS id is
        included in the result).
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        out: list[int] = []
        step_logits = []
        with no_grad():
            x = self._prefill_input(audio, prompt_ids)
            cache = KVCache(len(self.layers))
            h = self.hidden(x, cache)
            logits = self.head(h[-1:]).data[0]
            while True:
                step_logits.append(logits)
                token = int(np.argmax(logits))
                out.append(token)
                if len(out) >= max_new or (eos is not None and token == eos):
                    break
                pos = len(cache)
                h = self.hidden(self.embed_tokens([token], start=pos), cache)
                logits = self.head(h).data[-1]
        return (out, step_logits) if return_logits else out

    def generate_nocache(self, audio: AudioTokens | None, prompt_ids, max_new: int, eos: int | None = EOS,
                         return_logits: bool = False):
        """Reference decoder: recomputes the whole sequence for every new token."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        out: list[int] = []
        step_logits = []
        prompt = list(self._check_ids(prompt_ids))
        with no_grad():
            while True:
                seq = self.build_prefix(audio, prompt + out, [])
                logits = self.forward(seq).data[-1]
                step_logits.append(logits)
                token = int(np.argmax(logits))
                out.append(token)
                if len(out) >= max_new or (eos is not None and token == eos):
                    break
        return (out, step_logits) if return_logits else out

    def prefill_batch(self, audio_tokens: Tensor, prompt_ids) -> tuple[np.ndarray, KVCache]:
        """Batched prefill for equal-length requests; returns last-position logits [B, V]."""
        b, k, _ = audio_tokens.shape
        prompt = self._check_ids(prompt_ids)
        with no_grad():
            text = embedding(self.tok_emb, np.broadcast_to(prompt, (b, len(prompt))))
            x = concat([audio_tokens, text], axis=1) if len(prompt) else audio_tokens
            x = add(x, self._positions(0, x.shape[1]))
            cache = KVCache(len(self.layers))
            h = self.hidden(x, cache)
            return self.head(h[:, -1:, :]).data[:, 0, :], cache

    def decode_step_batch(self, tokens: np.ndarray, cache: KVCache) -> np.ndarray:
        with no_grad():
            ids = self._check_ids(tokens)
            x = add(embedding(self.tok_emb, ids[:, None]), self._positions(len(cache), 1))
            return self.head(self.hidden(x, cache)).data[:, -1, :]
