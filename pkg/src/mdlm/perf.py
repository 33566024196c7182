"""Analytic MAC model plus TTFT / throughput measurement.

MAC convention: matmul multiply-adds only. Softmax, norms, activations, bias
adds and embedding lookups are free; the output head is counted. The
decoder evaluates the head only where a token is actually read out (the last
prefill position and each decode step).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from mdlm.config import ModelConfig
from mdlm.decoder import BOS
from mdlm.encoder import window_lengths
from mdlm.frontend import SAMPLE_RATE, Waveform, duration_to_samples, frame_count, log_mel, pad_waveform, resample
from mdlm.model import AudioLanguageModel
from mdlm.nn_core import count_macs, no_grad

POLICIES = ("variable", "fixed30")
FIXED_PAD_S = 30.0


class OutOfMemory(RuntimeError):
    """The estimated working set exceeds the configured memory cap."""


@dataclass
class CostReport:
    encoder_macs: int = 0
    projector_macs: int = 0
    prefill_macs: int = 0
    decode_macs: int = 0
    ttft_s: float | None = None
    throughput: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return self.encoder_macs + self.projector_macs + self.prefill_macs + self.decode_macs

    def phases(self) -> dict[str, int]:
        return {
            "encoder": self.encoder_macs,
            "projector": self.projector_macs,
            "prefill": self.prefill_macs,
            "decode": self.decode_macs,
            "total": self.total_macs,
        }


def gmacs_transformer(L: int, d: int, ff: int, layers: int) -> int:
    """MACs of ``layers`` transformer blocks over ``L`` positions.

    Per layer: Q,K,V,O projections (4 L d^2), score and context products
    (2 L^2 d) and the two feed-forward maps (2 L d ff).
    """
    for value in (L, d, ff, layers):
        if value < 1:
            raise ValueError("all arguments must be positive")
    return layers * (4 * L * d * d + 2 * L * L * d + 2 * L * d * ff)


def attention_term_macs(L: int, d: int, layers: int = 1) -> int:
    return layers * 2 * L * L * d


def decode_step_macs(cache_len: int, d: int, ff: int, layers: int, vocab: int) -> int:
    """One cached decode step: a single query against ``cache_len + 1`` keys, then the head."""
    keys = cache_len + 1
    return layers * (4 * d * d + 2 * keys * d + 2 * d * ff) + d * vocab


def encoder_window_macs(frames: int, cfg: ModelConfig) -> int:
    enc = cfg.encoder
    positions = -(-frames // enc.time_patch)
    patch = positions * enc.time_patch * enc.n_mels * enc.d_model
    return patch + gmacs_transformer(positions, enc.d_model, enc.ff_dim, enc.n_layers)


def pipeline_lengths(n_samples: int, cfg: ModelConfig) -> dict[str, object]:
    enc = cfg.encoder
    frames = frame_count(n_samples)
    windows = window_lengths(frames, enc.max_window_frames)
    features = sum(-(-w // enc.time_patch) for w in windows)
    tokens = -(-features // cfg.projector.stack_factor)
    return {"frames": frames, "windows": windows, "features": features, "audio_tokens": tokens}


def gmacs_pipeline(duration_s: float, cfg: ModelConfig, policy: str = "variable", prompt_len: int = 1,
                   new_tokens: int = 1) -> CostReport:
    """Per-phase MACs for one request of ``duration_s`` seconds.

    ``fixed30`` pads the waveform to 30 s before the frontend, so every later
    phase sees a 30 s input. ``new_tokens`` counts the first token (read from
    the prefill) plus ``new_tokens - 1`` cached decode steps.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    if policy == "fixed30" and duration_s > FIXED_PAD_S:
        raise ValueError("fixed30 policy needs duration <= 30 s")
    seconds = FIXED_PAD_S if policy == "fixed30" else duration_s
    lengths = pipeline_lengths(duration_to_samples(seconds), cfg)
    enc_macs = sum(encoder_window_macs(w, cfg) for w in lengths["windows"])
    rows = lengths["audio_tokens"]
    hidden = cfg.projector_hidden
    proj_macs = rows * cfg.projector.stack_factor * cfg.encoder.d_model * hidden + rows * hidden * cfg.decoder.d_model
    dec = cfg.decoder
    prefix = rows + prompt_len
    prefill = gmacs_transformer(prefix, dec.d_model, dec.ff_dim, dec.n_layers) + dec.d_model * dec.vocab_size
    decode = sum(decode_step_macs(prefix + j, dec.d_model, dec.ff_dim, dec.n_layers, dec.vocab_size)
                 for j in range(new_tokens - 1))
    return CostReport(enc_macs, proj_macs, prefill, decode,
                      config={"duration_s": duration_s, "policy": policy, "prompt_len": prompt_len,
                              "new_tokens": new_tokens, **lengths})


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------


def synthetic_waveform(duration_s: float, seed: int = 0) -> Waveform:
    rng = np.random.default_rng(seed)
    n = duration_to_samples(duration_s)
    return Waveform((0.1 * rng.standard_normal(n)).astype(np.float32), SAMPLE_RATE)


class Session:
    """Inference wrapper around a loaded model; parameters are never mutated."""

    def __init__(self, model: AudioLanguageModel, prompt_ids=(BOS,)) -> None:
        self.model = model.eval()
        self.prompt_ids = list(prompt_ids)

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg

    def _prepare(self, wave: Waveform, policy: str) -> Waveform:
        wave = resample(wave)
        if policy == "fixed30":
            wave = pad_waveform(wave, FIXED_PAD_S)
        elif policy != "variable":
            raise ValueError(f"policy must be one of {POLICIES}")
        return wave

    def first_token(self, wave: Waveform, policy: str = "variable") -> int:
        """Frontend, encoder, projector and prefill; returns the first greedy token."""
        with no_grad():
            mel = log_mel(self._prepare(wave, policy))
            audio = self.model.audio_tokens(mel)
            return self.model.decoder.generate(audio, self.prompt_ids, 1)[0]

    def instrumented_macs(self, wave: Waveform, policy: str = "variable", new_tokens: int = 1) -> CostReport:
        """Run the pipeline with a MAC counter per phase."""
        model = self.model
        dec = model.decoder
        with no_grad():
            mel = log_mel(self._prepare(wave, policy))
            with count_macs() as enc:
                feats = model.encoder.encode(mel)
            with count_macs() as proj:
                audio = model.projector(feats)
            with count_macs() as pre:
                tokens, _ = dec.generate(audio, self.prompt_ids, 1, eos=None, return_logits=True)
            with count_macs() as all_steps:
                if new_tokens > 1:
                    dec.generate(audio, self.prompt_ids, new_tokens, eos=None)
        decode = all_steps.macs - pre.macs if new_tokens > 1 else 0
        return CostReport(enc.macs, proj.macs, pre.macs, decode,
                          config={"duration_s": wave.duration, "policy": policy, "new_tokens": new_tokens})

    def run_batch(self, waves: list[Waveform], out_tokens: int) -> np.ndarray:
        """Batched prefill then lockstep greedy decoding of exactly ``out_tokens`` tokens."""
        model = self.model
        with no_grad():
            mels = np.stack([log_mel(resample(w)).frames for w in waves])
            audio = model.projector(model.encoder.encode(mels))
            logits, cache = model.decoder.prefill_batch(audio.tokens, self.prompt_ids)
            out = np.empty((len(waves), out_tokens), dtype=np.int64)
            out[:, 0] = np.argmax(logits, axis=-1)
            for step in range(1, out_tokens):
                logits = model.decoder.decode_step_batch(out[:, step - 1], cache)
                out[:, step] = np.argmax(logits, axis=-1)
        return out


def _timed(fn, reps: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return samples


def measure_ttft(session: Session, wave: Waveform, policy: str = "variable", reps: int = 5,
                 warmup: int = 2) -> float:
    """Median wall time (seconds) from request to first token over ``reps`` runs."""
    if reps < 5:
        raise ValueError("TTFT needs at least 5 timed repetitions")
    return statistics.median(_timed(lambda: session.first_token(wave, policy), reps, warmup))


def measure_ttft_policies(session: Session, wave: Waveform, policies=POLICIES, reps: int = 5,
                          warmup: int = 2) -> dict[str, float]:
    """Median TTFT per policy with the policies' runs interleaved, so slow drift hits all equally."""
    if reps < 5:
        raise ValueError("TTFT needs at least 5 timed repetitions")
    runs = {p: (lambda p=p: session.first_token(wave, p)) for p in policies}
    for fn in runs.values():
        _timed(fn, 0, warmup)
    samples: dict[str, list[float]] = {p: [] for p in policies}
    for _ in range(reps):
        for p, fn in runs.items():
            samples[p].extend(_timed(fn, 1, 0))
    return {p: statistics.median(v) for p, v in samples.items()}


def estimate_peak_bytes(cfg: ModelConfig, batch: int, duration_s: float, out_tokens: int,
                        prompt_len: int = 1, itemsize: int = 4) -> int:
    """Rough working-set size of a batched request: parameters plus the largest phase."""
    enc, dec = cfg.encoder, cfg.decoder
    lengths = pipeline_lengths(duration_to_samples(duration_s), cfg)
    positions = max(-(-w // enc.time_patch) for w in lengths["windows"])
    encoder_phase = batch * (2 * enc.n_heads * positions * positions + 6 * positions * max(enc.d_model, enc.ff_dim))
    prefix = lengths["audio_tokens"] + prompt_len
    total_len = prefix + out_tokens
    kv = batch * dec.n_layers * 2 * total_len * dec.d_model
    decoder_phase = kv + batch * (2 * dec.n_heads * prefix * prefix + 6 * prefix * max(dec.d_model, dec.ff_dim))
    params = sum(cfg_params(cfg).values())
    return itemsize * (params + max(encoder_phase, decoder_phase))


def cfg_params(cfg: ModelConfig) -> dict[str, int]:
    enc, dec = cfg.encoder, cfg.decoder

    def block(d, ff):
        return 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d

    hidden = cfg.projector_hidden
    return {
        "encoder": (enc.time_patch * enc.n_mels * enc.d_model + enc.d_model) + enc.max_positions * enc.d_model
        + enc.n_layers * block(enc.d_model, enc.ff_dim) + 2 * enc.d_model,
        "projector": cfg.projector.stack_factor * enc.d_model * hidden + hidden + hidden * dec.d_model + dec.d_model,
        "decoder": (dec.vocab_size + dec.max_positions) * dec.d_model + dec.n_layers * block(dec.d_model, dec.ff_dim)
        + 2 * dec.d_model + dec.d_model * dec.vocab_size,
    }


@dataclass
class ThroughputResult:
    batch: int
    samples_per_s: float | None
    status: str = "ok"
    rounds: int = 0
    seconds: float = 0.0

    def row(self) -> dict:
        return dataclasses.asdict(self)


def worker_cap() -> int:
    try:
        return max(1, int(os.environ.get("MDLM_THREADS", "1")))
    except ValueError:
        return 1


def measure_throughput(session: Session, batch_size: int, duration_s: float = 30.0, out_tokens: int = 100,
                       rounds: int = 3, mem_cap_bytes: int | None = None, workers: int = 1,
                       seed: int = 0) -> ThroughputResult:
    """Completed samples per wall-second over ``rounds`` timed rounds.

    Each round submits ``batch_size`` requests of ``duration_s`` seconds. With
    ``workers > 1`` (capped by ``MDLM_THREADS``) the batch is split into that
    many concurrent sub-batches on the shared session.
    """
    if batch_size < 1 or rounds < 1:
        raise ValueError("batch_size and rounds must be >= 1")
    workers = max(1, min(workers, worker_cap(), batch_size))
    per_worker = -(-batch_size // workers)
    need = estimate_peak_bytes(session.cfg, per_worker, duration_s, out_tokens, len(session.prompt_ids)) * workers
    if mem_cap_bytes is not None and need > mem_cap_bytes:
        return ThroughputResult(batch_size, None, "OOM")
    waves = [synthetic_waveform(duration_s, seed + i) for i in range(batch_size)]
    chunks = [waves[i:i + per_worker] for i in range(0, batch_size, per_worker)]

    def one_round():
        if len(chunks) == 1:
            session.run_batch(chunks[0], out_tokens)
            return
        with concurrent.futures.ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(lambda c: session.run_batch(c, out_tokens), chunks))

    one_round()  # warmup
    elapsed = sum(_timed(one_round, rounds, 0))
    return ThroughputResult(batch_size, batch_size * rounds / elapsed, "ok", rounds, elapsed)
