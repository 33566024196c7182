"""Three-stage training (align -> pretrain -> sft) and the synthetic ASR-vs-caption experiment."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mdlm.config import ModelConfig
from mdlm.decoder import BOS, EOS, LoRAAdapter, encode_text
from mdlm.frontend import SAMPLE_RATE, MelSpectrogram, Waveform, log_mel
from mdlm.model import AudioLanguageModel
from mdlm.nn_core import NonFiniteError, Parameter, Tensor, add, mul

log = logging.getLogger(__name__)

STAGES = ("align", "pretrain", "sft")
TASKS = ("asr_like", "caption_like", "mixed")
FULL_WARMUP = 1000
FLOOR_FRACTION = 0.1


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass
class StageConfig:
    stage: str
    peak_lr: float
    weight_decay: float
    batch_size: int
    total_steps: int
    warmup_steps: int | None = None
    lora_target: str = "none"
    trainable: str = "encoder+decoder"
    task: str = "caption_like"
    num_samples: int = 200

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.lora_target not in ("none", "qv", "all_linear"):
            raise ValueError("lora_target must be none, qv or all_linear")
        if self.trainable not in ("encoder+decoder", "lora_only"):
            raise ValueError("trainable must be encoder+decoder or lora_only")
        if self.trainable == "lora_only" and self.lora_target == "none":
            raise ValueError("lora_only training needs a LoRA target")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.total_steps < 2:
            raise ValueError("total_steps must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        if self.total_steps >= 10 * FULL_WARMUP:
            return FULL_WARMUP
        return min(max(10, self.total_steps // 10), self.total_steps - 1)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> StageConfig:
        defaults = {
            "align": dict(peak_lr=1e-3, weight_decay=0.01, batch_size=8, total_steps=600,
                          lora_target="none", trainable="encoder+decoder", task="caption_like"),
            "pretrain": dict(peak_lr=1e-4, weight_decay=0.01, batch_size=10, total_steps=200,
                             lora_target="qv", trainable="lora_only", task="mixed"),
            "sft": dict(peak_lr=1e-5, weight_decay=0.1, batch_size=8, total_steps=200,
                        lora_target="all_linear", trainable="lora_only", task="caption_like"),
        }
        if stage not in defaults:
            raise ValueError(f"stage must be one of {STAGES}")
        values = {**defaults[stage], **{k: v for k, v in overrides.items() if v is not None}}
        return cls(stage=stage, **values)


def lr_schedule(step: int, cfg: StageConfig) -> float:
    """Linear warmup from 0, then cosine decay to 10% of peak at ``total_steps``."""
    total, warmup, peak = cfg.total_steps, cfg.warmup, cfg.peak_lr
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    floor = FLOOR_FRACTION * peak
    progress = (step - warmup) / (total - warmup)
    return peak - 0.5 * (peak - floor) * (1.0 - math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay on matrices."""

    def __init__(self, params: list[Parameter], weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.ndim >= 2 and self.weight_decay:
                update = update + lr * self.weight_decay * p.data
            p.data = (p.data - update).astype(p.dtype)


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

N_BINS = 16
TONE_HZ = np.geomspace(200.0, 6000.0, N_BINS)
PROMPTS = {"asr_like": "asr", "caption_like": "cap"}


@dataclass(frozen=True)
class SynthTask:
    kind: str
    seed: int = 0
    count: int = 200

    def __post_init__(self) -> None:
        if self.kind not in TASKS:
            raise ValueError(f"kind must be one of {TASKS}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass
class Example:
    wave: Waveform
    mel: MelSpectrogram
    kind: str
    bins: list[int]
    boundaries: list[int]  # sample index where each segment starts
    prompt_ids: list[int]
    target_ids: list[int]
    text: str = ""


def asr_target(bins) -> str:
    return " ".join(str(b) for b in bins)


def caption_target(bins) -> str:
    return " ".join(f"{b}:{c}" for b, c in sorted(Counter(bins).items()))


def tone_clip(bins, durations_s) -> tuple[np.ndarray, list[int]]:
    parts, starts, pos = [], [], 0
    for b, dur in zip(bins, durations_s):
        n = int(round(dur * SAMPLE_RATE))
        t = np.arange(n) / SAMPLE_RATE
        seg = 0.5 * np.sin(2 * np.pi * TONE_HZ[b] * t)
        ramp = min(80, n // 2)
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[n - ramp:] = np.linspace(1.0, 0.0, ramp)
        parts.append(seg * env)
        starts.append(pos)
        pos += n
    return np.concatenate(parts).astype(np.float32), starts


def make_example(kind: str, bins, durations_s) -> Example:
    samples, starts = tone_clip(bins, durations_s)
    wave = Waveform(samples, SAMPLE_RATE)
    text = asr_target(bins) if kind == "asr_like" else caption_target(bins)
    return Example(wave, log_mel(wave), kind, list(bins), starts,
                   [BOS] + encode_text(PROMPTS[kind]), encode_text(text) + [EOS], text)


def synth_dataset(task: SynthTask) -> list[Example]:
    """Pure-tone clips of 3-8 segments (0.2-0.5 s each, 16 frequency bins).

    Example ``i`` depends only on ``(seed, i)``, so an ``asr_like`` and a
    ``caption_like`` dataset with the same seed share identical audio. The
    ``mixed`` task alternates the two target kinds.
    """
    out = []
    for i in range(task.count):
        rng = np.random.default_rng([task.seed, i])
        n_seg = int(rng.integers(3, 9))
        bins = [int(b) for b in rng.integers(0, N_BINS, n_seg)]
        durations = rng.uniform(0.2, 0.5, n_seg)
        kind = task.kind if task.kind != "mixed" else ("asr_like", "caption_like")[i % 2]
        out.append(make_example(kind, bins, durations))
    return out


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def configure_stage(model: AudioLanguageModel, cfg: StageConfig, rng: np.random.Generator) -> list[Parameter]:
    """Attach this stage's adapters, freeze what must not move, return trainable params."""
    decoder = model.decoder
    if cfg.lora_target != "none":
        decoder.merge_lora()
        decoder.apply_lora(LoRAAdapter.create(decoder, cfg.lora_target, rng))
    if cfg.trainable == "lora_only":
        trainable = model.adapter_parameters()
    else:
        trainable = model.parameters()
    chosen = {id(p) for p in trainable}
    for p in model.parameters():
        p.requires_grad = id(p) in chosen
        p.grad = None
    return trainable


def batch_loss(model: AudioLanguageModel, batch: list[Example]) -> Tensor:
    """Mean cross-entropy over every supervised token in the batch."""
    total = None
    count = 0
    for ex in batch:
        n = len(ex.target_ids)
        term = mul(model.sample_loss(ex.mel, ex.prompt_ids, ex.target_ids), float(n))
        total = term if total is None else add(total, term)
        count += n
    return mul(total, 1.0 / count)


def train_step(model: AudioLanguageModel, batch: list[Example], optimizer: AdamW, lr: float) -> float:
    if not batch:
        raise ValueError("empty batch")
    model.train()
    for p in optimizer.params:
        p.grad = None
    try:
        loss = batch_loss(model, batch)
        loss.backward()
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value during training step: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss is {value}")
    optimizer.step(lr)
    return value


@dataclass
class StageResult:
    model: AudioLanguageModel
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def final_mean(self, window: int = 100) -> float:
        return float(np.mean(self.losses[-window:]))


def write_loss_csv(path: str | Path, losses, lrs) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(losses, lrs), start=1):
            writer.writerow([i, repr(float(loss)), repr(float(lr))])


def run_stage(cfg: StageConfig, dataset: list[Example], model: AudioLanguageModel | None = None,
              seed: int = 0, model_cfg: ModelConfig | None = None, csv_path: str | Path | None = None,
              log_every: int = 0) -> StageResult:
    """Train for ``cfg.total_steps`` steps; step ``s`` (1-based) runs at ``lr_schedule(s)``."""
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    if model is None:
        model = AudioLanguageModel(model_cfg, seed=seed)
    trainable = configure_stage(model, cfg, rng)
    optimizer = AdamW(trainable, cfg.weight_decay)
    result = StageResult(model)
    order: list[int] = []
    for step in range(1, cfg.total_steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        batch = [dataset[i] for i in order[:cfg.batch_size]]
        del order[:cfg.batch_size]
        lr = lr_schedule(step, cfg)
        result.losses.append(train_step(model, batch, optimizer, lr))
        result.lrs.append(lr)
        if log_every and step % log_every == 0:
            log.info("%s step %d/%d loss %.4f lr %.3g", cfg.stage, step, cfg.total_steps, result.losses[-1], lr)
    for p in model.parameters():
        p.grad = None
    model.eval()
    if csv_path is not None:
        write_loss_csv(csv_path, result.losses, result.lrs)
    return result


@dataclass
class AlignComparison:
    asr_curve: list[float]
    caption_curve: list[float]
    window: int

    @property
    def asr_final(self) -> float:
        return float(np.mean(self.asr_curve[-self.window:]))

    @property
    def caption_final(self) -> float:
        return float(np.mean(self.caption_curve[-self.window:]))

    @property
    def lower(self) -> str:
        return "asr_like" if self.asr_final < self.caption_final else "caption_like"


def exp_align_compare(steps: int, seed: int = 0, count: int = 200, model_cfg: ModelConfig | None = None,
                      stage: StageConfig | None = None, window: int | None = None) -> AlignComparison:
    """Train two identically initialised models, one per target kind, on the same audio."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    base = stage or StageConfig.for_stage("align")
    cfg = replace(base, total_steps=max(steps, 2))
    curves = {}
    for kind in ("asr_like", "caption_like"):
        data = synth_dataset(SynthTask(kind, seed, count))
        curves[kind] = run_stage(cfg, data, seed=seed, model_cfg=model_cfg).losses[:steps]
    return AlignComparison(curves["asr_like"], curves["caption_like"], window or max(1, min(100, steps // 5)))
