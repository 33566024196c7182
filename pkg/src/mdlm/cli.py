"""Command-line entry point.

Exit codes: 0 ok, 2 bad input (usage, WAV), 3 checkpoint, 4 numeric failure,
5 configuration.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mdlm import batching, checkpoint, perf, plotting
from mdlm.config import ConfigError, RunConfig
from mdlm.decoder import BOS, EOS, decode_text, encode_text
from mdlm.frontend import WavFormatError, read_wav
from mdlm.model import AudioLanguageModel
from mdlm.nn_core import NonFiniteError
from mdlm.training import (
    StageConfig,
    SynthTask,
    TrainingDiverged,
    exp_align_compare,
    lr_schedule,
    run_stage,
    synth_dataset,
    write_loss_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4, 5

log = logging.getLogger("mdlm")


def _write_rows(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _load_or_build(args, cfg: RunConfig) -> AudioLanguageModel:
    if getattr(args, "model", None):
        return checkpoint.load_model(args.model)
    return AudioLanguageModel(cfg.model, seed=args.seed)


def _stage(name: str, cfg: RunConfig) -> StageConfig:
    try:
        return StageConfig.for_stage(name, **vars(cfg.stage))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"stage: {exc}") from exc


def cmd_init(args) -> int:
    cfg = RunConfig.load(args.config)
    checkpoint.save_model(args.out, AudioLanguageModel(cfg.model, seed=args.seed))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_caption(args) -> int:
    model = checkpoint.load_model(args.model)
    wave = read_wav(args.audio)
    prompt = [BOS] + encode_text(args.prompt)
    ids, n_audio = model.caption(wave, prompt, args.max_new)
    print(f"audio_tokens={n_audio} duration_s={wave.duration:.3f}", file=sys.stderr)
    text = decode_text([i for i in ids if i != EOS])
    print(text.decode("utf-8", errors="replace"))
    print(f"tokens={len(ids)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    stage = _stage(args.stage, cfg)
    if args.stage != "align" and not args.init:
        raise ConfigError(f"stage {args.stage} needs --init CHECKPOINT from the previous stage")
    model = checkpoint.load_model(args.init) if args.init else None
    data = synth_dataset(SynthTask(stage.task, args.seed, stage.num_samples))
    out = Path(args.out)
    csv_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    result = run_stage(stage, data, model=model, seed=args.seed, model_cfg=cfg.model, csv_path=csv_path,
                       log_every=args.log_every)
    checkpoint.save_model(out, result.model)
    if not args.no_figures:
        plotting.plot_loss_curves({args.stage: result.losses}, csv_path.with_suffix(".png"), f"{args.stage} stage")
    print(f"stage={args.stage} steps={stage.total_steps} final_loss={result.final_mean():.4f} "
          f"checkpoint={out} losses={csv_path}")
    return EXIT_OK


def _bench_ttft(args, cfg: RunConfig, out: Path) -> list[dict]:
    session = perf.Session(_load_or_build(args, cfg))
    rows = []
    for duration in cfg.bench.durations:
        policies = [p for p in perf.POLICIES if not (p == "fixed30" and duration > perf.FIXED_PAD_S)]
        wave = perf.synthetic_waveform(duration, args.seed)
        medians = perf.measure_ttft_policies(session, wave, policies, reps=cfg.bench.reps, warmup=cfg.bench.warmup)
        for policy, ttft in medians.items():
            rows.append({"policy": policy, "duration_s": duration, "ttft_ms": round(ttft * 1e3, 4),
                         "reps": cfg.bench.reps})
            print(f"ttft policy={policy} duration_s={duration} ttft_ms={ttft * 1e3:.2f}")
    rows.sort(key=lambda r: (perf.POLICIES.index(r["policy"]), r["duration_s"]))
    _write_rows(out / "ttft.csv", ["policy", "duration_s", "ttft_ms", "reps"], rows)
    if not args.no_figures:
        plotting.plot_ttft(rows, out / "ttft.png")
    return rows


def _bench_throughput(args, cfg: RunConfig, out: Path) -> list[dict]:
    session = perf.Session(_load_or_build(args, cfg))
    cap = int(cfg.bench.mem_cap_mb * 2**20) if cfg.bench.mem_cap_mb else None
    rows = []
    for batch in cfg.bench.batch_sizes:
        res = perf.measure_throughput(session, batch, 30.0, cfg.bench.out_tokens, cfg.bench.rounds, cap,
                                      workers=args.workers, seed=args.seed)
        rate = "" if res.samples_per_s is None else round(res.samples_per_s, 4)
        rows.append({"batch": batch, "samples_per_s": rate, "status": res.status})
        print(f"throughput batch={batch} samples_per_s={rate} status={res.status}")
    _write_rows(out / "throughput.csv", ["batch", "samples_per_s", "status"], rows)
    if not args.no_figures:
        plotting.plot_throughput(rows, out / "throughput.png")
    return rows


def _bench_gmacs(args, cfg: RunConfig, out: Path) -> list[dict]:
    session = perf.Session(_load_or_build(args, cfg))
    rows = []
    for policy in perf.POLICIES:
        for duration in cfg.bench.durations:
            if policy == "fixed30" and duration > perf.FIXED_PAD_S:
                continue
            wave = perf.synthetic_waveform(duration, args.seed)
            analytic = perf.gmacs_pipeline(duration, session.cfg, policy, len(session.prompt_ids), args.new_tokens)
            measured = session.instrumented_macs(wave, policy, args.new_tokens)
            if analytic.phases() != measured.phases():
                print(f"MAC mismatch for {policy} {duration}s: analytic={analytic.phases()} "
                      f"instrumented={measured.phases()}", file=sys.stderr)
                return []
            for phase, macs in analytic.phases().items():
                rows.append({"phase": f"{policy}/{duration:g}s/{phase}", "macs": macs})
            print(f"gmacs policy={policy} duration_s={duration} total={analytic.total_macs / 1e9:.4f} (instrumented match)")
    _write_rows(out / "gmacs.csv", ["phase", "macs"], rows)
    if not args.no_figures and rows:
        totals = [r for r in rows if r["phase"].endswith("/total")]
        plotting.plot_gmacs([{"phase": r["phase"].rsplit("/", 1)[0], "macs": r["macs"]} for r in totals],
                            out / "gmacs.png")
    return rows


def _bench_padding(args, cfg: RunConfig, out: Path) -> list[dict]:
    durations = batching.length_distribution(cfg.bench.padding_samples, seed=args.seed)
    samples = batching.as_samples(durations)
    fixed = batching.plan_fixed(samples, cfg.bench.padding_batch)
    bucketed = batching.plan_sorted_buckets(samples, cfg.bench.padding_batch)
    wf, ws = batching.padding_waste(fixed), batching.padding_waste(bucketed)
    ratio = wf / ws if ws > 0 else float("inf")
    batching.write_plan_csv(fixed, out / "plan_fixed.csv", with_tokens=args.tokens)
    batching.write_plan_csv(bucketed, out / "plan_sorted.csv", with_tokens=args.tokens)
    print(f"padding fixed_waste={wf:.6f} sorted_waste={ws:.6f} ratio={ratio:.3f}")
    if not args.no_figures:
        plotting.plot_padding(durations, wf, ws, out / "padding.png")
    return [{"fixed_waste": wf, "sorted_waste": ws, "ratio": ratio}]


SUITES = {"ttft": _bench_ttft, "throughput": _bench_throughput, "gmacs": _bench_gmacs, "padding": _bench_padding}


def cmd_bench(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = SUITES[args.suite](args, cfg, out)
    if args.suite == "gmacs" and not rows:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_exp_align(args) -> int:
    cfg = RunConfig.load(args.config)
    stage = _stage("align", cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = exp_align_compare(args.steps, seed=args.seed, count=stage.num_samples, model_cfg=cfg.model, stage=stage)
    lrs = [lr_schedule(s, replace(stage, total_steps=max(args.steps, 2))) for s in range(1, args.steps + 1)]
    write_loss_csv(out / "asr_like.csv", result.asr_curve, lrs)
    write_loss_csv(out / "caption_like.csv", result.caption_curve, lrs)
    if not args.no_figures:
        plotting.plot_loss_curves({"asr_like": result.asr_curve, "caption_like": result.caption_curve},
                                  out / "exp_align.png", "ASR-like vs caption-like alignment")
    relation = "<" if result.asr_final < result.caption_final else ">="
    print(f"final-window({result.window}) asr_like={result.asr_final:.4f} {relation} "
          f"caption_like={result.caption_final:.4f}; lower: {result.lower}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdlm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="JSON run configuration")
        return p

    p = common(sub.add_parser("init", help="write a freshly initialised checkpoint"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = common(sub.add_parser("caption", help="greedy caption for a WAV file"))
    p.add_argument("--model", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--prompt", default="cap")
    p.add_argument("--max-new", type=int, default=64)
    p.set_defaults(func=cmd_caption)

    p = common(sub.add_parser("train", help="run one training stage"))
    p.add_argument("--stage", choices=["align", "pretrain", "sft"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="checkpoint from the previous stage")
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("bench", help="benchmark suites writing CSV reports and figures"))
    p.add_argument("--suite", choices=sorted(SUITES), required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--new-tokens", type=int, default=1)
    p.add_argument("--tokens", action="store_true", help="add a padded_tokens column to plan CSVs")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("exp-align", help="ASR-like vs caption-like loss curves"))
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_exp_align)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", 1) is None:
        args.workers = perf.worker_cap()
    if getattr(args, "steps", 1) < 1:
        parser.error("--steps must be >= 1")
    if getattr(args, "max_new", 1) < 1:
        parser.error("--max-new must be >= 1")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WavFormatError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except checkpoint.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
