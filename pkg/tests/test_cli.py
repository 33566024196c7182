import csv
import json

import numpy as np
import pytest

from mdlm.checkpoint import load
from mdlm.cli import main
from mdlm.config import ModelConfig
from mdlm.frontend import Waveform, write_wav
from mdlm.perf import estimate_peak_bytes


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "init.ckpt"
    assert main(["init", "--out", str(path)]) == 0
    return path


def wav(tmp_path, seconds, name="a.wav"):
    path = tmp_path / name
    n = int(round(seconds * 16000))
    write_wav(path, Waveform(np.random.default_rng(0).uniform(-0.3, 0.3, n).astype(np.float32)))
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def write_config(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


class TestCaption:
    @pytest.mark.parametrize("seconds, tokens", [(1.0, 5), (30.0, 150)])
    def test_audio_token_report(self, ckpt, tmp_path, capsys, seconds, tokens):
        assert main(["caption", "--model", str(ckpt), "--audio", str(wav(tmp_path, seconds)), "--max-new", "3"]) == 0
        err = capsys.readouterr().err
        assert f"audio_tokens={tokens}" in err

    def test_max_new_one(self, ckpt, tmp_path, capsys):
        assert main(["caption", "--model", str(ckpt), "--audio", str(wav(tmp_path, 2.0)), "--max-new", "1"]) == 0
        assert capsys.readouterr().out.strip().endswith("tokens=1")

    def test_malformed_wav(self, ckpt, tmp_path):
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"RIFF\x00\x00\x00\x00WAVEfmt nonsense")
        assert main(["caption", "--model", str(ckpt), "--audio", str(bad)]) == 2

    def test_missing_wav(self, ckpt, tmp_path):
        assert main(["caption", "--model", str(ckpt), "--audio", str(tmp_path / "none.wav")]) == 2

    def test_corrupt_checkpoint(self, ckpt, tmp_path):
        blob = bytearray(ckpt.read_bytes())
        blob[100] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        assert main(["caption", "--model", str(bad), "--audio", str(wav(tmp_path, 1.0))]) == 3

    def test_bad_usage(self):
        with pytest.raises(SystemExit) as exc:
            main(["caption"])
        assert exc.value.code == 2


class TestConfig:
    def test_unknown_key_names_it(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"bench": {"durations": [1], "colour": "red"}})
        assert main(["bench", "--suite", "padding", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 5
        assert "colour" in capsys.readouterr().err

    def test_unknown_section(self, tmp_path):
        cfg = write_config(tmp_path, {"optimiser": {}})
        assert main(["init", "--out", str(tmp_path / "x.ckpt"), "--config", str(cfg)]) == 5

    def test_sft_without_init(self, tmp_path):
        assert main(["train", "--stage", "sft", "--out", str(tmp_path / "s.ckpt")]) == 5

    def test_defaults_are_the_micro_model(self):
        cfg = ModelConfig()
        assert (cfg.encoder.d_model, cfg.encoder.n_layers, cfg.decoder.d_model, cfg.decoder.n_layers,
                cfg.decoder.vocab_size) == (64, 2, 64, 2, 259)


@pytest.mark.slow
def test_train_chain_on_defaults(tmp_path, capsys):
    align, pre, sft = tmp_path / "align.ckpt", tmp_path / "pre.ckpt", tmp_path / "sft.ckpt"
    assert main(["train", "--stage", "align", "--out", str(align)]) == 0
    assert main(["train", "--stage", "pretrain", "--init", str(align), "--out", str(pre)]) == 0
    assert main(["train", "--stage", "sft", "--init", str(pre), "--out", str(sft), "--no-figures"]) == 0
    lora = sorted(n for n in load(pre) if ".lora." in n)
    assert lora == sorted(f"decoder.layers.{i}.attn.{m}.lora.{ab}" for i in range(2) for m in "qv" for ab in "AB")
    sft_lora = {n.split(".lora.")[0] for n in load(sft) if ".lora." in n}
    assert len(sft_lora) == 12
    for name, steps in (("align", 600), ("pre", 200), ("sft", 200)):
        csv_path = tmp_path / f"{name}.loss.csv"
        with open(csv_path) as fh:
            assert fh.readline().strip() == "step,loss,lr"
        assert len(rows(csv_path)) == steps
    assert (tmp_path / "align.loss.png").exists()
    assert not (tmp_path / "sft.loss.png").exists()


def test_train_short_run_and_nan(tmp_path):
    cfg = write_config(tmp_path, {"stage": {"total_steps": 3, "batch_size": 2, "num_samples": 4}})
    out = tmp_path / "a.ckpt"
    assert main(["train", "--stage", "align", "--config", str(cfg), "--out", str(out), "--no-figures"]) == 0
    assert len(rows(tmp_path / "a.loss.csv")) == 3
    blown = write_config(tmp_path, {"stage": {"total_steps": 3, "batch_size": 2, "num_samples": 4,
                                              "peak_lr": 1e300}})
    assert main(["train", "--stage", "align", "--config", str(blown), "--out", str(out), "--no-figures"]) == 4


class TestBench:
    def test_ttft_rows(self, ckpt, tmp_path):
        cfg = write_config(tmp_path, {"bench": {"durations": [1, 5, 10], "reps": 5, "warmup": 1}})
        assert main(["bench", "--suite", "ttft", "--model", str(ckpt), "--config", str(cfg),
                     "--out-dir", str(tmp_path)]) == 0
        table = rows(tmp_path / "ttft.csv")
        assert len({r["policy"] for r in table}) >= 2
        assert len({r["duration_s"] for r in table}) >= 3
        assert all(float(r["ttft_ms"]) > 0 and r["reps"] == "5" for r in table)
        assert (tmp_path / "ttft.png").stat().st_size > 0

    def test_gmacs_rows(self, ckpt, tmp_path):
        cfg = write_config(tmp_path, {"bench": {"durations": [1, 5, 30]}})
        assert main(["bench", "--suite", "gmacs", "--model", str(ckpt), "--config", str(cfg),
                     "--out-dir", str(tmp_path), "--new-tokens", "3"]) == 0
        table = {r["phase"]: int(r["macs"]) for r in rows(tmp_path / "gmacs.csv")}
        assert table["variable/30s/total"] == table["fixed30/30s/total"]
        assert table["fixed30/1s/encoder"] > 5 * table["variable/1s/encoder"]

    def test_padding(self, tmp_path, capsys):
        assert main(["bench", "--suite", "padding", "--out-dir", str(tmp_path), "--tokens"]) == 0
        out = capsys.readouterr().out
        assert "fixed_waste=" in out and "sorted_waste=" in out and "ratio=" in out
        assert len(rows(tmp_path / "plan_fixed.csv")) == 1000
        assert "padded_tokens" in rows(tmp_path / "plan_sorted.csv")[0]
        assert (tmp_path / "padding.png").exists()

    def test_throughput_with_oom_row(self, ckpt, tmp_path):
        cap = estimate_peak_bytes(ModelConfig(), 2, 30.0, 2) / 2**20
        cfg = write_config(tmp_path, {"bench": {"batch_sizes": [1, 2, 4], "out_tokens": 2, "rounds": 1,
                                                "mem_cap_mb": cap}})
        assert main(["bench", "--suite", "throughput", "--model", str(ckpt), "--config", str(cfg),
                     "--out-dir", str(tmp_path)]) == 0
        table = rows(tmp_path / "throughput.csv")
        assert [r["status"] for r in table] == ["ok", "ok", "OOM"]
        assert table[2]["samples_per_s"] == ""


class TestExpAlign:
    def test_rows_summary_and_determinism(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"stage": {"num_samples": 6, "batch_size": 2}})
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["exp-align", "--steps", "4", "--config", str(cfg), "--out-dir", str(a)]) == 0
        out = capsys.readouterr().out
        assert "lower: " in out
        assert main(["exp-align", "--steps", "4", "--config", str(cfg), "--out-dir", str(b), "--no-figures"]) == 0
        for name in ("asr_like.csv", "caption_like.csv"):
            assert len(rows(a / name)) == 4
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / "exp_align.png").exists()

    def test_zero_steps(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["exp-align", "--steps", "0", "--out-dir", str(tmp_path)])
        assert exc.value.code == 2
