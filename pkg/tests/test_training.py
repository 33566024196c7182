import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdlm.decoder import BOS, EOS, LoRAAdapter, encode_text
from mdlm.model import AudioLanguageModel
from mdlm.nn_core import no_grad
from mdlm.training import (
    AdamW,
    StageConfig,
    SynthTask,
    TrainingDiverged,
    asr_target,
    caption_target,
    configure_stage,
    exp_align_compare,
    lr_schedule,
    make_example,
    run_stage,
    synth_dataset,
    train_step,
)
from oracles import central_difference, micro_config, tensor_rel_error


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(SynthTask("caption_like", seed=0, count=6))


class TestSchedule:
    @pytest.mark.parametrize("stage, peak", [("pretrain", 1e-4), ("sft", 1e-5), ("align", 1e-3)])
    def test_endpoints(self, stage, peak):
        cfg = StageConfig.for_stage(stage)
        assert lr_schedule(0, cfg) == 0.0
        assert abs(lr_schedule(cfg.warmup, cfg) - peak) < 1e-12
        assert abs(lr_schedule(cfg.total_steps, cfg) - 0.1 * peak) < 1e-12

    def test_long_runs_use_the_full_warmup(self):
        cfg = StageConfig.for_stage("pretrain", total_steps=20000)
        assert cfg.warmup == 1000
        assert lr_schedule(500, cfg) == pytest.approx(0.5e-4, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 3000))
    def test_shape(self, total):
        cfg = StageConfig.for_stage("pretrain", total_steps=total)
        lrs = [lr_schedule(s, cfg) for s in range(total + 1)]
        w = cfg.warmup
        assert 1 <= w < total
        assert all(a < b for a, b in zip(lrs[:w], lrs[1:w + 1]))
        assert all(a >= b for a, b in zip(lrs[w:], lrs[w + 1:]))
        assert max(lrs) == lrs[w]

    @pytest.mark.parametrize("step", [-1, 201])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            lr_schedule(step, StageConfig.for_stage("sft"))


class TestStageConfig:
    def test_table_values(self):
        pre = StageConfig.for_stage("pretrain")
        sft = StageConfig.for_stage("sft")
        align = StageConfig.for_stage("align")
        assert (pre.peak_lr, pre.weight_decay, pre.batch_size, pre.lora_target) == (1e-4, 0.01, 10, "qv")
        assert (sft.peak_lr, sft.weight_decay, sft.batch_size, sft.lora_target) == (1e-5, 0.1, 8, "all_linear")
        assert (align.lora_target, align.trainable) == ("none", "encoder+decoder")

    @pytest.mark.parametrize("kwargs", [dict(stage="nope"), dict(stage="align", lora_target="bad"),
                                        dict(stage="align", trainable="lora_only")])
    def test_invalid(self, kwargs):
        base = dict(peak_lr=1e-3, weight_decay=0.0, batch_size=2, total_steps=10)
        with pytest.raises(ValueError):
            StageConfig(**{**base, **kwargs})


class TestSynthetic:
    def test_targets_by_construction(self):
        assert asr_target([2, 7, 2]) == "2 7 2"
        assert caption_target([2, 7, 2]) == "2:2 7:1"
        ex = make_example("caption_like", [2, 7, 2], [0.3, 0.3, 0.3])
        assert ex.target_ids == encode_text("2:2 7:1") + [EOS]
        assert ex.prompt_ids[0] == BOS

    def test_deterministic(self):
        a = synth_dataset(SynthTask("asr_like", seed=3, count=5))
        b = synth_dataset(SynthTask("asr_like", seed=3, count=5))
        for x, y in zip(a, b):
            assert x.wave.samples.tobytes() == y.wave.samples.tobytes()
            assert x.target_ids == y.target_ids

    def test_tasks_share_audio(self):
        a = synth_dataset(SynthTask("asr_like", seed=1, count=4))
        b = synth_dataset(SynthTask("caption_like", seed=1, count=4))
        for x, y in zip(a, b):
            assert x.wave.samples.tobytes() == y.wave.samples.tobytes()
            assert x.text != y.text or len(set(x.bins)) == len(x.bins) == 1

    def test_segments_and_order(self):
        for ex in synth_dataset(SynthTask("asr_like", seed=2, count=30)):
            assert 3 <= len(ex.bins) <= 8
            assert ex.boundaries == sorted(ex.boundaries) and ex.boundaries[0] == 0
            gaps = np.diff(ex.boundaries + [len(ex.wave.samples)]) / 16000
            assert ((gaps >= 0.2 - 1e-4) & (gaps <= 0.5 + 1e-4)).all()
            assert ex.text.split() == [str(b) for b in ex.bins]

    def test_mixed_alternates(self):
        kinds = [ex.kind for ex in synth_dataset(SynthTask("mixed", count=4))]
        assert kinds == ["asr_like", "caption_like"] * 2

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            SynthTask("asr_like", count=0)


class TestTrainStep:
    def test_lora_only_keeps_base_bytes(self, tiny_data):
        model = AudioLanguageModel(micro_config(vocab=259), seed=0)
        cfg = StageConfig.for_stage("pretrain")
        params = configure_stage(model, cfg, np.random.default_rng(0))
        before = {n: p.data.tobytes() for n, p in model.named_parameters() if ".lora." not in n}
        opt = AdamW(params, cfg.weight_decay)
        for _ in range(2):
            train_step(model, tiny_data[:2], opt, 1e-2)
        after = {n: p.data.tobytes() for n, p in model.named_parameters() if ".lora." not in n}
        assert before == after
        assert any(p.data.any() for n, p in model.named_parameters() if n.endswith(".lora.B"))

    def test_zero_lr_changes_nothing(self, tiny_data):
        model = AudioLanguageModel(micro_config(vocab=259), seed=0)
        params = configure_stage(model, StageConfig.for_stage("align"), np.random.default_rng(0))
        before = [p.data.tobytes() for p in model.parameters()]
        loss = train_step(model, tiny_data[:2], AdamW(params, 0.01), 0.0)
        assert math.isfinite(loss)
        assert before == [p.data.tobytes() for p in model.parameters()]

    def test_two_steps_descend(self, tiny_data):
        model = AudioLanguageModel(micro_config(vocab=259), seed=0)
        params = configure_stage(model, StageConfig.for_stage("align"), np.random.default_rng(0))
        opt = AdamW(params, 0.01)
        first = train_step(model, tiny_data[:3], opt, 1e-2)
        second = train_step(model, tiny_data[:3], opt, 1e-2)
        assert second < first

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(AudioLanguageModel(micro_config(vocab=259)), [], AdamW([], 0.0), 1e-3)

    def test_divergence_is_reported(self, tiny_data):
        model = AudioLanguageModel(micro_config(vocab=259), seed=0)
        params = configure_stage(model, StageConfig.for_stage("align"), np.random.default_rng(0))
        model.decoder.head.weight.data[0, 0] = np.inf
        with pytest.raises(TrainingDiverged):
            train_step(model, tiny_data[:1], AdamW(params, 0.0), 1e-3)

    def test_decay_skips_vectors(self):
        model = AudioLanguageModel(micro_config(vocab=259), seed=0)
        params = model.parameters()
        before = [p.data.copy() for p in params]
        for p in params:
            p.grad = np.zeros_like(p.data)
        AdamW(params, 0.5).step(0.1)
        for p, b in zip(params, before):
            expected = b * (1 - 0.05) if b.ndim >= 2 else b
            np.testing.assert_allclose(p.data, expected, rtol=1e-6)


class TestRunStage:
    def test_csv_rows_and_header(self, tiny_data, tmp_path):
        cfg = StageConfig.for_stage("align", total_steps=5, batch_size=2)
        path = tmp_path / "loss.csv"
        result = run_stage(cfg, tiny_data, model_cfg=micro_config(vocab=259), csv_path=path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["step", "loss", "lr"]
        assert len(rows) - 1 == 5 == len(result.losses)
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]
        assert float(rows[-1][2]) == pytest.approx(lr_schedule(5, cfg))

    def test_sft_adapters_cover_every_linear_map(self, tiny_data):
        model = AudioLanguageModel(micro_config(vocab=259, layers=2), seed=0)
        cfg = StageConfig.for_stage("sft", total_steps=2, batch_size=1)
        run_stage(cfg, tiny_data, model=model)
        maps = model.decoder.linear_maps()
        assert len(model.decoder.adapter.pairs) == len(maps) == 12
        assert all(lin.lora is not None for lin in maps.values())

    def test_chain_merges_previous_adapter(self, tiny_data):
        model = AudioLanguageModel(micro_config(vocab=259), seed=0)
        run_stage(StageConfig.for_stage("pretrain", total_steps=2, batch_size=1, peak_lr=1e-2), tiny_data, model=model)
        with no_grad():
            before = model.sample_loss(tiny_data[0].mel, tiny_data[0].prompt_ids, tiny_data[0].target_ids).item()
        configure_stage(model, StageConfig.for_stage("sft"), np.random.default_rng(5))
        with no_grad():
            after = model.sample_loss(tiny_data[0].mel, tiny_data[0].prompt_ids, tiny_data[0].target_ids).item()
        assert model.decoder.adapter.target_set == "all_linear"
        assert after == pytest.approx(before, rel=1e-5)

    def test_deterministic(self, tiny_data):
        cfg = StageConfig.for_stage("align", total_steps=3, batch_size=2)
        a = run_stage(cfg, tiny_data, model_cfg=micro_config(vocab=259)).losses
        b = run_stage(cfg, tiny_data, model_cfg=micro_config(vocab=259)).losses
        assert a == b

    def test_exp_align_small_budget(self):
        out = exp_align_compare(steps=4, count=6, model_cfg=micro_config(vocab=259))
        assert len(out.asr_curve) == len(out.caption_curve) == 4
        assert out.lower in ("asr_like", "caption_like")


def test_gradients_with_lora_match_finite_differences():
    model = AudioLanguageModel(micro_config(), seed=0).astype(np.float64)
    dec = model.decoder
    adapter = LoRAAdapter.create(dec, "all_linear", np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for pair in adapter.pairs.values():
        pair.A.data = pair.A.data.astype(np.float64)
        pair.B.data = rng.standard_normal(pair.B.shape) * 0.1
    dec.apply_lora(adapter)
    model.eval()
    mel = rng.standard_normal((30, 64))
    params = [p for n, p in model.named_parameters() if n.startswith("decoder.") or n.startswith("projector.")]

    def loss():
        return model.sample_loss(mel, [1, 2], [3, 4, 5])

    for p in model.parameters():
        p.grad = None
    loss().backward()
    with no_grad():
        numeric = central_difference(lambda: loss().item(), params)
    for p, n in zip(params, numeric):
        assert tensor_rel_error(p.grad, n) < 1e-4
