import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mdlm.checkpoint import CheckpointError, dumps, load_model, loads, model_tensors, save_model
from mdlm.decoder import LoRAAdapter
from mdlm.model import AudioLanguageModel
from mdlm.nn_core import Tensor, no_grad
from mdlm.projector import AudioTokens
from oracles import micro_config

arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                    elements=st.floats(-1e6, 1e6, width=32))


def test_header_layout():
    blob = dumps({"w": np.array([[1.0, 2.0]], np.float32)})
    assert blob[:4] == b"MDLM"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<H", blob, 12) == (1,)
    assert blob[14:15] == b"w" and blob[15] == 2
    assert struct.unpack_from("<2Q", blob, 16) == (1, 2)
    assert np.frombuffer(blob[32:40], "<f4").tolist() == [1.0, 2.0]
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), arrays, max_size=5))
def test_round_trip_is_byte_exact(tensors):
    blob = dumps(tensors)
    back = loads(blob)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k], "<f4").tobytes()
    assert dumps(back) == blob


@pytest.mark.parametrize("where", [0, 10, -1, -5])
def test_corruption_is_detected(where):
    blob = bytearray(dumps({"a": np.arange(6, dtype=np.float32)}))
    blob[where] ^= 0x01
    with pytest.raises(CheckpointError):
        loads(bytes(blob))


def test_truncation_is_detected():
    blob = dumps({"a": np.arange(6, dtype=np.float32)})
    with pytest.raises(CheckpointError):
        loads(blob[:-7])


def test_model_round_trip(tmp_path):
    model = AudioLanguageModel(micro_config(vocab=259, max_positions=128), seed=1)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    first = path.read_bytes()
    back = load_model(path)
    assert back.cfg == model.cfg
    save_model(path, back)
    assert path.read_bytes() == first


def test_lora_names_and_reload(tmp_path):
    model = AudioLanguageModel(micro_config(vocab=259, max_positions=128, layers=2), seed=1)
    adapter = LoRAAdapter.create(model.decoder, "qv", np.random.default_rng(0))
    for pair in adapter.pairs.values():
        pair.B.data = np.random.default_rng(1).standard_normal(pair.B.shape).astype(np.float32) * 0.1
    model.decoder.apply_lora(adapter)
    names = [n for n in model_tensors(model) if ".lora." in n]
    assert sorted(names) == sorted(f"decoder.layers.{i}.attn.{m}.lora.{ab}"
                                   for i in range(2) for m in "qv" for ab in "AB")
    path = tmp_path / "lora.ckpt"
    save_model(path, model)
    back = load_model(path)
    assert back.decoder.adapter.target_set == "qv"
    assert back.decoder.adapter.scaling == 4.0
    toks = AudioTokens(Tensor(np.random.default_rng(2).standard_normal((5, 8)).astype(np.float32)))
    with no_grad():
        a = model.decoder(model.decoder.build_prefix(toks, [1], [2])).data
        b = back.decoder(back.decoder.build_prefix(toks, [1], [2])).data
    assert a.tobytes() == b.tobytes()


def test_missing_config_tensor():
    with pytest.raises(CheckpointError):
        from mdlm.checkpoint import model_from_tensors
        model_from_tensors({"x": np.zeros(1, np.float32)})
