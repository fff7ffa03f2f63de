import numpy as np
import pytest

from statespan.checkpoint import (CheckpointError, load_checkpoint,
                                  save_checkpoint)
from statespan.model import CopyFlowModel, ModelConfig
from statespan.vocab import Vocabulary


def make_model(seed=0):
    vocab = Vocabulary([f"w{i}" for i in range(9)])
    cfg = ModelConfig(emb_size=6, hidden_size=5, n_ctx=4, t_span=3)
    return CopyFlowModel(vocab, cfg, seed=seed)


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        model = make_model(seed=3)
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), model, meta={"note": "x"},
                        rng_state={"seed": 3})
        loaded, vocab, meta = load_checkpoint(str(p))
        assert meta == {"note": "x"}
        assert vocab.tokens == model.vocab.tokens
        assert loaded.config == model.config
        for name in model.store.names():
            assert np.array_equal(loaded.store[name].data,
                                  model.store[name].data)

    def test_save_is_deterministic(self, tmp_path):
        model = make_model(seed=5)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(str(p1), model)
        save_checkpoint(str(p2), model)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_format_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b'{"format": "other-v0"}\n')
        with pytest.raises(CheckpointError):
            load_checkpoint(str(p))

    def test_garbage_header_rejected(self, tmp_path):
        p = tmp_path / "garbage.ckpt"
        p.write_bytes(b"\xff\xfe not a header\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(p))

    def test_truncated_payload_rejected(self, tmp_path):
        model = make_model()
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), model)
        data = p.read_bytes()
        p.write_bytes(data[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(str(p))

    def test_trailing_bytes_rejected(self, tmp_path):
        model = make_model()
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), model)
        p.write_bytes(p.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(str(p))

    def test_vocab_hash_mismatch_rejected(self, tmp_path):
        model = make_model()
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), model)
        data = p.read_bytes()
        head, _, tail = data.partition(b"\n")
        head = head.replace(b'"w0"', b'"wX"', 1)
        p.write_bytes(head + b"\n" + tail)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(str(p))
