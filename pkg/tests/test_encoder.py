import numpy as np
import pytest

from sslm import encoder as enc
from sslm import tokenizer as tok


def make_inputs(config, rng, batch=3, length=8):
    ids = rng.integers(5, config.vocab_size, (batch, length))
    ids[:, 0] = tok.CLS_ID
    ids[:, 5] = tok.SEP_ID
    ids[:, 6:] = tok.PAD_ID
    attention = np.zeros((batch, length), dtype=np.int64)
    attention[:, :6] = 1
    segments = np.zeros((batch, length), dtype=np.int64)
    return ids, attention, segments


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            enc.EncoderConfig(n_layers=1, hidden_size=10, n_heads=3, ff_size=8, vocab_size=20)

    def test_max_positions_floor(self):
        with pytest.raises(ValueError):
            enc.EncoderConfig(n_layers=1, hidden_size=8, n_heads=2, ff_size=8, vocab_size=20, max_positions=2)


class TestInitParameters:
    def test_deterministic(self, tiny_config):
        a = enc.init_parameters(tiny_config, seed=9)
        b = enc.init_parameters(tiny_config, seed=9)
        assert all((a[k] == b[k]).all() for k in a)

    def test_seed_changes_weights(self, tiny_config):
        a = enc.init_parameters(tiny_config, seed=1)
        b = enc.init_parameters(tiny_config, seed=2)
        assert not (a["embeddings.token"] == b["embeddings.token"]).all()

    def test_norm_gains_one_biases_zero(self, tiny_config):
        params = enc.init_parameters(tiny_config, seed=0)
        for name, arr in params.items():
            if name.endswith("norm.gain"):
                assert (arr == 1.0).all()
            elif name.endswith(".bias"):
                assert (arr == 0.0).all()

    def test_truncation_bound(self, tiny_config):
        params = enc.init_parameters(tiny_config, seed=0)
        weights = params["embeddings.token"]
        assert np.abs(weights).max() <= 2 * 0.02

    def test_parameter_count_closed_form(self):
        # 2-layer / hidden-16 / 2-head / vocab-50 shape arithmetic by hand
        h, f, v, p = 16, 32, 50, 24
        config = enc.EncoderConfig(n_layers=2, hidden_size=h, n_heads=2, ff_size=f,
                                   vocab_size=v, max_positions=p)
        per_layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h
        expected = (
            v * h + p * h + 2 * h + 2 * h      # embeddings + their norm
            + 2 * per_layer
            + (h * h + h) + 2 * h + v          # mlm transform, norm, tied output bias
            + (h * h + h)                      # pooler
        )
        params = enc.init_parameters(config, seed=0)
        assert sum(arr.size for arr in params.values()) == expected

    def test_untied_adds_projection(self):
        config = enc.EncoderConfig(n_layers=1, hidden_size=8, n_heads=2, ff_size=16,
                                   vocab_size=30, max_positions=8, tie_mlm_weights=False)
        params = enc.init_parameters(config, seed=0)
        assert params["mlm.output.weight"].shape == (8, 30)


class TestForward:
    def test_output_shape(self, tiny_config, rng):
        params = enc.parameters_to_tensors(enc.init_parameters(tiny_config, seed=0))
        ids, attention, segments = make_inputs(tiny_config, rng)
        hidden = enc.forward(params, tiny_config, ids, attention, segments)
        assert hidden.shape == (3, 8, tiny_config.hidden_size)
        assert np.isfinite(hidden.data).all()

    def test_shape_oracle_random_configs(self, rng):
        for _ in range(4):
            heads = int(rng.integers(1, 4))
            hidden_size = heads * int(rng.integers(4, 9))
            config = enc.EncoderConfig(
                n_layers=int(rng.integers(1, 3)), hidden_size=hidden_size, n_heads=heads,
                ff_size=int(rng.integers(8, 33)), vocab_size=int(rng.integers(10, 40)),
                max_positions=16,
            )
            params = enc.parameters_to_tensors(enc.init_parameters(config, seed=0))
            batch, length = int(rng.integers(1, 4)), int(rng.integers(3, 12))
            ids = rng.integers(0, config.vocab_size, (batch, length))
            attention = np.ones((batch, length), dtype=np.int64)
            segments = np.zeros((batch, length), dtype=np.int64)
            hidden = enc.forward(params, config, ids, attention, segments)
            assert hidden.shape == (batch, length, hidden_size)
            logits = enc.mlm_logits(params, config, hidden)
            assert logits.shape == (batch, length, config.vocab_size)

    def test_pad_invariance(self, tiny_config, rng):
        params = enc.parameters_to_tensors(enc.init_parameters(tiny_config, seed=0))
        ids, attention, segments = make_inputs(tiny_config, rng)
        base = enc.forward(params, tiny_config, ids, attention, segments).data
        altered = ids.copy()
        altered[:, 6:] = rng.integers(5, tiny_config.vocab_size, altered[:, 6:].shape)
        changed = enc.forward(params, tiny_config, altered, attention, segments).data
        np.testing.assert_array_equal(base[:, :6], changed[:, :6])

    def test_identical_rows(self, tiny_config, rng):
        params = enc.parameters_to_tensors(enc.init_parameters(tiny_config, seed=0))
        ids, attention, segments = make_inputs(tiny_config, rng, batch=1)
        ids = np.repeat(ids, 4, axis=0)
        attention = np.repeat(attention, 4, axis=0)
        segments = np.repeat(segments, 4, axis=0)
        hidden = enc.forward(params, tiny_config, ids, attention, segments).data
        for row in range(1, 4):
            np.testing.assert_array_equal(hidden[0], hidden[row])

    def test_id_out_of_range(self, tiny_config, rng):
        params = enc.parameters_to_tensors(enc.init_parameters(tiny_config, seed=0))
        ids, attention, segments = make_inputs(tiny_config, rng)
        ids[0, 1] = tiny_config.vocab_size
        with pytest.raises(ValueError):
            enc.forward(params, tiny_config, ids, attention, segments)

    def test_too_long_sequence(self, tiny_config, rng):
        params = enc.parameters_to_tensors(enc.init_parameters(tiny_config, seed=0))
        length = tiny_config.max_positions + 1
        ids = np.zeros((1, length), dtype=np.int64)
        with pytest.raises(ValueError):
            enc.forward(params, tiny_config, ids, np.ones((1, length)), np.zeros((1, length)))

    def test_deterministic(self, tiny_config, rng):
        params = enc.parameters_to_tensors(enc.init_parameters(tiny_config, seed=0))
        ids, attention, segments = make_inputs(tiny_config, rng)
        a = enc.forward(params, tiny_config, ids, attention, segments).data
        b = enc.forward(params, tiny_config, ids, attention, segments).data
        assert (a == b).all()


class TestMlmHead:
    def test_zeroed_head_gives_bias(self, tiny_config, rng):
        arrays = enc.init_parameters(tiny_config, seed=0)
        bias = rng.uniform(-1, 1, tiny_config.vocab_size)
        arrays["embeddings.token"][:] = 0.0
        arrays["mlm.output.bias"] = bias
        params = enc.parameters_to_tensors(arrays)
        ids, attention, segments = make_inputs(tiny_config, rng)
        hidden = enc.forward(params, tiny_config, ids, attention, segments)
        # token embeddings are zero, so the tied projection contributes nothing
        logits = enc.mlm_logits(params, tiny_config, hidden).data
        np.testing.assert_allclose(logits, np.broadcast_to(bias, logits.shape), atol=1e-12)

    def test_pooled_output_shape(self, tiny_config, rng):
        params = enc.parameters_to_tensors(enc.init_parameters(tiny_config, seed=0))
        ids, attention, segments = make_inputs(tiny_config, rng)
        hidden = enc.forward(params, tiny_config, ids, attention, segments)
        pooled = enc.pooled_output(params, hidden)
        assert pooled.shape == (3, tiny_config.hidden_size)
        assert (np.abs(pooled.data) <= 1.0).all()


class TestCheckpoint:
    def test_roundtrip(self, tiny_checkpoint, tmp_path):
        path = tmp_path / "model.ckpt"
        ckpt = enc.Checkpoint(
            config=tiny_checkpoint.config,
            parameters=tiny_checkpoint.parameters,
            meta={"step": 17, "epoch": 3, "source": "base"},
            extra={"note": "x"},
        )
        enc.save_checkpoint(ckpt, path)
        loaded = enc.load_checkpoint(path)
        assert loaded.config == ckpt.config
        assert loaded.meta == ckpt.meta
        assert loaded.extra == ckpt.extra
        assert set(loaded.parameters) == set(ckpt.parameters)
        for name in ckpt.parameters:
            assert (loaded.parameters[name] == ckpt.parameters[name]).all()

    def test_byte_identical_saves(self, tiny_checkpoint, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        enc.save_checkpoint(tiny_checkpoint, p1)
        enc.save_checkpoint(tiny_checkpoint, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tiny_checkpoint, tmp_path):
        path = tmp_path / "model.ckpt"
        enc.save_checkpoint(tiny_checkpoint, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(enc.CheckpointFormatError):
            enc.load_checkpoint(path)

    def test_bad_version(self, tiny_checkpoint, tmp_path):
        path = tmp_path / "model.ckpt"
        enc.save_checkpoint(tiny_checkpoint, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(enc.CheckpointVersionError):
            enc.load_checkpoint(path)

    def test_truncated(self, tiny_checkpoint, tmp_path):
        path = tmp_path / "model.ckpt"
        enc.save_checkpoint(tiny_checkpoint, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(enc.CheckpointTruncatedError):
            enc.load_checkpoint(path)

    def test_shape_mismatch(self, tiny_checkpoint, tmp_path):
        path = tmp_path / "model.ckpt"
        bad = enc.Checkpoint(
            config=tiny_checkpoint.config,
            parameters={**tiny_checkpoint.parameters, "pooler.bias": np.zeros(7)},
        )
        enc.save_checkpoint(bad, path)
        with pytest.raises(enc.CheckpointShapeError):
            enc.load_checkpoint(path)

    def test_missing_tensor(self, tiny_checkpoint, tmp_path):
        path = tmp_path / "model.ckpt"
        params = dict(tiny_checkpoint.parameters)
        del params["pooler.bias"]
        enc.save_checkpoint(enc.Checkpoint(config=tiny_checkpoint.config, parameters=params), path)
        with pytest.raises(enc.CheckpointShapeError):
            enc.load_checkpoint(path)
