import dataclasses
import struct

import numpy as np
import pytest

from mlmtsed import autodiff as ad
from mlmtsed.audio_features import Standardizer
from mlmtsed.errors import ConfigMismatch, CorruptFile, InvalidConfig, MissingInput, ShapeMismatch, VersionMismatch
from mlmtsed.model import (
    CRNN,
    Checkpoint,
    ModelConfig,
    bigru_forward,
    checkpoint_bytes,
    conv_block_forward,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)

from oracles import TINY, ad_gru_reference


def _small_cfg(**kw):
    return dataclasses.replace(ModelConfig(n_classes=3, T=32, F=8, H=6, dropout=0.0), **kw)


def _trained_buffers(model, x):
    model.forward(x, mode="train")
    return model


class TestConfig:
    def test_pool_product(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(pool_sizes=(5, 4)).validate()

    def test_output_width(self):
        shapes = param_shapes(ModelConfig())
        assert shapes["W_a"] == (4 * 256, 3 * 16)
        assert shapes["conv1.kernel"] == (256, 1, 5, 5)
        assert shapes["conv2.kernel"] == (256, 256, 5, 5)


class TestForward:
    def test_shape_trace_full_size(self):
        """40 -> 8 -> 2 -> 1 spectral bins with 512 frames kept throughout (conv block only)."""
        cfg = ModelConfig(n_classes=2, F=2, H=2)
        p = {k: ad.Tensor(v) for k, v in init_params(cfg).weights.items()}
        h = ad.Tensor(np.random.default_rng(0).normal(size=(1, 1, 40, 512)))
        bufs = init_params(cfg).buffers
        trace = []
        for i, k in enumerate(cfg.pool_sizes, 1):
            h = ad.conv2d_same(h, p[f"conv{i}.kernel"], p[f"conv{i}.bias"])
            h = ad.batchnorm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], bufs[f"bn{i}"], "train", axis=1)
            h = ad.maxpool_spectral(ad.relu(h), k)
            trace.append(h.shape[2:])
        assert trace == [(8, 512), (2, 512), (1, 512)]

    def test_output_range(self):
        cfg = _small_cfg()
        model = CRNN(cfg, seed=1)
        x = np.random.default_rng(1).normal(size=(2, 1, 40, 32)) * 5
        out = model.forward(x, mode="train").data
        assert out.shape == (2, 32, 3, 3)
        assert np.all((out >= 0) & (out <= 1))
        pred = model.predict(x)
        assert pred.shape == (2, 32, 3, 3) and np.all((pred >= 0) & (pred <= 1))

    def test_conv_output_layout(self):
        cfg = _small_cfg()
        params = init_params(cfg)
        p = {k: ad.Tensor(v) for k, v in params.weights.items()}
        X = conv_block_forward(np.zeros((3, 1, 40, 32)), p, params.buffers, cfg, "train")
        assert X.shape == (3, 32, 8)

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeMismatch):
            CRNN(_small_cfg()).forward(np.zeros((1, 1, 40, 31)), mode="train")

    def test_infer_before_training(self):
        from mlmtsed.errors import NoRunningStats

        with pytest.raises(NoRunningStats):
            CRNN(_small_cfg()).predict(np.zeros((1, 1, 40, 32)))

    def test_bigru_matches_reference_loop(self):
        rng = np.random.default_rng(2)
        H, F = 3, 4
        p = {
            "gru_fwd.W": rng.normal(size=(F, 3 * H)), "gru_fwd.U": rng.normal(size=(H, 3 * H)),
            "gru_fwd.b": rng.normal(size=3 * H), "gru_bwd.W": rng.normal(size=(F, 3 * H)),
            "gru_bwd.U": rng.normal(size=(H, 3 * H)), "gru_bwd.b": rng.normal(size=3 * H),
            "W_z": rng.normal(size=(2 * H, 2 * H)), "b_z": rng.normal(size=2 * H),
        }
        X = rng.normal(size=(1, 5, F))
        Z = bigru_forward(ad.Tensor(X), {k: ad.Tensor(v) for k, v in p.items()}, H).data
        hf, hb = np.zeros(H), np.zeros(H)
        fwd, bwd = [], [None] * 5
        for t in range(5):
            hf = ad_gru_reference(X[0, t], hf, p["gru_fwd.W"], p["gru_fwd.U"], p["gru_fwd.b"])
            fwd.append(hf)
        for t in range(4, -1, -1):
            hb = ad_gru_reference(X[0, t], hb, p["gru_bwd.W"], p["gru_bwd.U"], p["gru_bwd.b"])
            bwd[t] = hb
        expected = np.stack([np.concatenate([bwd[t], fwd[t]]) @ p["W_z"] + p["b_z"] for t in range(5)])
        np.testing.assert_allclose(Z[0], expected, rtol=1e-12)

    def test_deterministic_init(self):
        a, b = init_params(TINY, seed=3), init_params(TINY, seed=3)
        for k in a.weights:
            np.testing.assert_array_equal(a.weights[k], b.weights[k])


class TestCheckpoint:
    def _ckpt(self):
        model = CRNN(TINY, seed=4)
        _trained_buffers(model, np.random.default_rng(4).normal(size=(2, 1, 10, 8)))
        return Checkpoint(
            TINY, model.params, Standardizer(np.arange(10.0), np.ones(10)), {"alpha": [0.5, 0.5]}, ["a", "b"], {"epoch": 1}
        )

    def test_round_trip_bit_exact(self, tmp_path):
        ck = self._ckpt()
        save_checkpoint(ck, tmp_path / "m.paed")
        back = load_checkpoint(tmp_path / "m.paed", expect=TINY)
        for k, v in ck.params.weights.items():
            assert back.params.weights[k].tobytes() == v.tobytes()
        for k, b in ck.params.buffers.items():
            assert back.params.buffers[k].mean.tobytes() == b.mean.tobytes()
            assert back.params.buffers[k].count == b.count
        assert back.thresholds == ck.thresholds and back.class_names == ["a", "b"]
        x = np.random.default_rng(5).normal(size=(1, 1, 10, 8))
        np.testing.assert_array_equal(CRNN(TINY, ck.params).predict(x), CRNN(TINY, back.params).predict(x))
        assert checkpoint_bytes(back) == checkpoint_bytes(ck)

    def test_magic_and_version(self, tmp_path):
        blob = bytearray(checkpoint_bytes(self._ckpt()))
        assert blob[:4] == b"PAED" and struct.unpack("<I", blob[4:8]) == (1,)
        (tmp_path / "bad.paed").write_bytes(b"XXXX" + bytes(blob[4:]))
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / "bad.paed")
        blob[4:8] = struct.pack("<I", 99)
        (tmp_path / "v.paed").write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "v.paed")

    def test_truncated_or_flipped(self, tmp_path):
        blob = bytearray(checkpoint_bytes(self._ckpt()))
        (tmp_path / "t.paed").write_bytes(bytes(blob[:-50]))
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / "t.paed")
        blob[-20] ^= 0xFF
        (tmp_path / "f.paed").write_bytes(bytes(blob))
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / "f.paed")

    def test_config_mismatch(self, tmp_path):
        save_checkpoint(self._ckpt(), tmp_path / "m.paed")
        with pytest.raises(ConfigMismatch):
            load_checkpoint(tmp_path / "m.paed", expect=dataclasses.replace(TINY, H=5))

    def test_missing(self, tmp_path):
        with pytest.raises(MissingInput):
            load_checkpoint(tmp_path / "none.paed")
