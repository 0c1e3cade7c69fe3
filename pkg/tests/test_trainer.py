import numpy as np
import pytest

from mlmtsed.annotation import EventInstance, RecordingAnnotation
from mlmtsed.audio_features import LogMelSpectrogram, fit_standardizer
from mlmtsed.dataset import Recording, build_segments, segment_input
from mlmtsed.errors import EmptyDataset, MissingGradient, NumericError, TooFewFolds
from mlmtsed.model import checkpoint_bytes
from mlmtsed.trainer import AdamState, TrainConfig, adam_step, clip_global_norm, loso_folds, train, train_cv, write_loss_log

from oracles import TINY


def _recordings(n_train=3, n_val=1, n_frames=24, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n_train + n_val):
        feats = rng.normal(size=(TINY.M, n_frames))
        on = int(rng.integers(2, 10))
        feats[:5, on : on + 6] += 3.0  # a visible "event" in the low bins
        ann = RecordingAnnotation(f"r{i}", [EventInstance(0, on * 0.02, (on + 5) * 0.02)])
        recs.append(Recording(f"r{i}", LogMelSpectrogram(feats), ann, "train" if i < n_train else "val"))
    return recs


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        st = AdamState()
        adam_step(p, {"w": np.zeros(2)}, st, TrainConfig())
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert st.step == 1

    def test_first_step_is_lr_sign(self):
        p = {"w": np.array([1.0, 1.0])}
        adam_step(p, {"w": np.array([0.3, -4.0])}, AdamState(), TrainConfig(lr=0.01))
        np.testing.assert_allclose(p["w"], [0.99, 1.01], rtol=1e-6)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig(lr=0.05)
        w = rng.normal(size=3)
        p, st = {"w": w.copy()}, AdamState()
        m = v = np.zeros(3)
        for t in range(1, 6):
            g = rng.normal(size=3)
            adam_step(p, {"w": g}, st, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - cfg.lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + cfg.eps)
        np.testing.assert_allclose(p["w"], w, rtol=1e-12)

    def test_missing_gradient(self):
        with pytest.raises(MissingGradient):
            adam_step({"w": np.zeros(2)}, {}, AdamState(), TrainConfig())

    def test_clip(self):
        g = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
        norm = clip_global_norm(g, 6.5)
        assert norm == 13.0
        assert np.sqrt(sum(np.sum(v**2) for v in g.values())) == pytest.approx(6.5)
        small = {"a": np.array([0.1])}
        clip_global_norm(small, 5.0)
        assert small["a"][0] == 0.1


class TestSegments:
    def test_zero_padding(self):
        seg = segment_input(np.ones((2, 5)), 3, 4)
        np.testing.assert_array_equal(seg, [[1, 1, 0, 0], [1, 1, 0, 0]])

    def test_build_shapes(self):
        recs = _recordings()
        st = fit_standardizer([r.features for r in recs])
        xs, ys = build_segments(recs, [("r0", 0), ("r1", 8)], st, 8, 1, 0.02)
        assert xs.shape == (2, 1, TINY.M, 8) and ys.shape == (2, 8, 1, 3)


class TestTrain:
    def _cfg(self, **kw):
        return TrainConfig(epochs=2, lr=3e-3, seed=1, segment_stride=4, **kw)

    def test_runs_and_logs(self, tmp_path):
        res = train(_recordings(), TINY, self._cfg(), ["a"])
        assert len(res.epoch_train_loss) == 2 and len(res.epoch_val_loss) == 2
        assert res.best.meta["epoch"] in (1, 2)
        assert res.best.standardizer is not None
        write_loss_log(tmp_path / "loss.csv", res.log_rows)
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,step,class_loss,dist_loss,conf_loss,total"
        assert any(",val," in ln for ln in lines)

    def test_loss_goes_down(self):
        res = train(_recordings(), TINY, TrainConfig(epochs=8, lr=1e-2, seed=0, segment_stride=2), ["a"])
        assert res.epoch_train_loss[-1] < res.epoch_train_loss[0]

    def test_deterministic(self):
        a = train(_recordings(), TINY, self._cfg(), ["a"])
        b = train(_recordings(), TINY, self._cfg(), ["a"])
        assert checkpoint_bytes(a.final) == checkpoint_bytes(b.final)
        assert repr(a.log_rows) == repr(b.log_rows)  # repr keeps NaN validation cells comparable

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
    def test_nan_guard(self):
        with pytest.raises(NumericError):
            train(_recordings(), TINY, TrainConfig(epochs=1, lr=1e300, segment_stride=4), ["a"])

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            train([r for r in _recordings() if r.split == "val"], TINY, self._cfg())

    def test_cv(self):
        recs = _recordings(n_train=2, n_val=0)
        assert loso_folds(recs) == [(["r1"], ["r0"]), (["r0"], ["r1"])]
        ckpts = train_cv(recs, TINY, TrainConfig(epochs=1, segment_stride=8), class_names=["a"])
        assert [c.meta["val_ids"] for c in ckpts] == [["r0"], ["r1"]]
        with pytest.raises(TooFewFolds):
            train_cv(_recordings(n_train=1, n_val=0), TINY, self._cfg())
