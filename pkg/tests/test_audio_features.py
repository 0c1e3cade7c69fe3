import wave

import numpy as np
import pytest

from mlmtsed.audio_features import (
    LogMelSpectrogram,
    SpectrogramConfig,
    Waveform,
    build_mel_filterbank,
    compute_logmel,
    fit_standardizer,
    hz_to_mel,
    load_feature_cache,
    load_wav,
    save_feature_cache,
)
from mlmtsed.errors import EmptyCorpus, InvalidConfig, MissingInput, TooShort, UnsupportedFormat

SR = 44100


def _write_pcm16(path, samples, rate=SR):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(samples, dtype="<i2").tobytes())


@pytest.fixture(scope="module")
def fb():
    return build_mel_filterbank(SpectrogramConfig(), SR)


class TestLoadWav:
    def test_silence(self, tmp_path):
        _write_pcm16(tmp_path / "s.wav", np.zeros(SR))
        w = load_wav(tmp_path / "s.wav")
        assert w.sample_rate == SR
        assert len(w.samples) == SR
        assert np.all(w.samples == 0.0)

    def test_wrong_rate(self, tmp_path):
        _write_pcm16(tmp_path / "s.wav", np.zeros(16000), rate=16000)
        with pytest.raises(UnsupportedFormat):
            load_wav(tmp_path / "s.wav")

    def test_full_scale_square(self, tmp_path):
        sq = np.where(np.arange(SR) % 100 < 50, 32767, -32768)
        _write_pcm16(tmp_path / "sq.wav", sq)
        w = load_wav(tmp_path / "sq.wav")
        assert set(np.unique(w.samples)) == {-1.0, 32767 / 32768}

    def test_missing(self, tmp_path):
        with pytest.raises(MissingInput):
            load_wav(tmp_path / "nope.wav")

    def test_not_a_wav(self, tmp_path):
        (tmp_path / "x.wav").write_bytes(b"definitely not riff")
        with pytest.raises(UnsupportedFormat):
            load_wav(tmp_path / "x.wav")


class TestFilterbank:
    def test_mel_formula(self):
        assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
        assert hz_to_mel(0.0) == 0.0

    def test_centres(self, fb):
        c = fb.center_freqs_hz
        assert len(c) == 40
        assert np.all(np.diff(c) > 0)
        assert c[0] > 50 and c[-1] < 22050

    def test_rows_unit_peak(self, fb):
        w = fb.weights
        assert w.shape == (40, 1025)
        assert np.all(w >= 0)
        assert np.all(w.sum(axis=1) > 0)
        np.testing.assert_array_equal(w.max(axis=1), 1.0)
        assert np.all((w == 1.0).sum(axis=1) == 1)

    def test_coverage(self, fb):
        freqs = np.arange(1025) * SR / 2048
        inside = (freqs > 50) & (freqs < 22050)
        assert np.all(fb.weights[:, inside].sum(axis=0) > 0)

    def test_collapsed_centres_rejected(self):
        with pytest.raises(InvalidConfig):
            build_mel_filterbank(SpectrogramConfig(fmin_hz=50, fmax_hz=300), SR)

    def test_bad_overlap_rejected(self):
        with pytest.raises(InvalidConfig):
            build_mel_filterbank(SpectrogramConfig(hop_ms=10.0), SR)


class TestLogMel:
    def test_frame_count(self, fb):
        spec = compute_logmel(Waveform(np.zeros(SR)), SpectrogramConfig(), fb)
        # floor((44100 - 1764) / 882) + 1
        assert spec.values.shape == (40, 49)

    def test_silence_hits_floor(self, fb):
        spec = compute_logmel(Waveform(np.zeros(SR)), SpectrogramConfig(), fb)
        np.testing.assert_array_equal(spec.values, np.log(1e-10))

    def test_tone_peaks_at_nearest_filter(self, fb):
        t = np.arange(SR) / SR
        spec = compute_logmel(Waveform(0.5 * np.sin(2 * np.pi * 1000 * t)), SpectrogramConfig(), fb)
        expected = np.argmin(np.abs(fb.center_freqs_hz - 1000.0))
        assert np.all(spec.values.argmax(axis=0) == expected)

    def test_too_short(self, fb):
        with pytest.raises(TooShort):
            compute_logmel(Waveform(np.zeros(1000)), SpectrogramConfig(), fb)

    def test_deterministic(self, fb):
        x = np.random.default_rng(3).normal(size=SR // 2) * 0.1
        a = compute_logmel(Waveform(x), SpectrogramConfig(), fb).values
        b = compute_logmel(Waveform(x.copy()), SpectrogramConfig(), fb).values
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("k", [1.5, 2.0, 10.0])
    def test_scaling_never_decreases(self, fb, k):
        x = np.random.default_rng(4).normal(size=SR // 2) * 0.05
        a = compute_logmel(Waveform(x), SpectrogramConfig(), fb).values
        b = compute_logmel(Waveform(k * x), SpectrogramConfig(), fb).values
        assert np.all(b >= a)
        assert np.all(np.isfinite(a)) and np.all(a >= np.log(1e-10))


class TestStandardizer:
    def test_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        specs = [LogMelSpectrogram(rng.normal(3, 2, size=(40, n))) for n in (30, 50)]
        st = fit_standardizer(specs)
        z = np.concatenate([st.apply(s).values for s in specs], axis=1)
        np.testing.assert_allclose(z.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(z.std(axis=1), 1.0, atol=1e-6)

    def test_constant_bin(self):
        v = np.ones((2, 10))
        v[1] = np.arange(10)
        st = fit_standardizer([v])
        assert st.std[0] == 1e-6
        np.testing.assert_array_equal(st.apply(v)[0], 0.0)

    def test_hand_values(self):
        st = fit_standardizer([np.array([[1.0]]), np.array([[3.0]])])
        assert st.mean[0] == 2.0
        assert st.std[0] == 1.0

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            fit_standardizer([])
        with pytest.raises(EmptyCorpus):
            fit_standardizer([np.zeros((40, 1))])


def test_feature_cache_round_trip(tmp_path):
    vals = np.random.default_rng(1).normal(size=(40, 17))
    save_feature_cache(tmp_path / "r.lmel", LogMelSpectrogram(vals))
    blob = (tmp_path / "r.lmel").read_bytes()
    assert blob[:4] == b"LMEL" and len(blob) == 16 + 4 * 40 * 17
    # frame-major: the first 40 floats are frame 0
    np.testing.assert_array_equal(np.frombuffer(blob[16:176], dtype="<f4"), vals[:, 0].astype("<f4"))
    back = load_feature_cache(tmp_path / "r.lmel")
    np.testing.assert_array_equal(back.values, vals.astype(np.float32).astype(np.float64))
