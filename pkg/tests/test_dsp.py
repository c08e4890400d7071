import numpy as np
import pytest
from scipy.io import wavfile

from fdylka.dsp import (
    CorpusStats,
    StatsAccumulator,
    Waveform,
    corpus_stats,
    hann_periodic,
    log_mel,
    mel_centers,
    mel_filterbank,
    normalize,
    read_feature,
    read_wav,
    resample,
    write_feature,
    write_wav,
)
from fdylka.errors import ConfigError, FormatError, InputError

SR = 16000


def dft_logmel_oracle(x, frames):
    """Direct DFT on selected frames and a loop-built HTK filterbank."""
    n_fft, hop = 2048, 160
    xp = np.pad(x, (1024, 1024), mode="reflect")
    n = np.arange(n_fft)
    win = 0.5 * (1 - np.cos(2 * np.pi * n / n_fft))
    k = np.arange(n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    imel = lambda m: 700 * (10 ** (m / 2595) - 1)
    edges = [imel(m) for m in np.linspace(mel(0.0), mel(8000.0), 130)]
    fb = np.zeros((128, n_fft // 2 + 1))
    for b in range(128):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        for j in k:
            f = j * SR / n_fft
            if lo <= f <= mid:
                fb[b, j] = (f - lo) / (mid - lo)
            elif mid < f <= hi:
                fb[b, j] = (hi - f) / (hi - mid)
    out = []
    for t in frames:
        spec = basis @ (xp[t * hop : t * hop + n_fft] * win)
        out.append(np.log(fb @ np.abs(spec) ** 2 + 1e-10))
    return np.array(out)


class TestLogMel:
    def test_shape_for_any_ten_second_input(self):
        rng = np.random.default_rng(0)
        assert log_mel(Waveform(rng.standard_normal(160000), SR)).shape == (1001, 128)

    def test_short_and_long_inputs_are_fitted(self):
        rng = np.random.default_rng(1)
        assert log_mel(Waveform(rng.standard_normal(1000), SR)).shape == (1001, 128)
        long = rng.standard_normal(200000)
        np.testing.assert_array_equal(log_mel(Waveform(long, SR)), log_mel(Waveform(long[:160000], SR)))

    def test_silence_is_log_floor(self):
        np.testing.assert_array_equal(log_mel(Waveform(np.zeros(160000), SR)), np.log(1e-10))

    def test_empty_input(self):
        with pytest.raises(InputError):
            log_mel(Waveform(np.zeros(0), SR))

    def test_matches_dft_oracle(self):
        x = np.random.default_rng(2).standard_normal(160000)
        frames = [0, 1, 500, 999, 1000]
        np.testing.assert_allclose(log_mel(Waveform(x, SR))[frames], dft_logmel_oracle(x, frames), rtol=1e-9)

    @pytest.mark.parametrize("band", [10, 40, 64, 100])
    def test_center_tone_argmax(self, band):
        f0 = mel_centers()[band]
        x = 0.5 * np.sin(2 * np.pi * f0 * np.arange(160000) / SR)
        frames = [3, 250, 700]
        got = log_mel(Waveform(x, SR))[frames].argmax(axis=1)
        ref = dft_logmel_oracle(x, frames).argmax(axis=1)
        np.testing.assert_array_equal(got, ref)
        assert np.all(np.abs(got - band) <= 1)

    def test_filterbank_unit_peaks(self):
        fb = mel_filterbank()
        assert fb.shape == (128, 1025)
        assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
        assert np.all(fb.max(axis=1) > 0.5)

    def test_periodic_window(self):
        w = hann_periodic(8)
        assert w[0] == 0.0 and w[4] == 1.0 and np.isclose(w[1], w[7])


class TestResample:
    def test_passthrough(self):
        w = Waveform(np.arange(10.0), SR)
        assert resample(w) is w

    def test_44k_length_and_tone(self):
        n = 44100 * 2
        x = np.sin(2 * np.pi * 1000 * np.arange(n) / 44100)
        y = resample(Waveform(x, 44100))
        assert y.sample_rate == SR and len(y.samples) == 32000
        spec = np.abs(np.fft.rfft(y.samples[1000:-1000]))
        peak = np.fft.rfftfreq(30000, 1 / SR)[spec.argmax()]
        assert abs(peak - 1000) < 2

    def test_unsupported_rate(self):
        with pytest.raises(ConfigError):
            Waveform(np.zeros(10), 22050)


class TestWav:
    def test_pcm16_round_trip(self, tmp_path):
        x = np.sin(np.linspace(0, 20, 1600)) * 0.5
        write_wav(tmp_path / "a.wav", x)
        w = read_wav(tmp_path / "a.wav")
        assert w.sample_rate == SR
        np.testing.assert_allclose(w.samples, x, atol=1 / 16000)

    def test_float_stereo_is_averaged(self, tmp_path):
        st = np.stack([np.full(100, 0.25), np.full(100, -0.75)], axis=1).astype(np.float32)
        wavfile.write(tmp_path / "s.wav", 44100, st)
        w = read_wav(tmp_path / "s.wav")
        np.testing.assert_allclose(w.samples, -0.25)

    def test_unsupported_format(self, tmp_path):
        wavfile.write(tmp_path / "i.wav", SR, np.zeros(10, dtype=np.int32))
        with pytest.raises(FormatError):
            read_wav(tmp_path / "i.wav")


class TestNormalization:
    def test_corpus_standardized(self):
        rng = np.random.default_rng(3)
        feats = [rng.normal(-5, 3, (1001, 128)) for _ in range(4)]
        stats = corpus_stats(feats)
        cells = np.concatenate([normalize(f, stats).ravel() for f in feats])
        assert abs(cells.mean()) < 1e-9 and abs(cells.std() - 1) < 1e-9

    def test_merge_equals_single_pass(self):
        rng = np.random.default_rng(4)
        feats = [rng.normal(2, 1 + i, (50, 8)) for i in range(5)]
        a = StatsAccumulator()
        for f in feats[:2]:
            a.add(f)
        b = StatsAccumulator()
        for f in feats[2:]:
            b.add(f)
        merged = a.merge(b).stats()
        direct = np.concatenate([f.ravel() for f in feats])
        np.testing.assert_allclose(merged.mean, direct.mean(), rtol=1e-12)
        np.testing.assert_allclose(merged.std, direct.std(), rtol=1e-12)
        assert merged.clip_count == 5

    def test_per_band(self):
        rng = np.random.default_rng(5)
        feats = [rng.normal(np.arange(8), 2, (100, 8)) for _ in range(3)]
        stats = corpus_stats(feats, per_band=True)
        out = np.concatenate([normalize(f, stats) for f in feats])
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=0), 1, atol=1e-12)
        again = CorpusStats.from_json(stats.to_json())
        np.testing.assert_allclose(again.std, stats.std)

    def test_degenerate_corpus(self):
        stats = corpus_stats([np.ones((10, 4))])
        with pytest.raises(InputError, match="degenerate"):
            normalize(np.ones((10, 4)), stats)


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        v = np.random.default_rng(6).standard_normal((1001, 128))
        write_feature(tmp_path / "f.lmel", v)
        np.testing.assert_array_equal(read_feature(tmp_path / "f.lmel"), v.astype(np.float32))

    def test_corrupt(self, tmp_path):
        (tmp_path / "f.lmel").write_bytes(b"LMEL" + bytes(8) + bytes(3))
        with pytest.raises(FormatError):
            read_feature(tmp_path / "f.lmel")
