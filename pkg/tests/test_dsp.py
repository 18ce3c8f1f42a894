import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fullinfo import dsp
from fullinfo.errors import FormatError, SegmentTooShortError

from oracles import dft_power, splice_loops


def _wav_bytes(samples, rate=8000, channels=1, bits=16, tag=1):
    raw = np.asarray(samples, dtype="<i2").tobytes()
    fmt = struct.pack("<IHHIIHH", 16, tag, channels, rate, rate * channels * bits // 8,
                      channels * bits // 8, bits)
    return b"RIFF" + struct.pack("<I", 36 + len(raw)) + b"WAVE" + b"fmt " + fmt + \
        b"data" + struct.pack("<I", len(raw)) + raw


class TestWav:
    def test_zero_file(self, tmp_path):
        p = tmp_path / "z.wav"
        p.write_bytes(_wav_bytes(np.zeros(100)))
        w = dsp.read_wav(p)
        assert w.sample_rate == 8000
        np.testing.assert_array_equal(w.samples, np.zeros(100))

    def test_one_second_8k(self, tmp_path):
        p = tmp_path / "s.wav"
        p.write_bytes(_wav_bytes(np.arange(8000) % 200 - 100))
        assert len(dsp.read_wav(p).samples) == 8000

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        pcm = rng.integers(-32768, 32768, size=4000)
        w = dsp.Waveform(pcm / 32768.0, 16000)
        dsp.write_wav(tmp_path / "r.wav", w)
        back = dsp.read_wav(tmp_path / "r.wav")
        assert back.sample_rate == 16000
        np.testing.assert_array_equal(back.samples, w.samples)

    def test_scaling(self, tmp_path):
        p = tmp_path / "a.wav"
        p.write_bytes(_wav_bytes([16384, -32768]))
        np.testing.assert_array_equal(dsp.read_wav(p).samples, [0.5, -1.0])

    @pytest.mark.parametrize("kwargs,match", [
        ({"tag": 3}, "format tag"),
        ({"channels": 2}, "mono"),
        ({"bits": 8}, "16-bit"),
    ])
    def test_unsupported_formats(self, tmp_path, kwargs, match):
        p = tmp_path / "bad.wav"
        p.write_bytes(_wav_bytes(np.zeros(10), **kwargs))
        with pytest.raises(FormatError, match=match) as info:
            dsp.read_wav(p)
        assert "byte offset" in str(info.value)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.wav"
        p.write_bytes(_wav_bytes(np.zeros(100))[:-40])
        with pytest.raises(FormatError, match="truncated"):
            dsp.read_wav(p)

    def test_not_riff(self, tmp_path):
        p = tmp_path / "n.wav"
        p.write_bytes(b"OggS" + bytes(40))
        with pytest.raises(FormatError):
            dsp.read_wav(p)


class TestFbank:
    def test_zero_signal_hits_floor(self):
        f = dsp.fbank(dsp.Waveform(np.zeros(8000), 8000))
        np.testing.assert_allclose(f.frames, np.log(1e-10))

    def test_one_second_frame_count(self):
        f = dsp.fbank(dsp.Waveform(np.random.default_rng(0).standard_normal(8000) * 0.1, 8000))
        assert f.frames.shape == (98, 40)

    def test_frame_count_sweep(self):
        frame_len, shift = 200, 80
        rng = np.random.default_rng(1)
        for n in range(frame_len, frame_len + 5000, 37):
            frames = dsp.frame_signal(rng.standard_normal(n), frame_len, shift)
            assert len(frames) == 1 + (n - frame_len) // shift

    def test_insufficient_samples(self):
        with pytest.raises(SegmentTooShortError, match="insufficient samples"):
            dsp.fbank(dsp.Waveform(np.zeros(150), 8000))

    def test_fft_sizes(self):
        assert dsp.fft_size(8000) == 256
        assert dsp.fft_size(16000) == 512
        with pytest.raises(ValueError):
            dsp.fft_size(44100)

    def test_mel_scale_round_trip(self):
        hz = np.linspace(0, 8000, 101)
        np.testing.assert_allclose(dsp.inverse_mel(dsp.mel(hz)), hz, atol=1e-9)
        assert dsp.mel(700.0) == pytest.approx(1127.0 * np.log(2.0))

    def test_filterbank_shape_and_peaks(self):
        fb = dsp.mel_filterbank(8000, 256)
        assert fb.shape == (40, 129)
        assert np.all(fb >= 0) and np.all(fb <= 1)
        assert np.all(np.argmax(fb, axis=1)[1:] >= np.argmax(fb, axis=1)[:-1])

    @pytest.mark.parametrize("rate", [8000, 16000])
    @pytest.mark.parametrize("band", [5, 12, 20, 31, 38])
    def test_sine_peak_band(self, rate, band):
        fc = dsp.mel_center_frequencies(rate)[band]
        t = np.arange(rate // 4) / rate
        w = dsp.Waveform(0.5 * np.sin(2 * np.pi * fc * t), rate)
        frames = dsp.fbank(w).frames
        assert np.all(np.argmax(frames, axis=1) == band)

        # independent route: direct DFT of one frame, same windowing recipe
        frame_len = int(0.025 * rate)
        x = w.samples[:frame_len].copy()
        x = np.concatenate([[x[0] * 0.03], x[1:] - 0.97 * x[:-1]])
        x = x * (0.54 - 0.46 * np.cos(2 * np.pi * np.arange(frame_len) / (frame_len - 1)))
        power = dft_power(x, dsp.fft_size(rate))
        energies = dsp.mel_filterbank(rate, dsp.fft_size(rate)) @ power
        assert np.argmax(energies) == band
        np.testing.assert_allclose(frames[0], np.log(np.maximum(energies, 1e-10)), rtol=1e-9, atol=1e-9)

    def test_shift_covariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(4000) * 0.1
        a = dsp.fbank(dsp.Waveform(x, 8000)).frames
        b = dsp.fbank(dsp.Waveform(x[80:], 8000)).frames
        assert len(b) == len(a) - 1
        np.testing.assert_allclose(b, a[1:], atol=1e-6)


class TestSplice:
    def test_zero_context_is_identity(self):
        x = np.random.default_rng(0).standard_normal((7, 3))
        np.testing.assert_array_equal(dsp.splice_frames(x, 0, 0), x)

    def test_nine_frames_give_one(self):
        out = dsp.splice_frames(np.zeros((9, 40)), 4, 4)
        assert out.shape == (1, 360)

    def test_index_map(self):
        x = np.random.default_rng(1).standard_normal((20, 40))
        out = dsp.splice_frames(x, 4, 4)
        np.testing.assert_array_equal(out, splice_loops(x, 4, 4))
        for t in range(out.shape[0]):
            for k in range(9):
                np.testing.assert_array_equal(out[t, 40 * k:40 * (k + 1)], x[t + k])

    def test_too_short(self):
        with pytest.raises(SegmentTooShortError, match="splice window"):
            dsp.splice_frames(np.zeros((8, 40)), 4, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(160, 4000))
    def test_splice_of_fbank_is_360(self, n):
        f = dsp.fbank(dsp.Waveform(np.random.default_rng(n).standard_normal(n + 720) * 0.1, 8000))
        assert dsp.splice(f).dim == 360


class TestMeanNormalize:
    def test_constant_to_zero(self):
        out = dsp.mean_normalize(dsp.FeatureMatrix(np.full((5, 4), 3.0)))
        np.testing.assert_array_equal(out.frames, 0)

    def test_zero_mean_unchanged(self):
        x = np.random.default_rng(0).standard_normal((10, 4))
        x -= x.mean(axis=0)
        np.testing.assert_allclose(dsp.mean_normalize(dsp.FeatureMatrix(x)).frames, x, atol=1e-12)

    def test_column_means_vanish(self):
        x = np.random.default_rng(1).standard_normal((50, 6)) + 10
        out = dsp.mean_normalize(dsp.FeatureMatrix(x)).frames
        assert np.abs([sum(out[:, j]) / 50 for j in range(6)]).max() < 1e-9


class TestArchive:
    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((13, 40)).astype(np.float32)
        dsp.write_fvec(tmp_path / "a.fvec", x)
        np.testing.assert_array_equal(dsp.read_fvec(tmp_path / "a.fvec"), x)

    def test_layout(self, tmp_path):
        dsp.write_fvec(tmp_path / "a.fvec", np.array([[1.0, 2.0]]))
        data = (tmp_path / "a.fvec").read_bytes()
        assert data[:4] == b"FVEC"
        assert struct.unpack("<III", data[4:16]) == (1, 1, 2)
        assert struct.unpack("<2f", data[16:]) == (1.0, 2.0)

    def test_truncated_payload(self, tmp_path):
        dsp.write_fvec(tmp_path / "a.fvec", np.ones((4, 4)))
        p = tmp_path / "a.fvec"
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError, match="size mismatch"):
            dsp.read_fvec(p)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.fvec").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(FormatError, match="magic"):
            dsp.read_fvec(tmp_path / "b.fvec")

    def test_manifest_relative_paths(self, tmp_path):
        sub = tmp_path / "fvec"
        sub.mkdir()
        dsp.write_fvec(sub / "u1.fvec", np.ones((3, 2)))
        dsp.write_manifest(tmp_path / "m.txt", [dsp.ManifestEntry("u1", "spkA", "fvec/u1.fvec")])
        entries, frames = dsp.load_utterances(tmp_path / "m.txt")
        assert entries == [dsp.ManifestEntry("u1", "spkA", "fvec/u1.fvec")]
        np.testing.assert_array_equal(frames[0], np.ones((3, 2)))

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "m.txt").write_text("u1 spkA\n")
        with pytest.raises(FormatError):
            dsp.read_manifest(tmp_path / "m.txt")
