"""Acoustic front-end: PCM16 WAV decoding, log mel filterbanks, splicing.

Also owns the on-disk feature archive ("FVEC") and the utterance manifest,
which the synthetic corpus generator reuses.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, SegmentTooShortError

LOG_FLOOR = 1e-10
FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # [time, dim]
    frame_shift_ms: float = 10.0

    @property
    def dim(self):
        return self.frames.shape[1]

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class FbankConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    preemph: float = 0.97
    num_mel_bins: int = 40
    low_freq: float = 20.0
    high_freq: float | None = None  # None means Nyquist
    log_floor: float = LOG_FLOOR


# ----------------------------------------------------------------------------
# WAV
# ----------------------------------------------------------------------------

def read_wav(path):
    """Decode a mono 16-bit PCM RIFF/WAVE file; samples are scaled by 1/32768."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError("truncated RIFF header", len(data))
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file", 0)
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise FormatError("truncated fmt chunk", body)
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag != 1:
                raise FormatError(f"unsupported format tag {tag}, only PCM (1) is accepted", body)
            if channels != 1:
                raise FormatError(f"expected mono audio, found {channels} channels", body + 2)
            if bits != 16:
                raise FormatError(f"expected 16-bit samples, found {bits}", body + 14)
            fmt = rate
        elif cid == b"data":
            if fmt is None:
                raise FormatError("data chunk before fmt chunk", pos)
            if body + size > len(data) or size % 2:
                raise FormatError(f"truncated data chunk: declared {size} bytes", len(data))
            pcm = np.frombuffer(data, dtype="<i2", count=size // 2, offset=body)
            return Waveform(pcm.astype(np.float64) / 32768.0, fmt)
        pos = body + size + (size & 1)
    if fmt is None:
        raise FormatError("missing fmt chunk", pos)
    raise FormatError("missing data chunk", pos)


def write_wav(path, waveform):
    pcm = np.clip(np.round(np.asarray(waveform.samples) * 32768.0), -32768, 32767).astype("<i2")
    raw = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(raw)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, waveform.sample_rate,
                                waveform.sample_rate * 2, 2, 16)
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(raw)) + raw)


# ----------------------------------------------------------------------------
# Fbank
# ----------------------------------------------------------------------------

def mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def inverse_mel(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


SUPPORTED_RATES = {8000: 256, 16000: 512}  # sample rate -> FFT size


def fft_size(sample_rate):
    if sample_rate not in SUPPORTED_RATES:
        raise ValueError(f"unsupported sample rate {sample_rate} Hz; expected one of {sorted(SUPPORTED_RATES)}")
    return SUPPORTED_RATES[sample_rate]


def mel_filterbank(sample_rate, nfft, cfg=FbankConfig()):
    """Triangular filters (equal width on the mel axis) as ``[num_mel_bins, nfft // 2 + 1]``."""
    high = cfg.high_freq or sample_rate / 2.0
    edges = np.linspace(mel(cfg.low_freq), mel(high), cfg.num_mel_bins + 2)
    bin_mel = mel(np.arange(nfft // 2 + 1) * sample_rate / nfft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.clip(np.minimum(up, down), 0.0, None)


def mel_center_frequencies(sample_rate, cfg=FbankConfig()):
    high = cfg.high_freq or sample_rate / 2.0
    edges = np.linspace(mel(cfg.low_freq), mel(high), cfg.num_mel_bins + 2)
    return inverse_mel(edges[1:-1])


def frame_signal(samples, frame_len, shift):
    n = len(samples)
    if n < frame_len:
        raise SegmentTooShortError(f"insufficient samples: {n} < one frame of {frame_len}")
    count = 1 + (n - frame_len) // shift
    idx = np.arange(frame_len)[None, :] + shift * np.arange(count)[:, None]
    return samples[idx]


def fbank(w, cfg=FbankConfig()):
    sr = w.sample_rate
    frame_len = int(round(sr * cfg.frame_length_ms / 1000.0))
    shift = int(round(sr * cfg.frame_shift_ms / 1000.0))
    frames = frame_signal(np.asarray(w.samples, dtype=np.float64), frame_len, shift)
    # pre-emphasis inside each frame keeps frames independent of their neighbours
    frames = np.concatenate(
        [frames[:, :1] * (1.0 - cfg.preemph), frames[:, 1:] - cfg.preemph * frames[:, :-1]], axis=1)
    frames = frames * np.hamming(frame_len)
    nfft = fft_size(sr)
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    energies = power @ mel_filterbank(sr, nfft, cfg).T
    return FeatureMatrix(np.log(np.maximum(energies, cfg.log_floor)), cfg.frame_shift_ms)


def splice_frames(x, left=4, right=4):
    """``[T, d] -> [T - left - right, (left + right + 1) * d]`` of stacked neighbours."""
    width = left + right + 1
    T = x.shape[-2]
    if T < width:
        raise SegmentTooShortError(f"segment shorter than splice window: {T} < {width}")
    Tp = T - width + 1
    return np.concatenate([x[..., i:i + Tp, :] for i in range(width)], axis=-1)


def splice(f, left=4, right=4):
    return FeatureMatrix(splice_frames(f.frames, left, right), f.frame_shift_ms)


def mean_normalize(f):
    x = f.frames
    return FeatureMatrix(x - x.mean(axis=0, keepdims=True), f.frame_shift_ms)


# ----------------------------------------------------------------------------
# FVEC archive and manifest
# ----------------------------------------------------------------------------

def write_fvec(path, frames):
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise DimensionError(f"FVEC archive holds a matrix, got shape {frames.shape}")
    rows, cols = frames.shape
    Path(path).write_bytes(FVEC_MAGIC + struct.pack("<III", FVEC_VERSION, rows, cols) + frames.tobytes())


def read_fvec(path):
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError("truncated FVEC header", len(data))
    if data[:4] != FVEC_MAGIC:
        raise FormatError("bad FVEC magic", 0)
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != FVEC_VERSION:
        raise FormatError(f"unsupported FVEC version {version}", 4)
    need = 16 + 4 * rows * cols
    if len(data) != need:
        raise FormatError(f"FVEC payload size mismatch: expected {need} bytes, found {len(data)}",
                          min(len(data), need))
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, cols).copy()


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    speaker_id: str
    path: str


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.utt_id} {e.speaker_id} {e.path}\n")


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'utt_id speaker_id path'")
            entries.append(ManifestEntry(*parts))
    return entries


def load_utterances(manifest_path):
    """Read every archive listed in a manifest; paths are relative to the manifest."""
    root = Path(manifest_path).parent
    entries = read_manifest(manifest_path)
    return entries, [read_fvec(root / e.path) for e in entries]
