"""Convolutional + time-delay feature net with a speaker classifier head.

Layout (defaults in parentheses)::

    raw Fbank [T, 40]
      -> splice +-4, stacked as 9 input channels on the (time, freq) plane
      -> conv(32, 4x9) -> relu -> freq max-pool 2
      -> conv(64, 3x5) -> relu -> freq max-pool 2
      -> flatten (filters x freq)
      -> TD {-2, 0, +2} width 128 -> relu
      -> TD {-1, 0, +1} width 128 -> relu
      -> affine to D -> length normalisation        (frame-level speaker feature)
      -> cosine_scale * W_cls f + b_cls             (classifier logits)

All framing is valid (no padding), so a window of exactly
``receptive_field(cfg)`` raw frames yields one feature; 20 with the defaults.
"""

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dsp import FeatureMatrix
from .errors import (
    ChecksumError,
    ConfigError,
    ConfigMismatchError,
    DimensionError,
    FormatError,
    SegmentTooShortError,
    VersionError,
)

CLASSIFIER = ("cls.W", "cls.b")
MODEL_MAGIC = b"CTDN"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: tuple  # (time, freq)
    pool: int = 1


@dataclass(frozen=True)
class TdnnSpec:
    offsets: tuple
    width: int


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 40
    splice_left: int = 4
    splice_right: int = 4
    conv: tuple = (ConvSpec(32, (4, 9), 2), ConvSpec(64, (3, 5), 2))
    tdnn: tuple = (TdnnSpec((-2, 0, 2), 128), TdnnSpec((-1, 0, 1), 128))
    feature_dim: int = 64
    num_speakers: int = 2
    cosine_scale: float = 1.0

    def __post_init__(self):
        # normalise list-valued fields coming from JSON
        object.__setattr__(self, "conv", tuple(
            c if isinstance(c, ConvSpec) else ConvSpec(c["filters"], tuple(c["kernel"]), c.get("pool", 1))
            for c in self.conv))
        object.__setattr__(self, "tdnn", tuple(
            t if isinstance(t, TdnnSpec) else TdnnSpec(tuple(t["offsets"]), t["width"])
            for t in self.tdnn))
        object.__setattr__(self, "conv", tuple(replace(c, kernel=tuple(c.kernel)) for c in self.conv))
        object.__setattr__(self, "tdnn", tuple(replace(t, offsets=tuple(sorted(t.offsets))) for t in self.tdnn))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_speakers(self, num_speakers):
        return replace(self, num_speakers=num_speakers)


def receptive_field(cfg):
    """Raw frames consumed per emitted feature."""
    return (1 + cfg.splice_left + cfg.splice_right
            + sum(c.kernel[0] - 1 for c in cfg.conv)
            + sum(T.tdnn_span(t.offsets) for t in cfg.tdnn))


def layer_shapes(cfg):
    """Parameter shapes, in forward order."""
    shapes = {}
    chans = cfg.splice_left + cfg.splice_right + 1
    freq = cfg.input_dim
    for i, c in enumerate(cfg.conv, 1):
        kt, kf = c.kernel
        if kf > freq:
            raise ConfigError(f"conv{i}: kernel freq extent {kf} exceeds input extent {freq}")
        freq = freq - kf + 1
        if freq % c.pool:
            raise ConfigError(f"conv{i}: output freq extent {freq} not divisible by pool {c.pool}")
        freq //= c.pool
        shapes[f"conv{i}.K"] = (c.filters, chans, kt, kf)
        shapes[f"conv{i}.b"] = (c.filters,)
        chans = c.filters
    din = chans * freq
    for i, t in enumerate(cfg.tdnn, 1):
        shapes[f"tdnn{i}.W"] = (t.width, len(t.offsets) * din)
        shapes[f"tdnn{i}.b"] = (t.width,)
        din = t.width
    shapes["feat.W"] = (cfg.feature_dim, din)
    shapes["feat.b"] = (cfg.feature_dim,)
    shapes["cls.W"] = (cfg.num_speakers, cfg.feature_dim)
    shapes["cls.b"] = (cfg.num_speakers,)
    return shapes


def init_params(cfg, seed, dtype=np.float32):
    """He-scaled uniform weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            a = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-a, a, size=shape).astype(dtype)
    return params


def params_checksum(params):
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def copy_params(params):
    return {k: v.copy() for k, v in params.items()}


# ----------------------------------------------------------------------------
# forward / backward
# ----------------------------------------------------------------------------

def fold_splice_kernel(K):
    """``K[nf, C, kt, kf]`` over C spliced frames -> ``[nf, 1, C + kt - 1, kf]`` on raw frames."""
    nf, C, kt, kf = K.shape
    folded = np.zeros((nf, 1, C + kt - 1, kf), dtype=K.dtype)
    for c in range(C):
        folded[:, 0, c:c + kt] += K[:, c]
    return folded


def unfold_splice_grad(dfolded, channels):
    """Gradient w.r.t. the spliced-channel kernel from the folded kernel's gradient."""
    kt = dfolded.shape[2] - channels + 1
    return np.stack([dfolded[:, 0, c:c + kt] for c in range(channels)], axis=1)


def _as_windows(window):
    x = window.frames if isinstance(window, FeatureMatrix) else np.asarray(window)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _forward(params, cfg, x, keep_cache):
    """Run the feature net on ``x[B, T, input_dim]``; returns (features, cache)."""
    rf = receptive_field(cfg)
    if x.shape[1] < rf:
        raise SegmentTooShortError(f"segment shorter than receptive field: {x.shape[1]} frames, need {rf}")
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise DimensionError(f"expected windows of {cfg.input_dim}-dim frames, got shape {tuple(x.shape)}")
    cache = {}
    B = x.shape[0]
    for i, c in enumerate(cfg.conv, 1):
        K = params[f"conv{i}.K"]
        if i == 1:
            # Splicing stacks frames t..t+L+R as channels; a conv over those
            # channels equals a single-channel conv with the folded kernel.
            h = x[:, None]
            K = fold_splice_kernel(K)
        kt, kf = K.shape[2:]
        cols = T.im2col(h, kt, kf)
        z = T.conv2d_forward(h, K, params[f"conv{i}.b"], cols=cols)
        a = T.relu_forward(z)
        if keep_cache:
            cache[f"conv{i}"] = (h, K, cols, z, a)
        h = T.maxpool_freq_forward(a, c.pool)
    pooled_shape = h.shape
    h = h.transpose(0, 2, 1, 3).reshape(B, h.shape[2], -1)  # [B, T, filters * freq]
    if keep_cache:
        cache["flatten"] = pooled_shape
    for i, t in enumerate(cfg.tdnn, 1):
        z = T.tdnn_forward(h, t.offsets, params[f"tdnn{i}.W"], params[f"tdnn{i}.b"])
        if keep_cache:
            cache[f"tdnn{i}"] = (h, z)
        h = T.relu_forward(z)
    u = T.affine_forward(h, params["feat.W"], params["feat.b"])
    f = T.length_normalize(u)
    if keep_cache:
        cache["feat"] = (h, u)
    return f, cache


def classifier_logits(params, cfg, features):
    return cfg.cosine_scale * (features @ params["cls.W"].T) + params["cls.b"]


def forward_features(params, cfg, window):
    """Length-normalised features, ``[n, D]`` for a single window or ``[B, n, D]``."""
    x, single = _as_windows(window)
    f, _ = _forward(params, cfg, x, keep_cache=False)
    return f[0] if single else f


def forward_logits(params, cfg, window):
    x, single = _as_windows(window)
    f, _ = _forward(params, cfg, x, keep_cache=False)
    logits = classifier_logits(params, cfg, f)
    return logits[0] if single else logits


def forward_with_cache(params, cfg, windows):
    x, _ = _as_windows(windows)
    f, cache = _forward(params, cfg, x, keep_cache=True)
    return f, classifier_logits(params, cfg, f), cache


def backward_from_logits(params, cfg, features, cache, dlogits, freeze_classifier=False):
    """Chain rule from ``dL/dlogits[B, n, S]`` down to every parameter."""
    grads = {}
    s = cfg.cosine_scale
    if not freeze_classifier:
        grads["cls.W"] = s * np.tensordot(dlogits, features, axes=([0, 1], [0, 1]))
        grads["cls.b"] = dlogits.sum(axis=(0, 1))
    df = s * (dlogits @ params["cls.W"])
    return _backward_features(params, cfg, cache, df, grads)


def _backward_features(params, cfg, cache, df, grads):
    h, u = cache["feat"]
    du = T.length_normalize_backward(u, df).input_grad
    g = T.affine_backward(h, params["feat.W"], du)
    grads["feat.W"], grads["feat.b"] = g.param_grads["W"], g.param_grads["b"]
    dh = g.input_grad
    for i in range(len(cfg.tdnn), 0, -1):
        hin, z = cache[f"tdnn{i}"]
        dz = T.relu_backward(z, dh).input_grad
        g = T.tdnn_backward(hin, cfg.tdnn[i - 1].offsets, params[f"tdnn{i}.W"], dz)
        grads[f"tdnn{i}.W"], grads[f"tdnn{i}.b"] = g.param_grads["W"], g.param_grads["b"]
        dh = g.input_grad
    B, nf, Tn, Fp = cache["flatten"]
    dh = dh.reshape(B, Tn, nf, Fp).transpose(0, 2, 1, 3)
    for i in range(len(cfg.conv), 0, -1):
        hin, K, cols, z, a = cache[f"conv{i}"]
        da = T.maxpool_freq_backward(a, cfg.conv[i - 1].pool, dh).input_grad
        dz = T.relu_backward(z, da).input_grad
        g = T.conv2d_backward(hin, K, dz, need_input_grad=i > 1, cols=cols)
        dK = g.param_grads["K"]
        if i == 1:
            dK = unfold_splice_grad(dK, params["conv1.K"].shape[1])
        grads[f"conv{i}.K"], grads[f"conv{i}.b"] = dK, g.param_grads["b"]
        dh = g.input_grad
    return grads


def loss_and_grads(params, cfg, windows, labels, freeze_classifier=False):
    """Mean cross entropy over every feature position of every window.

    ``windows`` is ``[B, L, input_dim]``; ``labels[B]`` applies to all
    features a window emits. Returns ``(loss, frame_accuracy, grads)``.
    """
    f, logits, cache = forward_with_cache(params, cfg, windows)
    B, n, S = logits.shape
    flat_labels = np.repeat(np.asarray(labels), n)
    loss, dflat = T.softmax_cross_entropy(logits.reshape(B * n, S), flat_labels)
    acc = float(np.mean(logits.reshape(B * n, S).argmax(axis=1) == flat_labels))
    grads = backward_from_logits(params, cfg, f, cache, dflat.reshape(B, n, S), freeze_classifier)
    return loss, acc, grads


def backward(params, cfg, window, labels, freeze_classifier=False):
    """Gradients of the mean cross entropy for one window (or a batch)."""
    x, _ = _as_windows(window)
    labels = np.atleast_1d(labels)
    return loss_and_grads(params, cfg, x, labels, freeze_classifier)[2]


# ----------------------------------------------------------------------------
# model container
# ----------------------------------------------------------------------------

def save_model(params, cfg, path):
    blob = bytearray(MODEL_MAGIC)
    meta = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    blob += struct.pack("<II", MODEL_VERSION, len(meta)) + meta
    names = sorted(params)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        key = name.encode("utf-8")
        blob += struct.pack("<H", len(key)) + key
        blob += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(blob))
    Path(path).write_bytes(bytes(blob))


def load_model(path, expected_cfg=None):
    """Read a model container; returns ``(params, cfg)``.

    If ``expected_cfg`` is given, any difference from the stored config
    raises ``ConfigMismatchError``.
    """
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MODEL_MAGIC:
        raise FormatError("not a model container", 0)
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("model container CRC32 mismatch (truncated or corrupt file)", len(data) - 4)
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise VersionError(f"model container version {version}, expected {MODEL_VERSION}", 4)
    pos = 12
    cfg = NetConfig.from_dict(json.loads(data[pos:pos + meta_len].decode("utf-8")))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + klen].decode("utf-8")
        pos += 2 + klen
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    expected_shapes = layer_shapes(cfg)
    got_shapes = {k: v.shape for k, v in params.items()}
    if got_shapes != expected_shapes:
        raise ConfigMismatchError("stored tensors do not match the stored network config")
    if expected_cfg is not None and expected_cfg != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in asdict(expected_cfg).items() if asdict(cfg)[k] != v}
        raise ConfigMismatchError(f"model config differs from expected: {diff}")
    return params, cfg
