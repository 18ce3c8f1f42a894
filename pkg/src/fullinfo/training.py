"""Baseline and full-info training of the feature net.

Baseline training fits the feature net and a free affine classifier jointly.
Full-info training replaces the classifier, at every epoch boundary, with the
length-normalised per-speaker means of the current frame features, so the
softmax over logits is a softmax over cosines to the speaker centroids.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import net as N
from . import tensor as T
from .errors import ConfigError, DegenerateSpeakerError, NumericalError

log = logging.getLogger(__name__)

WITHIN_EPOCH = "within_epoch"
FROZEN = "frozen"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    lr_halving_threshold: float = 0.0  # lr halves when the val-accuracy gain is at most this
    batch_windows: int = 16
    chunk_features: int = 20  # features emitted per training window
    classifier_update_policy: str = WITHIN_EPOCH
    warmup_source: str | None = None
    warmup_max_epochs: int = 10
    warmup_tolerance: float = 0.001  # 0.1 percentage points
    val_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.classifier_update_policy not in (WITHIN_EPOCH, FROZEN):
            raise ConfigError(f"unknown classifier_update_policy {self.classifier_update_policy!r}")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------------
# data streams
# ----------------------------------------------------------------------------

class LabeledFrameStream:
    """Utterances with integer speaker labels, served as shuffled windows."""

    def __init__(self, utterances, labels, speakers):
        self.utterances = [np.asarray(u, dtype=np.float32) for u in utterances]
        self.labels = np.asarray(labels, dtype=np.int64)
        self.speakers = list(speakers)
        if len(self.utterances) != len(self.labels):
            raise ValueError("one label per utterance required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.speakers)):
            raise ValueError("label outside the speaker table")

    @classmethod
    def from_utterances(cls, utts, speakers=None):
        speakers = speakers or sorted({u.speaker_id for u in utts})
        index = {s: i for i, s in enumerate(speakers)}
        return cls([u.frames for u in utts], [index[u.speaker_id] for u in utts], speakers)

    @property
    def num_speakers(self):
        return len(self.speakers)

    def __len__(self):
        return len(self.utterances)

    def subset(self, idx):
        return LabeledFrameStream([self.utterances[i] for i in idx], self.labels[idx], self.speakers)

    def check(self, rf):
        short = [i for i, u in enumerate(self.utterances) if len(u) < rf]
        if short:
            raise ValueError(f"{len(short)} utterances shorter than the receptive field {rf}")

    def windows(self, rng, rf, chunk):
        """One epoch of non-overlapping ``(utt, start, length)`` windows, ``chunk`` features each.

        Each utterance contributes ``n_feat // chunk`` windows from a random offset;
        the leftover positions rotate with the offset across epochs.
        """
        out = []
        for i, u in enumerate(self.utterances):
            n_feat = len(u) - rf + 1
            if n_feat <= 0:
                continue
            k = max(1, n_feat // chunk)
            width = min(chunk, n_feat)
            offset = int(rng.integers(0, n_feat - k * width + 1))
            out.extend((i, offset + j * width, width + rf - 1) for j in range(k))
        order = rng.permutation(len(out))
        return [out[j] for j in order]

    def batches(self, rng, rf, chunk, batch_windows):
        buckets = {}
        for w in self.windows(rng, rf, chunk):
            buckets.setdefault(w[2], []).append(w)
        groups = [ws[j:j + batch_windows] for _, ws in sorted(buckets.items())
                  for j in range(0, len(ws), batch_windows)]
        for g in (groups[j] for j in rng.permutation(len(groups))):
            x = np.stack([self.utterances[i][s:s + L] for i, s, L in g])
            yield x, self.labels[[i for i, _, _ in g]]

    def full_utterance_groups(self):
        """Utterance indices grouped by length, for batched whole-utterance passes."""
        groups = {}
        for i, u in enumerate(self.utterances):
            groups.setdefault(len(u), []).append(i)
        return list(groups.values())


def split_validation(stream, fraction, seed):
    """Hold out ``fraction`` of each speaker's utterances (at least one, if it has two)."""
    rng = np.random.default_rng([seed, 17])
    val, train = [], []
    for s in range(stream.num_speakers):
        idx = np.flatnonzero(stream.labels == s)
        n_val = min(len(idx) - 1, max(1, int(round(fraction * len(idx))))) if len(idx) > 1 else 0
        chosen = set(rng.choice(idx, size=n_val, replace=False).tolist()) if n_val else set()
        val.extend(i for i in idx if i in chosen)
        train.extend(i for i in idx if i not in chosen)
    return stream.subset(sorted(train)), stream.subset(sorted(val))


def utterance_features(params, cfg, stream, frame_budget=4096):
    """Frame features of every utterance in ``stream`` (list aligned with it)."""
    feats = [None] * len(stream)
    for group in stream.full_utterance_groups():
        batch = max(1, frame_budget // len(stream.utterances[group[0]]))
        for j in range(0, len(group), batch):
            idx = group[j:j + batch]
            f = N.forward_features(params, cfg, np.stack([stream.utterances[i] for i in idx]))
            for i, fi in zip(idx, f):
                feats[i] = fi
    return feats


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

@dataclass
class TrainMetrics:
    batches: list = field(default_factory=list)  # (phase, epoch, batch, loss, acc, seconds)
    epochs: list = field(default_factory=list)   # dicts, one per epoch

    def epoch_start_accuracy(self, phase="fullinfo"):
        return [e["epoch_start_val_acc"] for e in self.epochs if e["phase"] == phase]

    def extend(self, other):
        self.batches.extend(other.batches)
        self.epochs.extend(other.epochs)

    def write_csv(self, path):
        start = {(e["phase"], e["epoch"]): e["epoch_start_val_acc"] for e in self.epochs}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "epoch", "batch", "loss", "acc", "epoch_start_val_acc", "seconds"])
            for phase, epoch, b, loss, acc, sec in self.batches:
                w.writerow([phase, epoch, b, f"{loss:.6f}", f"{acc:.6f}",
                            f"{start.get((phase, epoch), float('nan')):.6f}", f"{sec:.4f}"])


def evaluate(params, cfg, stream):
    """Frame accuracy and mean cross entropy of the current classifier on ``stream``."""
    feats = utterance_features(params, cfg, stream)
    correct = total = 0
    nll = 0.0
    for f, y in zip(feats, stream.labels):
        logits = N.classifier_logits(params, cfg, f).astype(np.float64)
        correct += int(np.sum(logits.argmax(axis=1) == y))
        nll -= float(T.log_softmax(logits)[:, y].sum())
        total += len(f)
    return correct / total, nll / total


# ----------------------------------------------------------------------------
# optimisation loop shared by all phases
# ----------------------------------------------------------------------------

class _Optimizer:
    def __init__(self, tc):
        self.lr = tc.lr
        self.momentum = tc.momentum
        self.velocity = {}

    def reset_classifier(self):
        for name in N.CLASSIFIER:
            self.velocity.pop(name, None)


def _run_epoch(params, cfg, stream, tc, opt, rng, frozen, metrics, phase, epoch):
    rf = N.receptive_field(cfg)
    t0 = time.perf_counter()
    losses, accs = [], []
    for b, (x, y) in enumerate(stream.batches(rng, rf, tc.chunk_features, tc.batch_windows)):
        loss, acc, grads = N.loss_and_grads(params, cfg, x, y, freeze_classifier=frozen)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss in {phase} epoch {epoch} at batch {b}")
        T.sgd_step(params, grads, opt.velocity, opt.lr, opt.momentum,
                   frozen=N.CLASSIFIER if frozen else ())
        losses.append(loss)
        accs.append(acc)
        metrics.batches.append((phase, epoch, b, loss, acc, time.perf_counter() - t0))
    return float(np.mean(losses)) if losses else float("nan"), float(np.mean(accs)) if accs else float("nan")


def _record_epoch(metrics, phase, epoch, opt, start, end, train, seconds):
    rec = dict(phase=phase, epoch=epoch, lr=opt.lr,
               epoch_start_val_acc=start[0], epoch_start_val_loss=start[1],
               epoch_end_val_acc=end[0], train_loss=train[0], train_acc=train[1], seconds=seconds)
    metrics.epochs.append(rec)
    log.info("%s epoch %d: val acc %.4f -> %.4f, train loss %.4f, lr %.4g",
             phase, epoch, start[0], end[0], train[0], opt.lr)
    return rec


def _maybe_halve(opt, tc, prev_acc, acc):
    if prev_acc is not None and acc - prev_acc <= tc.lr_halving_threshold:
        opt.lr *= 0.5


# ----------------------------------------------------------------------------
# baseline
# ----------------------------------------------------------------------------

class BaselineTrainer:
    """Joint training of feature net and affine classifier; resumable by epoch."""

    def __init__(self, net_cfg, train, val, tc, params=None):
        if train.num_speakers < 2 or len(set(train.labels.tolist())) < 2:
            raise ValueError("baseline training needs at least 2 speakers")
        if len(train) == 0:
            raise ValueError("empty training stream")
        train.check(N.receptive_field(net_cfg))
        self.cfg = net_cfg
        self.train, self.val, self.tc = train, val, tc
        self.params = params if params is not None else N.init_params(net_cfg, tc.seed)
        self.opt = _Optimizer(tc)
        self.rng = np.random.default_rng([tc.seed, 1])
        self.metrics = TrainMetrics()
        self.epoch = 0
        self._last_acc = None

    def run(self, epochs):
        for _ in range(epochs):
            t0 = time.perf_counter()
            start = evaluate(self.params, self.cfg, self.val)
            train = _run_epoch(self.params, self.cfg, self.train, self.tc, self.opt, self.rng,
                               False, self.metrics, "baseline", self.epoch)
            end = evaluate(self.params, self.cfg, self.val)
            _record_epoch(self.metrics, "baseline", self.epoch, self.opt, start, end, train,
                          time.perf_counter() - t0)
            _maybe_halve(self.opt, self.tc, self._last_acc, end[0])
            self._last_acc = end[0]
            self.epoch += 1
        return self.params, self.metrics


def train_baseline(tc, stream, net_cfg, val=None):
    """Train the feature net with a parametric classifier for ``tc.epochs`` epochs.

    If ``val`` is None, a validation split is carved out of ``stream``.
    """
    if stream.num_speakers < 2 or len(set(stream.labels.tolist())) < 2:
        raise ValueError("baseline training needs at least 2 speakers")
    if val is None:
        stream, val = split_validation(stream, tc.val_fraction, tc.seed)
    trainer = BaselineTrainer(net_cfg.with_speakers(stream.num_speakers), stream, val, tc)
    return trainer.run(tc.epochs)


# ----------------------------------------------------------------------------
# full-info building blocks
# ----------------------------------------------------------------------------

@dataclass
class SpeakerVectorTable:
    vectors: np.ndarray  # [S, D], un-normalised means
    frame_counts: np.ndarray  # [S]


def estimate_speaker_vectors(params, cfg, stream, features=None):
    """Per-speaker mean of the current frame features over ``stream``."""
    if features is None:
        features = utterance_features(params, cfg, stream)
    D = features[0].shape[1] if features else cfg.feature_dim
    sums = np.zeros((stream.num_speakers, D))
    counts = np.zeros(stream.num_speakers, dtype=np.int64)
    for f, y in zip(features, stream.labels):
        sums[y] += f.sum(axis=0, dtype=np.float64)
        counts[y] += len(f)
    missing = [stream.speakers[s] for s in np.flatnonzero(counts == 0)]
    if missing:
        raise DegenerateSpeakerError(f"speakers without frames: {missing}", missing)
    return SpeakerVectorTable(sums / counts[:, None], counts)


def cosine_matrix(features, vectors):
    f = np.asarray(features, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    return T.length_normalize(f) @ T.length_normalize(v).T


def cosine_softmax_posterior(features, table):
    """``p(s | f) = exp(cos(f, v_s)) / sum_s' exp(cos(f, v_s'))`` along the last axis."""
    vectors = table.vectors if isinstance(table, SpeakerVectorTable) else table
    return T.softmax(cosine_matrix(features, vectors))


def install_classifier(params, table):
    """Copy of ``params`` whose classifier rows are the unit-length speaker vectors."""
    v = np.asarray(table.vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(norms < 1e-8)
    if bad.size:
        raise DegenerateSpeakerError(f"near-zero speaker vectors for rows {bad.tolist()}", bad.tolist())
    if v.shape != params["cls.W"].shape:
        raise ConfigError(f"speaker table {v.shape} does not match classifier {params['cls.W'].shape}")
    out = N.copy_params(params)
    dtype = params["cls.W"].dtype
    out["cls.W"] = (v / norms[:, None]).astype(dtype)
    out["cls.b"] = np.zeros_like(params["cls.b"])
    return out


def _fullinfo_epoch_loop(params, cfg, train, val, tc, opt, rng, metrics, phase, epoch, start):
    t0 = time.perf_counter()
    frozen = tc.classifier_update_policy == FROZEN
    stats = _run_epoch(params, cfg, train, tc, opt, rng, frozen, metrics, phase, epoch)
    end = evaluate(params, cfg, val)
    return _record_epoch(metrics, phase, epoch, opt, start, end, stats, time.perf_counter() - t0)


def warm_up(baseline_params, baseline_cfg, fresh_cfg, train, val, tc):
    """Train a freshly initialised net against centroids from the baseline net.

    Stops when validation accuracy gains less than ``tc.warmup_tolerance``
    over two consecutive epochs, or after ``tc.warmup_max_epochs``.
    Returns ``(params, metrics)``.
    """
    if baseline_params is None:
        raise ConfigError("warm-up requires a trained baseline model (warmup_source)")
    fresh_cfg = fresh_cfg.with_speakers(train.num_speakers)
    table = estimate_speaker_vectors(baseline_params, baseline_cfg, train)
    fresh = N.init_params(fresh_cfg, [tc.seed, 2])
    params = install_classifier(fresh, table)
    opt = _Optimizer(tc)
    rng = np.random.default_rng([tc.seed, 3])
    metrics = TrainMetrics()
    history = []
    for epoch in range(tc.warmup_max_epochs):
        start = evaluate(params, fresh_cfg, val)
        rec = _fullinfo_epoch_loop(params, fresh_cfg, train, val, tc, opt, rng, metrics, "warmup", epoch, start)
        _maybe_halve(opt, tc, history[-1] if history else start[0], rec["epoch_end_val_acc"])
        history.append(rec["epoch_end_val_acc"])
        if len(history) >= 3 and history[-1] - history[-3] < tc.warmup_tolerance:
            break
    return params, metrics


def run_fullinfo(params, cfg, train, val, tc):
    """Iterative full-info training for ``tc.epochs`` epochs.

    Each epoch: re-estimate speaker vectors with the current net, install them
    as the classifier, record validation accuracy/loss, then run one epoch of
    SGD (classifier rows trainable or frozen per policy).
    """
    params = N.copy_params(params)
    opt = _Optimizer(tc)
    rng = np.random.default_rng([tc.seed, 4])
    metrics = TrainMetrics()
    prev = None
    for epoch in range(tc.epochs):
        table = estimate_speaker_vectors(params, cfg, train)
        params = install_classifier(params, table)
        opt.reset_classifier()
        start = evaluate(params, cfg, val)
        _fullinfo_epoch_loop(params, cfg, train, val, tc, opt, rng, metrics, "fullinfo", epoch, start)
        _maybe_halve(opt, tc, prev, start[0])
        prev = start[0]
    return params, metrics
