"""Verification back-end: d-vectors, LDA, cosine trial scoring and EER."""

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import net as N
from .errors import DimensionError, NumericalError, ResolutionError
from .synth import Utterance
from .tensor import length_normalize

log = logging.getLogger(__name__)

TARGET, NONTARGET = "target", "nontarget"

# condition tag -> test segment length in raw frames (10 ms shift)
CONDITIONS = {"S20f": 20, "S50f": 50, "S100f": 100, "L3s": 300, "L9s": 900, "L18s": 1800}
SHORT_CONDITIONS = ("S20f", "S50f", "S100f")
LONG_CONDITIONS = ("L3s", "L9s", "L18s")


def condition_frames(tag, frame_shift_ms=10.0):
    if tag.startswith("L"):
        return int(round(float(tag[1:-1]) * 1000.0 / frame_shift_ms))
    return CONDITIONS[tag]


# ----------------------------------------------------------------------------
# d-vectors
# ----------------------------------------------------------------------------

@dataclass
class DVector:
    vector: np.ndarray
    utt_id: str = ""
    n_frames_used: int = 0


def extract_dvector(params, cfg, frames, utt_id="", normalize=True):
    """Average of the frame features of one utterance, optionally length-normalised."""
    f = N.forward_features(params, cfg, np.asarray(frames))
    v = f.astype(np.float64).mean(axis=0)
    return DVector(length_normalize(v) if normalize else v, utt_id, len(f))


def extract_dvectors(params, cfg, utts, normalize=True, frame_budget=4096):
    """D-vectors for many utterances (``Utterance``-like objects), batched by length."""
    out = [None] * len(utts)
    groups = {}
    for i, u in enumerate(utts):
        groups.setdefault(len(u.frames), []).append(i)
    for length, idx in groups.items():
        batch = max(1, frame_budget // length)
        for j in range(0, len(idx), batch):
            part = idx[j:j + batch]
            f = N.forward_features(params, cfg, np.stack([utts[i].frames for i in part]))
            means = f.astype(np.float64).mean(axis=1)
            if normalize:
                means = length_normalize(means)
            for i, m in zip(part, means):
                out[i] = DVector(m, utts[i].utt_id, f.shape[1])
    return out


def enroll(dvectors, speaker_id="", normalize=True):
    """Speaker model: mean of per-utterance d-vectors, re-normalised."""
    if not dvectors:
        raise ValueError("enrollment needs at least one utterance")
    v = np.mean([d.vector for d in dvectors], axis=0)
    return DVector(length_normalize(v) if normalize else v, speaker_id,
                   sum(d.n_frames_used for d in dvectors))


# ----------------------------------------------------------------------------
# LDA
# ----------------------------------------------------------------------------

@dataclass
class LdaTransform:
    projection: np.ndarray  # [d_out, D]
    eigenvalues: np.ndarray
    mean: np.ndarray
    within_scatter: np.ndarray
    between_scatter: np.ndarray

    @property
    def d_out(self):
        return self.projection.shape[0]


def default_lda_dim(n_speakers, feature_dim):
    return max(1, min(n_speakers - 1, (3 * feature_dim) // 8))


def scatter_matrices(X, labels):
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    mu = X.mean(axis=0)
    D = X.shape[1]
    Sw = np.zeros((D, D))
    Sb = np.zeros((D, D))
    for c in np.unique(labels):
        Xc = X[labels == c]
        mc = Xc.mean(axis=0)
        Sw += (Xc - mc).T @ (Xc - mc)
        Sb += len(Xc) * np.outer(mc - mu, mc - mu)
    n = len(X)
    return Sw / n, Sb / n, mu


def lda_fit(X, labels, d_out, ridge=1e-4):
    """Solve ``S_b w = lambda (S_w + ridge * tr(S_w)/D * I) w`` and keep the top ``d_out`` directions.

    Rows are scaled so that ``w^T S_w,reg w = 1`` and signed so that each
    row's largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    D = X.shape[1]
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("LDA needs at least 2 speakers with at least 2 samples each")
    if not 1 <= d_out <= min(len(classes) - 1, D):
        raise DimensionError(f"LDA output dim {d_out} outside [1, {min(len(classes) - 1, D)}]")
    Sw, Sb, mu = scatter_matrices(X, labels)
    tr = np.trace(Sw)
    Sw_reg = Sw + ridge * (tr / D if tr > 0 else 1.0) * np.eye(D)
    try:
        evals, evecs = linalg.eigh(Sb, Sw_reg)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"within-class scatter is singular after regularisation: {exc}") from exc
    order = np.argsort(evals)[::-1][:d_out]
    W = evecs[:, order].T
    pivot = np.abs(W).argmax(axis=1)
    W *= np.sign(W[np.arange(d_out), pivot])[:, None]
    return LdaTransform(W, evals[order], mu, Sw, Sb)


def lda_project(t, v, normalize=True):
    vec = v.vector if isinstance(v, DVector) else np.asarray(v)
    if vec.shape[-1] != t.projection.shape[1]:
        raise DimensionError(f"d-vector dim {vec.shape[-1]} != LDA input dim {t.projection.shape[1]}")
    out = vec @ t.projection.T
    if normalize:
        out = length_normalize(out)
    return DVector(out, v.utt_id, v.n_frames_used) if isinstance(v, DVector) else out


# ----------------------------------------------------------------------------
# trials and scoring
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    target: bool


@dataclass
class TrialList:
    trials: list
    condition: str = ""

    def __len__(self):
        return len(self.trials)


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # bool, True = target
    trials: list | None = None

    @property
    def target_scores(self):
        return self.scores[self.labels]

    @property
    def nontarget_scores(self):
        return self.scores[~self.labels]


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(length_normalize(a) @ length_normalize(b))


def score_trials(enrollments, tests, trials):
    """Cosine score of every trial. ``enrollments``/``tests`` map ids to vectors."""
    trial_list = trials.trials if isinstance(trials, TrialList) else trials
    def vec(table, key, kind):
        if key not in table:
            raise ResolutionError(f"unknown {kind} id {key!r}")
        v = table[key]
        return v.vector if isinstance(v, DVector) else np.asarray(v)
    if not trial_list:
        return ScoreSet(np.zeros(0), np.zeros(0, dtype=bool), [])
    E = np.stack([vec(enrollments, t.enroll_id, "enrollment") for t in trial_list])
    X = np.stack([vec(tests, t.test_id, "test") for t in trial_list])
    s = np.sum(length_normalize(E.astype(np.float64)) * length_normalize(X.astype(np.float64)), axis=1)
    return ScoreSet(s, np.array([t.target for t in trial_list], dtype=bool), list(trial_list))


def eer(scores, labels=None):
    """Equal error rate in percent.

    A trial is accepted when its score is ``>=`` the threshold. Operating
    points are taken at every distinct score (plus the all-accept point);
    the EER is where FRR meets FAR, linearly interpolated between the two
    adjacent operating points when they do not meet exactly.
    """
    if labels is None:
        s, y = scores.scores, scores.labels
    else:
        s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)
    tgt = np.sort(s[y])
    non = np.sort(s[~y])
    if tgt.size == 0 or non.size == 0:
        raise ValueError("EER needs both target and nontarget scores")
    thresholds = np.concatenate([[-np.inf], np.unique(s), [np.inf]])
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    d = frr - far  # non-decreasing from -1 to +1
    i = int(np.argmax(d >= 0))
    if d[i] == 0:
        return 100.0 * frr[i]
    alpha = -d[i - 1] / (d[i] - d[i - 1])
    return 100.0 * (far[i - 1] + alpha * (far[i] - far[i - 1]))


def make_trials(enroll_ids, test_utts):
    """All enrolled speakers against all test utterances (``(utt_id, speaker_id)`` pairs)."""
    return [Trial(spk, utt, spk == tspk) for spk in enroll_ids for utt, tspk in test_utts]


@dataclass
class Condition:
    tag: str
    crops: list  # Utterance-like objects with cropped frames
    trials: TrialList
    skipped: int


def make_conditions(test_utts, enroll_ids, tags=tuple(CONDITIONS), frame_shift_ms=10.0, seed=0):
    """Crop each test utterance to every condition length.

    All crops of one utterance start at the same seeded offset, so the
    conditions are nested segments that differ only in duration. The offset
    is drawn so that the longest requested condition the utterance can hold
    still fits.
    """
    lengths = {tag: condition_frames(tag, frame_shift_ms) for tag in tags}
    out = {tag: ([], 0) for tag in tags}
    for i, u in enumerate(test_utts):
        n_u = len(u.frames)
        fitting = [n for n in lengths.values() if n <= n_u]
        off = 0
        if fitting:
            rng = np.random.default_rng([seed, i])
            off = int(rng.integers(0, n_u - max(fitting) + 1))
        for tag, n in lengths.items():
            crops, skipped = out[tag]
            if n > n_u:
                out[tag] = (crops, skipped + 1)
            else:
                crops.append(Utterance(f"{u.utt_id}@{tag}", u.speaker_id, u.frames[off:off + n]))
    conditions = {}
    for tag, (crops, skipped) in out.items():
        if skipped:
            log.warning("condition %s: skipped %d test utterances shorter than %d frames",
                        tag, skipped, lengths[tag])
        trials = TrialList(make_trials(enroll_ids, [(c.utt_id, c.speaker_id) for c in crops]), tag)
        conditions[tag] = Condition(tag, crops, trials, skipped)
    return conditions


# ----------------------------------------------------------------------------
# text formats
# ----------------------------------------------------------------------------

def write_trials(path, trials):
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.enroll_id} {t.test_id} {TARGET if t.target else NONTARGET}\n")


def read_trials(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                if len(parts) != 3 or parts[2] not in (TARGET, NONTARGET):
                    raise ValueError(f"bad trial line: {line.rstrip()!r}")
                out.append(Trial(parts[0], parts[1], parts[2] == TARGET))
    return out


def write_scores(path, score_set):
    with open(path, "w", encoding="utf-8") as fh:
        for t, s in zip(score_set.trials, score_set.scores):
            fh.write(f"{t.enroll_id} {t.test_id} {s:.6f}\n")


def write_dvectors_csv(path, dvectors):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for d in dvectors:
            w.writerow([d.utt_id] + [f"{x:.8g}" for x in d.vector])


def read_dvectors_csv(path):
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                out[row[0]] = np.array([float(x) for x in row[1:]])
    return out
