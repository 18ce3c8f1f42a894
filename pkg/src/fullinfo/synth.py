"""Seeded synthetic speaker corpora.

Each frame is ``prototype[speaker] + channel[utterance] + noise[t]`` where
the noise follows a stationary AR(1) process. Random streams are keyed by
``(seed, speaker)`` and ``(seed, speaker, utterance)``, so corpora that
differ only in ``frames_per_utt`` share speakers and channels.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import ManifestEntry, write_fvec, write_manifest

log = logging.getLogger(__name__)

_PROTOTYPE, _UTTERANCE, _SPLIT = 0, 1, 2


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 70
    utts_per_speaker: int = 20
    frames_per_utt: int = 200
    feature_dim: int = 40
    speaker_spread: float = 1.0
    channel_spread: float = 0.5
    frame_noise: float = 0.8
    rho: float = 0.7
    seed: int = 0

    def __post_init__(self):
        for name in ("speaker_spread", "channel_spread", "frame_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must be in [0, 1)")
        if min(self.n_speakers, self.utts_per_speaker, self.frames_per_utt, self.feature_dim) < 1:
            raise ValueError("corpus extents must be positive")

    def to_dict(self):
        return asdict(self)

    def expected_variance_ratio(self):
        """Between-speaker over within-speaker per-dimension variance."""
        within = self.channel_spread ** 2 + self.frame_noise ** 2 / (1 - self.rho ** 2)
        return np.inf if within == 0 else self.speaker_spread ** 2 / within


@dataclass(frozen=True)
class SplitSpec:
    train_speakers: int = 50
    eval_speakers: int = 20
    enroll_utts: int = 10


STANDARD_CORPUS = CorpusSpec()
STANDARD_SPLIT = SplitSpec()


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    frames: np.ndarray


@dataclass
class SynthCorpus:
    spec: CorpusSpec
    utterances: list
    prototypes: np.ndarray  # [n_speakers, feature_dim]

    @property
    def speakers(self):
        return [f"spk{s:03d}" for s in range(self.spec.n_speakers)]


def _rng(seed, *key):
    return np.random.default_rng([seed, *key])


def _utterance_frames(spec, prototype, s, u):
    rng = _rng(spec.seed, _UTTERANCE, s, u)
    d, n = spec.feature_dim, spec.frames_per_utt
    channel = spec.channel_spread * rng.standard_normal(d)
    start = spec.frame_noise / np.sqrt(1 - spec.rho ** 2) * rng.standard_normal((1, d))
    drive = np.concatenate([start, spec.frame_noise * rng.standard_normal((n - 1, d))])
    noise = lfilter([1.0], [1.0, -spec.rho], drive, axis=0)
    return (prototype + channel + noise).astype(np.float32)


def generate(spec, select=None):
    """Build the corpus; ``select(speaker_index, utt_index)`` may restrict which utterances are made."""
    if spec.speaker_spread == 0:
        log.warning("degenerate separability: speaker_spread is 0, speakers are indistinguishable")
    prototypes = np.stack([
        spec.speaker_spread * _rng(spec.seed, _PROTOTYPE, s).standard_normal(spec.feature_dim)
        for s in range(spec.n_speakers)])
    utts = []
    for s in range(spec.n_speakers):
        for u in range(spec.utts_per_speaker):
            if select is not None and not select(s, u):
                continue
            utts.append(Utterance(f"spk{s:03d}-u{u:03d}", f"spk{s:03d}",
                                  _utterance_frames(spec, prototypes[s], s, u)))
    return SynthCorpus(spec, utts, prototypes)


def corpus_checksum(corpus):
    h = hashlib.sha256()
    for u in corpus.utterances:
        h.update(u.utt_id.encode())
        h.update(np.ascontiguousarray(u.frames).tobytes())
    return h.hexdigest()


def split(corpus, train_speakers, eval_speakers, enroll_utts):
    """Speaker-disjoint (train, eval-enroll, eval-test) utterance lists.

    Speakers are assigned by a seed-derived permutation; each evaluation
    speaker's first ``enroll_utts`` utterances go to enrollment.
    """
    n = corpus.spec.n_speakers
    if train_speakers < 1 or eval_speakers < 1 or train_speakers + eval_speakers > n:
        raise ValueError(f"cannot split {n} speakers into {train_speakers} train + {eval_speakers} eval")
    if enroll_utts < 1:
        raise ValueError("enroll_utts must be at least 1")
    if enroll_utts >= corpus.spec.utts_per_speaker:
        raise ValueError(f"enroll_utts={enroll_utts} leaves no test utterances "
                         f"({corpus.spec.utts_per_speaker} per speaker): empty test set")
    order = _rng(corpus.spec.seed, _SPLIT).permutation(n)
    train_ids = {f"spk{s:03d}" for s in order[:train_speakers]}
    eval_ids = {f"spk{s:03d}" for s in order[train_speakers:train_speakers + eval_speakers]}
    train, enroll, test = [], [], []
    seen = {}
    for utt in corpus.utterances:
        if utt.speaker_id in train_ids:
            train.append(utt)
        elif utt.speaker_id in eval_ids:
            k = seen.get(utt.speaker_id, 0)
            seen[utt.speaker_id] = k + 1
            (enroll if k < enroll_utts else test).append(utt)
    return train, enroll, test


def write_corpus(corpus, out_dir, split_spec=None):
    """Write FVEC archives plus ``manifest.txt`` (and split manifests if requested)."""
    out = Path(out_dir)
    (out / "fvec").mkdir(parents=True, exist_ok=True)
    entries = {}
    for utt in corpus.utterances:
        rel = f"fvec/{utt.utt_id}.fvec"
        write_fvec(out / rel, utt.frames)
        entries[utt.utt_id] = ManifestEntry(utt.utt_id, utt.speaker_id, rel)
    write_manifest(out / "manifest.txt", entries.values())
    if split_spec is not None:
        parts = split(corpus, split_spec.train_speakers, split_spec.eval_speakers, split_spec.enroll_utts)
        for name, utts in zip(("train", "enroll", "test"), parts):
            write_manifest(out / f"{name}.txt", [entries[u.utt_id] for u in utts])
    return out / "manifest.txt"
