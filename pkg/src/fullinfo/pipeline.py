"""End-to-end experiment: baseline vs full-info models on a synthetic corpus."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation as E
from . import net as N
from . import synth
from . import training as TR

log = logging.getLogger(__name__)

# Desk-scale feature net used for the synthetic experiments; same layer
# structure and 20-frame receptive field as the default, fewer units.
DESK_NET = N.NetConfig(
    conv=(N.ConvSpec(8, (4, 9), 2), N.ConvSpec(16, (3, 5), 2)),
    tdnn=(N.TdnnSpec((-2, 0, 2), 64), N.TdnnSpec((-1, 0, 1), 64)),
    feature_dim=32,
)


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: synth.CorpusSpec = synth.STANDARD_CORPUS
    split: synth.SplitSpec = synth.STANDARD_SPLIT
    net: N.NetConfig = DESK_NET
    train: TR.TrainConfig = TR.TrainConfig()
    baseline_epochs: int = 6
    conditions: tuple = tuple(E.CONDITIONS)
    lda_dim: int | None = None
    # Test utterances are regenerated at this length (same speakers and
    # channels) so the long-duration conditions can be cropped.
    long_test_frames: int | None = 1800

    def with_seed(self, seed):
        return replace(self, corpus=replace(self.corpus, seed=seed), train=replace(self.train, seed=seed))


@dataclass
class ModelReport:
    name: str
    eer: dict  # method -> condition -> EER%
    coherence: float
    between_cosine: float
    epochs: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    baseline_params: dict
    fullinfo_params: dict
    net_cfg: N.NetConfig
    baseline_metrics: TR.TrainMetrics
    warmup_metrics: TR.TrainMetrics
    fullinfo_metrics: TR.TrainMetrics
    reports: dict = field(default_factory=dict)
    warmup_source_params: dict | None = None


@dataclass
class EvalData:
    train: list
    enroll: list
    test: list
    long_test: list


def load_data(ecfg):
    corpus = synth.generate(ecfg.corpus)
    train, enroll, test = synth.split(corpus, ecfg.split.train_speakers, ecfg.split.eval_speakers,
                                      ecfg.split.enroll_utts)
    long_test = test
    if ecfg.long_test_frames and ecfg.long_test_frames > ecfg.corpus.frames_per_utt:
        test_ids = {u.utt_id for u in test}
        long_spec = replace(ecfg.corpus, frames_per_utt=ecfg.long_test_frames)
        long_corpus = synth.generate(long_spec, select=lambda s, u: f"spk{s:03d}-u{u:03d}" in test_ids)
        long_test = long_corpus.utterances
    return EvalData(train, enroll, test, long_test)


def within_speaker_cosine(params, cfg, utts):
    """Mean pairwise cosine of frame features within each speaker, and across speakers."""
    by_spk = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(N.forward_features(params, cfg, u.frames).astype(np.float64))
    within, sums, counts = [], [], []
    for feats in by_spk.values():
        f = np.concatenate(feats)
        s = f.sum(axis=0)
        n = len(f)
        within.append((s @ s - n) / (n * (n - 1)))
        sums.append(s)
        counts.append(n)
    total = np.sum(sums, axis=0)
    n_all = sum(counts)
    all_pairs = total @ total - n_all
    same_pairs = sum(s @ s - n for s, n in zip(sums, counts))
    cross = n_all * n_all - sum(n * n for n in counts)
    return float(np.mean(within)), float((all_pairs - same_pairs) / cross)


def evaluate_model(params, cfg, data, conditions, lda_dim=None, seed=0):
    """EER table ``{"cosine": {...}, "lda": {...}}``; includes pooled short/long conditions."""
    train_dv = E.extract_dvectors(params, cfg, data.train)
    labels = [u.speaker_id for u in data.train]
    d_out = lda_dim or E.default_lda_dim(len(set(labels)), cfg.feature_dim)
    lda = E.lda_fit([d.vector for d in train_dv], labels, d_out)

    enroll_dv = E.extract_dvectors(params, cfg, data.enroll)
    by_spk = {}
    for u, d in zip(data.enroll, enroll_dv):
        by_spk.setdefault(u.speaker_id, []).append(d)
    models = {s: E.enroll(ds, s) for s, ds in by_spk.items()}
    models_lda = {s: E.enroll([E.lda_project(lda, d) for d in ds], s) for s, ds in by_spk.items()}

    table = {"cosine": {}, "lda": {}}
    pooled = {"cosine": {}, "lda": {}}
    scores = {}
    rf = N.receptive_field(cfg)
    groups = {}
    for tag in conditions:
        groups.setdefault(tag in E.LONG_CONDITIONS, []).append(tag)
    for is_long, tags in groups.items():
        source = data.long_test if is_long else data.test
        conds = E.make_conditions(source, sorted(models), tags, seed=seed)
        for tag in tags:
            cond = conds[tag]
            if not cond.crops or E.condition_frames(tag) < rf:
                log.warning("condition %s skipped: no usable test segments", tag)
                continue
            test_dv = {c.utt_id: d for c, d in zip(cond.crops, E.extract_dvectors(params, cfg, cond.crops))}
            test_lda = {k: E.lda_project(lda, d) for k, d in test_dv.items()}
            for method, enr, tst in (("cosine", models, test_dv), ("lda", models_lda, test_lda)):
                ss = E.score_trials(enr, tst, cond.trials)
                scores[(method, tag)] = ss
                table[method][tag] = E.eer(ss)
                pooled[method].setdefault("L" if is_long else "S", []).append(ss)
    for method, groups in pooled.items():
        for group, sets in groups.items():
            table[method][f"pooled_{group}"] = E.eer(np.concatenate([s.scores for s in sets]),
                                                     np.concatenate([s.labels for s in sets]))
    return table, scores


def run_experiment(ecfg, evaluate=True):
    """Train baseline and full-info models on one seeded corpus and evaluate both.

    The full-info net is warmed up from the baseline after
    ``ecfg.baseline_epochs`` epochs; the baseline then keeps training until
    it has seen as many epochs as warm-up plus full-info, so the reported
    comparison is at matched total epochs.
    """
    data = load_data(ecfg)
    tc = ecfg.train
    stream = TR.LabeledFrameStream.from_utterances(data.train)
    train, val = TR.split_validation(stream, tc.val_fraction, tc.seed)
    cfg = ecfg.net.with_speakers(stream.num_speakers)

    trainer = TR.BaselineTrainer(cfg, train, val, tc)
    trainer.run(ecfg.baseline_epochs)
    source = N.copy_params(trainer.params)

    warm, warm_metrics = TR.warm_up(source, cfg, cfg, train, val, tc)
    full, full_metrics = TR.run_fullinfo(warm, cfg, train, val, tc)
    total = len(warm_metrics.epochs) + len(full_metrics.epochs)
    if total > trainer.epoch:
        trainer.run(total - trainer.epoch)

    result = ExperimentResult(ecfg, trainer.params, full, cfg, trainer.metrics, warm_metrics,
                              full_metrics, warmup_source_params=source)
    if evaluate:
        for name, params, epochs in (("baseline", trainer.params, trainer.epoch), ("fullinfo", full, total)):
            table, _ = evaluate_model(params, cfg, data, ecfg.conditions, ecfg.lda_dim, seed=tc.seed)
            coh, between = within_speaker_cosine(params, cfg, data.test)
            result.reports[name] = ModelReport(name, table, coh, between, epochs)
    return result


def format_table(reports, conditions):
    """Text rendering of EER% per model x scoring method x condition."""
    cols = [c for c in conditions if any(c in r.eer["cosine"] for r in reports.values())]
    lines = ["{:<10} {:<7} ".format("model", "scoring") + " ".join(f"{c:>8}" for c in cols)]
    for name, r in reports.items():
        for method in ("cosine", "lda"):
            vals = " ".join(f"{r.eer[method][c]:8.2f}" if c in r.eer[method] else f"{'-':>8}" for c in cols)
            lines.append(f"{name:<10} {method:<7} {vals}")
    return "\n".join(lines)
