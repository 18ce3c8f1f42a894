"""Command-line entry point: ``fullinfo <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure.
"""

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import dsp
from . import evaluation as E
from . import net as N
from . import synth
from . import training as TR
from .errors import ConfigError, FullInfoError, NumericalError

log = logging.getLogger("fullinfo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_CONFIG = "resolved_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# config resolution
# ----------------------------------------------------------------------------

def _load_json(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return data


def _build(cls, base, values, section):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section} config: {exc}") from exc


def _overrides(args, mapping):
    """Flag values that were given on the command line, keyed by config field."""
    return {key: getattr(args, dest) for dest, key in mapping.items() if getattr(args, dest, None) is not None}


def _echo(out_dir, resolved):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _net_from_dict(d):
    try:
        return N.NetConfig.from_dict({**N.NetConfig().to_dict(), **d})
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad net config: {exc}") from exc


# ----------------------------------------------------------------------------
# data helpers
# ----------------------------------------------------------------------------

def _utterances(manifest):
    entries, frames = dsp.load_utterances(manifest)
    return [synth.Utterance(e.utt_id, e.speaker_id, f) for e, f in zip(entries, frames)]


def _split_manifest(data, name):
    p = Path(data)
    return p / f"{name}.txt" if p.is_dir() else p.parent / f"{name}.txt"


def _long_enough(utts, rf, what):
    kept = [u for u in utts if len(u.frames) >= rf]
    if len(kept) < len(utts):
        log.warning("%s: skipped %d utterances shorter than the receptive field (%d frames)",
                    what, len(utts) - len(kept), rf)
    return kept


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def _speaker_of(path, root):
    rel = path.relative_to(root)
    if len(rel.parts) > 1:
        return rel.parts[0]
    return path.stem.split("-")[0].split("_")[0]


def cmd_fbank(args):
    cfg = _build(dsp.FbankConfig, dsp.FbankConfig(), _load_json(args.config).get("fbank", {}), "fbank")
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    wavs = sorted(in_dir.rglob("*.wav")) if in_dir.is_dir() else []
    if not wavs:
        raise FileNotFoundError(f"no .wav files under {in_dir}")
    _echo(out_dir, {"fbank": asdict(cfg), "mean_normalize": not args.no_mean_norm})
    (out_dir / "fvec").mkdir(parents=True, exist_ok=True)
    entries, failed, n_frames = [], 0, 0
    for wav in wavs:
        utt_id = "-".join(wav.relative_to(in_dir).with_suffix("").parts)
        try:
            feats = dsp.fbank(dsp.read_wav(wav), cfg)
        except (FullInfoError, OSError) as exc:
            log.error("%s: %s", wav, exc)
            failed += 1
            continue
        if not args.no_mean_norm:
            feats = dsp.mean_normalize(feats)
        rel = f"fvec/{utt_id}.fvec"
        dsp.write_fvec(out_dir / rel, feats.frames)
        entries.append(dsp.ManifestEntry(utt_id, _speaker_of(wav, in_dir), rel))
        n_frames += feats.num_frames
    dsp.write_manifest(out_dir / "manifest.txt", entries)
    print(f"fbank: {len(entries)} utterances, {n_frames} frames, {failed} failed")
    return EXIT_DATA if failed else EXIT_OK


def cmd_synth(args):
    conf = _load_json(args.spec)
    corpus_spec = _build(synth.CorpusSpec, synth.STANDARD_CORPUS,
                         {**conf.get("corpus", {}), **_overrides(args, {"seed": "seed"})}, "corpus")
    split_spec = _build(synth.SplitSpec, synth.STANDARD_SPLIT, conf.get("split", {}), "split")
    if split_spec.train_speakers + split_spec.eval_speakers > corpus_spec.n_speakers:
        raise ConfigError(f"cannot split {corpus_spec.n_speakers} speakers into "
                          f"{split_spec.train_speakers} train + {split_spec.eval_speakers} eval")
    _echo(args.out_dir, {"corpus": asdict(corpus_spec), "split": asdict(split_spec)})
    corpus = synth.generate(corpus_spec)
    synth.write_corpus(corpus, args.out_dir, split_spec)
    print(f"synth: {len(corpus.utterances)} utterances from {corpus_spec.n_speakers} speakers, "
          f"checksum {synth.corpus_checksum(corpus)}")
    return EXIT_OK


_TRAIN_FLAGS = {"epochs": "epochs", "lr": "lr", "momentum": "momentum", "seed": "seed",
                "batch_windows": "batch_windows", "policy": "classifier_update_policy",
                "warmup_from": "warmup_source", "warmup_max_epochs": "warmup_max_epochs"}


def cmd_train(args):
    conf = _load_json(args.config)
    tc = _build(TR.TrainConfig, TR.TrainConfig(),
                {**conf.get("train", {}), **_overrides(args, _TRAIN_FLAGS)}, "train")
    if args.mode == "fullinfo" and not tc.warmup_source:
        raise UsageError("--mode fullinfo requires --warmup-from BASELINE_MODEL")
    net_cfg = _net_from_dict(conf.get("net", {}))
    out = Path(args.out_dir)
    utts = _utterances(args.data)
    stream = TR.LabeledFrameStream.from_utterances(utts)
    train, val = TR.split_validation(stream, tc.val_fraction, tc.seed)
    if args.mode == "baseline":
        cfg = net_cfg.with_speakers(stream.num_speakers)
    else:
        source, cfg = N.load_model(tc.warmup_source)
        if cfg.num_speakers != stream.num_speakers:
            raise ConfigError(f"warm-up model has {cfg.num_speakers} speakers, data has {stream.num_speakers}")
    _echo(out, {"mode": args.mode, "data": str(args.data), "train": asdict(tc), "net": cfg.to_dict()})
    if args.mode == "baseline":
        params, metrics = TR.train_baseline(tc, train, cfg, val=val)
    else:
        params, metrics = TR.warm_up(source, cfg, cfg, train, val, tc)
        params, full_metrics = TR.run_fullinfo(params, cfg, train, val, tc)
        metrics.extend(full_metrics)
    N.save_model(params, cfg, out / "model.ctdn")
    metrics.write_csv(out / "metrics.csv")
    print(f"train: {args.mode} model written to {out / 'model.ctdn'}, checksum {N.params_checksum(params)}")
    return EXIT_OK


def cmd_extract(args):
    params, cfg = N.load_model(args.model)
    utts = _long_enough(_utterances(args.data), N.receptive_field(cfg), "extract")
    dvs = E.extract_dvectors(params, cfg, utts, normalize=not args.no_normalize)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    E.write_dvectors_csv(args.out, dvs)
    print(f"extract: {len(dvs)} d-vectors of dim {cfg.feature_dim}")
    return EXIT_OK


def _labels_for(dvectors, manifest):
    speaker = {e.utt_id: e.speaker_id for e in dsp.read_manifest(manifest)}
    ids = [k for k in dvectors if k in speaker]
    return np.stack([dvectors[k] for k in ids]), [speaker[k] for k in ids]


def _save_lda(path, t):
    np.savez(path, projection=t.projection, eigenvalues=t.eigenvalues, mean=t.mean)


def _load_lda(path):
    with np.load(path) as z:
        return E.LdaTransform(z["projection"], z["eigenvalues"], z["mean"], None, None)


def cmd_lda(args):
    X, labels = _labels_for(E.read_dvectors_csv(args.dvectors), args.data)
    d_out = args.lda_dim or E.default_lda_dim(len(set(labels)), X.shape[1])
    t = E.lda_fit(X, labels, d_out)
    _save_lda(args.out, t)
    print(f"lda: {X.shape[1]} -> {d_out} dims from {len(X)} d-vectors of {len(set(labels))} speakers")
    return EXIT_OK


def cmd_score(args):
    enroll_dv = E.read_dvectors_csv(args.enroll)
    test_dv = E.read_dvectors_csv(args.test)
    speaker = {e.utt_id: e.speaker_id for e in dsp.read_manifest(args.enroll_manifest)}
    models = {}
    for utt, v in enroll_dv.items():
        if utt in speaker:
            models.setdefault(speaker[utt], []).append(E.DVector(v, utt))
    if args.lda:
        t = _load_lda(args.lda)
        models = {s: [E.lda_project(t, d) for d in ds] for s, ds in models.items()}
        test_dv = {k: E.lda_project(t, v) for k, v in test_dv.items()}
    models = {s: E.enroll(ds, s) for s, ds in models.items()}
    trials = E.read_trials(args.trials)
    scores = E.score_trials(models, test_dv, trials)
    E.write_scores(args.out, scores)
    if scores.labels.any() and not scores.labels.all():
        print(f"score: {len(trials)} trials, EER {E.eer(scores):.2f}%")
    else:
        print(f"score: {len(trials)} trials")
    return EXIT_OK


def cmd_eval(args):
    params, cfg = N.load_model(args.model)
    tags = [t.strip() for t in args.condition.split(",") if t.strip()]
    bad = [t for t in tags if t not in E.CONDITIONS]
    if bad:
        raise UsageError(f"unknown condition(s) {bad}; choose from {list(E.CONDITIONS)}")
    rf = N.receptive_field(cfg)
    enroll_utts = _long_enough(_utterances(_split_manifest(args.data, "enroll")), rf, "enroll")
    test_utts = _utterances(_split_manifest(args.data, "test"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, {"model": str(args.model), "data": str(args.data), "conditions": tags,
                "lda_dim": args.lda_dim, "seed": args.seed})

    by_spk = {}
    for u, d in zip(enroll_utts, E.extract_dvectors(params, cfg, enroll_utts)):
        by_spk.setdefault(u.speaker_id, []).append(d)
    methods = {"cosine": (None, {s: E.enroll(ds, s) for s, ds in by_spk.items()})}
    if args.lda_dim is not None:
        train_utts = _long_enough(_utterances(_split_manifest(args.data, "train")), rf, "train")
        train_dv = E.extract_dvectors(params, cfg, train_utts)
        labels = [u.speaker_id for u in train_utts]
        t = E.lda_fit([d.vector for d in train_dv], labels,
                      args.lda_dim or E.default_lda_dim(len(set(labels)), cfg.feature_dim))
        _save_lda(out / "lda.npz", t)
        methods["lda"] = (t, {s: E.enroll([E.lda_project(t, d) for d in ds], s) for s, ds in by_spk.items()})

    conds = E.make_conditions(test_utts, sorted(by_spk), tags, seed=args.seed)
    table = {m: {} for m in methods}
    for tag in tags:
        cond = conds[tag]
        if not cond.crops or E.condition_frames(tag) < rf:
            log.warning("condition %s skipped: test utterances are shorter than the condition", tag)
            continue
        E.write_trials(out / f"trials_{tag}.txt", cond.trials.trials)
        dvs = {c.utt_id: d for c, d in zip(cond.crops, E.extract_dvectors(params, cfg, cond.crops))}
        for m, (t, models) in methods.items():
            tests = dvs if t is None else {k: E.lda_project(t, d) for k, d in dvs.items()}
            ss = E.score_trials(models, tests, cond.trials)
            E.write_scores(out / f"scores_{m}_{tag}.txt", ss)
            table[m][tag] = E.eer(ss)
    cols = [t for t in tags if t in table["cosine"]]
    lines = ["scoring," + ",".join(cols)]
    lines += [m + "," + ",".join(f"{table[m][c]:.4f}" for c in cols) for m in methods]
    (out / "eer.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("EER%".ljust(8) + "".join(f"{c:>9}" for c in cols))
    for m in methods:
        print(m.ljust(8) + "".join(f"{table[m][c]:9.2f}" for c in cols))
    return EXIT_OK


def cmd_export(args):
    """Frame-level features as CSV rows ``utt_id,speaker_id,frame,v0,...``."""
    params, cfg = N.load_model(args.model)
    utts = _long_enough(_utterances(args.data), N.receptive_field(cfg), "export")
    rows = 0
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for u in utts:
            feats = N.forward_features(params, cfg, u.frames)
            step = max(1, len(feats) // args.max_frames) if args.max_frames else 1
            for i in range(0, len(feats), step):
                fh.write(f"{u.utt_id},{u.speaker_id},{i}," + ",".join(f"{x:.6g}" for x in feats[i]) + "\n")
                rows += 1
    print(f"export: {rows} frame features from {len(utts)} utterances")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="fullinfo", description="Frame-level speaker features with full-info training.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (default: library default)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fbank", help="WAV directory -> log mel filterbank archives")
    s.add_argument("--in-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config")
    s.add_argument("--no-mean-norm", action="store_true", help="skip per-utterance mean normalisation")
    s.set_defaults(func=cmd_fbank)

    s = sub.add_parser("synth", help="write a seeded synthetic corpus")
    s.add_argument("--spec", help="JSON with optional 'corpus' and 'split' objects")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="baseline or full-info training")
    s.add_argument("--mode", choices=["baseline", "fullinfo"], required=True)
    s.add_argument("--data", required=True, help="training manifest")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config", help="JSON with optional 'train' and 'net' objects")
    s.add_argument("--warmup-from", help="baseline model used to warm up full-info training")
    s.add_argument("--epochs", type=int)
    s.add_argument("--warmup-max-epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--batch-windows", type=int)
    s.add_argument("--policy", choices=[TR.WITHIN_EPOCH, TR.FROZEN])
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="d-vectors for every utterance of a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("lda", help="fit LDA on labelled d-vectors")
    s.add_argument("--dvectors", required=True)
    s.add_argument("--data", required=True, help="manifest giving the speaker of each d-vector")
    s.add_argument("--out", required=True)
    s.add_argument("--lda-dim", type=int)
    s.set_defaults(func=cmd_lda)

    s = sub.add_parser("score", help="cosine scoring of a trial list")
    s.add_argument("--enroll", required=True, help="enrollment d-vector CSV")
    s.add_argument("--enroll-manifest", required=True)
    s.add_argument("--test", required=True, help="test d-vector CSV")
    s.add_argument("--trials", required=True)
    s.add_argument("--lda")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="EER table over test conditions")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="directory (or any manifest) holding enroll/test/train.txt")
    s.add_argument("--condition", default=",".join(E.CONDITIONS))
    s.add_argument("--lda-dim", type=int, nargs="?", const=0, default=None,
                   help="also score after LDA (no value: default dimension)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="frame-level features as CSV for external plotting")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-frames", type=int, default=0, help="approximate per-utterance cap (0: all)")
    s.set_defaults(func=cmd_export)
    return p


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"fullinfo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"fullinfo {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FullInfoError, OSError, ValueError, KeyError) as exc:
        print(f"fullinfo {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
