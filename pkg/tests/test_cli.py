import json
from pathlib import Path

import numpy as np
import pytest

from fullinfo import cli, dsp, evaluation as E, net as N

GOLDEN = Path(__file__).parent / "golden"

SMALL_NET = {"input_dim": 40, "splice_left": 1, "splice_right": 1,
             "conv": [{"filters": 2, "kernel": [2, 9], "pool": 2}],
             "tdnn": [{"offsets": [-1, 0, 1], "width": 8}], "feature_dim": 6}
SMALL_CORPUS = {"corpus": {"n_speakers": 8, "utts_per_speaker": 5, "frames_per_utt": 60},
                "split": {"train_speakers": 5, "eval_speakers": 3, "enroll_utts": 2}}
FAST_TRAIN = {"epochs": 2, "batch_windows": 8, "chunk_features": 10, "warmup_max_epochs": 3,
              "val_fraction": 0.2}


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def sine_wav(path, seconds=0.5, freq=440.0, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    dsp.write_wav(path, dsp.Waveform(0.3 * np.sin(2 * np.pi * freq * t), rate))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--spec", write_json(root / "spec.json", SMALL_CORPUS), "--out-dir", root / "data") == 0
    return root


@pytest.fixture(scope="module")
def baseline(corpus):
    conf = write_json(corpus / "train.json", {"train": FAST_TRAIN, "net": SMALL_NET})
    assert run("train", "--mode", "baseline", "--data", corpus / "data" / "train.txt",
               "--config", conf, "--out-dir", corpus / "base") == 0
    return corpus / "base" / "model.ctdn"


class TestParser:
    def test_no_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run()
        assert info.value.code == 1

    def test_unknown_flag_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            run("synth", "--out-dir", tmp_path, "--bogus")
        assert info.value.code == 1

    def test_unknown_config_key(self, tmp_path):
        spec = write_json(tmp_path / "s.json", {"corpus": {"n_speakerz": 3}})
        assert run("synth", "--spec", spec, "--out-dir", tmp_path / "o") == 1

    def test_impossible_split_is_config_error(self, tmp_path):
        spec = write_json(tmp_path / "s.json", {"corpus": SMALL_CORPUS["corpus"]})
        assert run("synth", "--spec", spec, "--out-dir", tmp_path / "o") == 1

    def test_missing_input_is_data_error(self, tmp_path):
        assert run("extract", "--model", tmp_path / "none.ctdn", "--data", tmp_path / "m.txt",
                   "--out", tmp_path / "d.csv") == 2


class TestFbank:
    def test_empty_directory(self, tmp_path):
        (tmp_path / "in").mkdir()
        assert run("fbank", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / "out") == 2

    def test_one_wav(self, tmp_path, capsys):
        (tmp_path / "in" / "spk1").mkdir(parents=True)
        sine_wav(tmp_path / "in" / "spk1" / "a.wav")
        assert run("fbank", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / "out") == 0
        assert len(list((tmp_path / "out" / "fvec").iterdir())) == 1
        entries = dsp.read_manifest(tmp_path / "out" / "manifest.txt")
        assert [(e.utt_id, e.speaker_id) for e in entries] == [("spk1-a", "spk1")]
        assert "1 utterances, 48 frames, 0 failed" in capsys.readouterr().out
        frames = dsp.read_fvec(tmp_path / "out" / entries[0].path)
        np.testing.assert_allclose(frames.mean(axis=0), 0.0, atol=1e-4)

    def test_rerun_byte_identical(self, tmp_path):
        (tmp_path / "in").mkdir()
        sine_wav(tmp_path / "in" / "s1-x.wav")
        sine_wav(tmp_path / "in" / "s2-y.wav", freq=1200.0)
        outs = []
        for name in ("a", "b"):
            assert run("fbank", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / name) == 0
            outs.append({p.relative_to(tmp_path / name): p.read_bytes()
                         for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
        assert outs[0] == outs[1]

    def test_bad_file_reported(self, tmp_path, capsys):
        (tmp_path / "in").mkdir()
        sine_wav(tmp_path / "in" / "s1-good.wav")
        (tmp_path / "in" / "s1-bad.wav").write_bytes(b"RIFF0000WAVEjunk")
        assert run("fbank", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / "out") == 2
        assert "1 utterances" in capsys.readouterr().out
        assert len(dsp.read_manifest(tmp_path / "out" / "manifest.txt")) == 1


class TestSynth:
    def test_counts_and_checksum(self, tmp_path, capsys):
        spec = write_json(tmp_path / "s.json", SMALL_CORPUS)
        assert run("synth", "--spec", spec, "--out-dir", tmp_path / "a") == 0
        first = capsys.readouterr().out
        assert run("synth", "--spec", spec, "--out-dir", tmp_path / "b") == 0
        assert capsys.readouterr().out.split("checksum")[1] == first.split("checksum")[1]
        assert len(list((tmp_path / "a" / "fvec").glob("*.fvec"))) == 40

    def test_seed_flag_overrides_file(self, tmp_path):
        spec = write_json(tmp_path / "s.json", {**SMALL_CORPUS, "corpus": {**SMALL_CORPUS["corpus"], "seed": 5}})
        assert run("synth", "--spec", spec, "--out-dir", tmp_path / "a", "--seed", "9") == 0
        echoed = json.loads((tmp_path / "a" / cli.RESOLVED_CONFIG).read_text())
        assert echoed["corpus"]["seed"] == 9

    def test_degenerate_warning(self, tmp_path, caplog):
        spec = write_json(tmp_path / "s.json",
                          {**SMALL_CORPUS, "corpus": {**SMALL_CORPUS["corpus"], "speaker_spread": 0.0}})
        assert run("synth", "--spec", spec, "--out-dir", tmp_path / "a") == 0
        assert "degenerate separability" in caplog.text


class TestTrain:
    def test_fullinfo_requires_warmup_source(self, corpus, tmp_path):
        assert run("train", "--mode", "fullinfo", "--data", corpus / "data" / "train.txt",
                   "--out-dir", tmp_path) == 1

    def test_outputs(self, baseline):
        rows = (baseline.parent / "metrics.csv").read_text().splitlines()
        assert rows[0] == "phase,epoch,batch,loss,acc,epoch_start_val_acc,seconds"
        assert {r.split(",")[0] for r in rows[1:]} == {"baseline"}
        _, cfg = N.load_model(baseline)
        assert cfg.num_speakers == 5 and cfg.feature_dim == 6

    def test_fullinfo_zero_epochs_equals_warm_up(self, corpus, baseline, tmp_path):
        conf = write_json(tmp_path / "t.json", {"train": FAST_TRAIN})
        args = ["train", "--mode", "fullinfo", "--data", corpus / "data" / "train.txt", "--config", conf,
                "--warmup-from", baseline]
        assert run(*args, "--epochs", "0", "--out-dir", tmp_path / "z") == 0
        phases = {r.split(",")[0] for r in (tmp_path / "z" / "metrics.csv").read_text().splitlines()[1:]}
        assert phases == {"warmup"}
        assert run(*args, "--epochs", "1", "--out-dir", tmp_path / "one") == 0
        rows = (tmp_path / "one" / "metrics.csv").read_text().splitlines()[1:]
        assert {r.split(",")[0] for r in rows} == {"warmup", "fullinfo"}

    def test_speaker_count_mismatch(self, corpus, baseline, tmp_path):
        assert run("train", "--mode", "fullinfo", "--data", corpus / "data" / "test.txt",
                   "--warmup-from", baseline, "--out-dir", tmp_path) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_is_numerical_failure(self, corpus, tmp_path):
        conf = write_json(tmp_path / "t.json", {"train": {**FAST_TRAIN, "lr": 1e30}, "net": SMALL_NET})
        assert run("train", "--mode", "baseline", "--data", corpus / "data" / "train.txt",
                   "--config", conf, "--out-dir", tmp_path / "o") == 3


class TestExtract:
    def test_one_row_per_utterance(self, corpus, baseline, tmp_path):
        assert run("extract", "--model", baseline, "--data", corpus / "data" / "enroll.txt",
                   "--out", tmp_path / "d.csv") == 0
        rows = (tmp_path / "d.csv").read_text().splitlines()
        assert len(rows) == 3 * 2
        assert all(len(r.split(",")) == 6 + 1 for r in rows)

    def test_short_utterance_skipped(self, baseline, tmp_path, caplog):
        dsp.write_fvec(tmp_path / "short.fvec", np.zeros((3, 40), dtype=np.float32))
        dsp.write_fvec(tmp_path / "long.fvec", np.ones((30, 40), dtype=np.float32))
        dsp.write_manifest(tmp_path / "m.txt", [dsp.ManifestEntry("u1", "s", "short.fvec"),
                                                 dsp.ManifestEntry("u2", "s", "long.fvec")])
        assert run("extract", "--model", baseline, "--data", tmp_path / "m.txt", "--out", tmp_path / "d.csv") == 0
        assert "skipped 1" in caplog.text
        assert [r.split(",")[0] for r in (tmp_path / "d.csv").read_text().splitlines()] == ["u2"]

    def test_rerun_identical(self, corpus, baseline, tmp_path):
        for name in ("a.csv", "b.csv"):
            run("extract", "--model", baseline, "--data", corpus / "data" / "test.txt", "--out", tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestScoring:
    def test_lda_and_score_chain(self, corpus, baseline, tmp_path, capsys):
        data = corpus / "data"
        for split in ("train", "enroll", "test"):
            assert run("extract", "--model", baseline, "--data", data / f"{split}.txt",
                       "--out", tmp_path / f"{split}.csv") == 0
        assert run("lda", "--dvectors", tmp_path / "train.csv", "--data", data / "train.txt",
                   "--out", tmp_path / "lda.npz", "--lda-dim", "3") == 0
        assert np.load(tmp_path / "lda.npz")["projection"].shape == (3, 6)
        test = dsp.read_manifest(data / "test.txt")
        enrolled = sorted({e.speaker_id for e in dsp.read_manifest(data / "enroll.txt")})
        E.write_trials(tmp_path / "trials.txt", E.make_trials(enrolled, [(e.utt_id, e.speaker_id) for e in test]))
        capsys.readouterr()
        assert run("score", "--enroll", tmp_path / "enroll.csv", "--enroll-manifest", data / "enroll.txt",
                   "--test", tmp_path / "test.csv", "--trials", tmp_path / "trials.txt",
                   "--lda", tmp_path / "lda.npz", "--out", tmp_path / "scores.txt") == 0
        assert "EER" in capsys.readouterr().out
        assert len((tmp_path / "scores.txt").read_text().splitlines()) == 3 * len(test)


class TestEval:
    def test_table_and_files(self, corpus, baseline, tmp_path, capsys):
        assert run("eval", "--model", baseline, "--data", corpus / "data", "--condition", "S20f,S50f",
                   "--lda-dim", "--out-dir", tmp_path) == 0
        out = capsys.readouterr().out
        assert "cosine" in out and "lda" in out
        csv = (tmp_path / "eer.csv").read_text().splitlines()
        assert csv[0] == "scoring,S20f,S50f" and len(csv) == 3
        for name in ("trials_S20f.txt", "scores_cosine_S50f.txt", "scores_lda_S20f.txt", "lda.npz"):
            assert (tmp_path / name).exists()

    def test_condition_longer_than_utterances_skipped(self, corpus, baseline, tmp_path, caplog):
        assert run("eval", "--model", baseline, "--data", corpus / "data", "--condition", "S20f,S100f",
                   "--out-dir", tmp_path) == 0
        assert "S100f skipped" in caplog.text
        assert (tmp_path / "eer.csv").read_text().splitlines()[0] == "scoring,S20f"

    def test_unknown_condition(self, corpus, baseline, tmp_path):
        assert run("eval", "--model", baseline, "--data", corpus / "data", "--condition", "S7f",
                   "--out-dir", tmp_path) == 1

    def test_deterministic(self, corpus, baseline, tmp_path):
        for name in ("a", "b"):
            run("eval", "--model", baseline, "--data", corpus / "data", "--condition", "S20f,S50f",
                "--lda-dim", "--out-dir", tmp_path / name)
        for f in ("eer.csv", "scores_lda_S50f.txt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_separable_corpus_has_zero_eer(self, tmp_path):
        spec = {"corpus": {**SMALL_CORPUS["corpus"], "speaker_spread": 3.0, "channel_spread": 0.0,
                           "frame_noise": 0.01}, "split": SMALL_CORPUS["split"]}
        assert run("synth", "--spec", write_json(tmp_path / "s.json", spec), "--out-dir", tmp_path / "d") == 0
        conf = write_json(tmp_path / "t.json", {"train": {**FAST_TRAIN, "epochs": 4}, "net": SMALL_NET})
        assert run("train", "--mode", "baseline", "--data", tmp_path / "d" / "train.txt", "--config", conf,
                   "--out-dir", tmp_path / "m") == 0
        assert run("eval", "--model", tmp_path / "m" / "model.ctdn", "--data", tmp_path / "d",
                   "--condition", "S20f,S50f", "--out-dir", tmp_path / "e") == 0
        eers = (tmp_path / "e" / "eer.csv").read_text().splitlines()[1].split(",")[1:]
        assert all(float(x) < 1.0 for x in eers)

    def test_resolved_config_reproduces(self, corpus, tmp_path):
        conf = write_json(tmp_path / "t.json", {"train": FAST_TRAIN, "net": SMALL_NET})
        assert run("train", "--mode", "baseline", "--data", corpus / "data" / "train.txt", "--config", conf,
                   "--epochs", "1", "--seed", "4", "--out-dir", tmp_path / "a") == 0
        echoed = json.loads((tmp_path / "a" / cli.RESOLVED_CONFIG).read_text())
        conf2 = write_json(tmp_path / "echo.json", {"train": echoed["train"], "net": echoed["net"]})
        assert run("train", "--mode", "baseline", "--data", echoed["data"], "--config", conf2,
                   "--out-dir", tmp_path / "b") == 0
        assert (tmp_path / "a" / "model.ctdn").read_bytes() == (tmp_path / "b" / "model.ctdn").read_bytes()


class TestExport:
    def test_rows(self, corpus, baseline, tmp_path):
        assert run("export", "--model", baseline, "--data", corpus / "data" / "enroll.txt",
                   "--out", tmp_path / "f.csv", "--max-frames", "5") == 0
        rows = [r.split(",") for r in (tmp_path / "f.csv").read_text().splitlines()]
        assert all(len(r) == 3 + 6 for r in rows)
        assert len(rows) <= 6 * 6


@pytest.mark.slow
class TestGolden:
    def test_standard_corpus_table(self, tmp_path):
        """Seed-0 standard corpus through synth, a short baseline and eval, against the frozen table."""
        assert run("synth", "--out-dir", tmp_path / "d", "--seed", "0") == 0
        net = {**json.loads(json.dumps(N.NetConfig().to_dict())), **GOLDEN_NET}
        conf = write_json(tmp_path / "t.json", {"train": {"epochs": 2}, "net": net})
        assert run("train", "--mode", "baseline", "--data", tmp_path / "d" / "train.txt", "--config", conf,
                   "--out-dir", tmp_path / "m") == 0
        assert run("eval", "--model", tmp_path / "m" / "model.ctdn", "--data", tmp_path / "d",
                   "--condition", "S20f,S50f,S100f", "--lda-dim", "--out-dir", tmp_path / "e") == 0
        got = (tmp_path / "e" / "eer.csv").read_text()
        assert got == (GOLDEN / "eval_standard_seed0.csv").read_text()


# the small desktop net used for experiments, kept literal so the golden file does not move with it
GOLDEN_NET = {"conv": [{"filters": 8, "kernel": [4, 9], "pool": 2}, {"filters": 16, "kernel": [3, 5], "pool": 2}],
              "tdnn": [{"offsets": [-2, 0, 2], "width": 64}, {"offsets": [-1, 0, 1], "width": 64}],
              "feature_dim": 32}
