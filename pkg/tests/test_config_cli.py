import csv
import hashlib

import numpy as np
import pytest

from nonword.audio import AudioClip, write_wav
from nonword.cli import main
from nonword.config import RunConfig, format_config, load_config, parse_config_text, resolve
from nonword.dataset import ingest_features, read_manifest
from nonword.errors import ConfigError
from nonword.features import FeatureKind
from nonword.model import read_checkpoint
from synthetic import RATE, sine, write_corpus


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {p.relative_to(root).as_posix(): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_parse(self):
        values = parse_config_text("lr = 0.01  # faster\n\nvtln = true\npatience = none\nfeature_dirs = a, b\n")
        assert values == {"lr": 0.01, "vtln": True, "patience": None, "feature_dirs": ("a", "b")}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("learning_rate = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("max_epochs = ten\n")
        with pytest.raises(ConfigError):
            parse_config_text("just text\n")

    def test_layering(self):
        cfg = resolve({"lr": 0.01, "seed": 4}, {"lr": "0.5", "seed": None})
        assert (cfg.lr, cfg.seed, cfg.max_epochs) == (0.5, 4, 100)

    def test_snapshot_round_trip(self, tmp_path):
        cfg = RunConfig(lr=3e-4, patience=None, feature_dirs=("x", "y"), vtln=True, reference_f0_hz=200.0, nonword="3")
        (tmp_path / "c").write_text(format_config(cfg))
        assert resolve(load_config(tmp_path / "c")) == cfg

    def test_defaults_match_library(self):
        cfg = RunConfig()
        tc = cfg.train_config()
        assert (tc.lr, tc.max_epochs, tc.patience, tc.finetune_lr) == (1e-3, 100, 10, 1e-5)
        assert cfg.vad_config().energy_floor_db == -35.0
        assert cfg.reference_f0_or_default == 145.0


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return root, write_corpus(root, n_per_word=8, n_speakers=4, seed=2, silent_ids={"w3_001"})


@pytest.fixture(scope="module")
def preprocessed(corpus, tmp_path_factory):
    _, manifest = corpus
    out = tmp_path_factory.mktemp("pre")
    assert main(["preprocess", "--manifest", str(manifest), "--out-dir", str(out)]) == 0
    return out


class TestPreprocess:
    def test_outputs_and_skips(self, preprocessed):
        m = read_manifest(preprocessed / "manifest.csv")
        assert len(m) == 55
        assert "w3_001" not in {r.utterance_id for r in m}
        rows = list(csv.reader((preprocessed / "skipped.csv").open()))
        assert rows[1][0] == "w3_001" and rows[1][1].startswith("NoSpeechDetected")
        assert len(list((preprocessed / "audio").glob("*.wav"))) == 55
        assert (preprocessed / "preprocess.config").exists()

    def test_idempotent(self, corpus, preprocessed, tmp_path):
        _, manifest = corpus
        assert main(["preprocess", "--manifest", str(manifest), "--out-dir", str(tmp_path)]) == 0
        a, b = tree_digest(tmp_path), tree_digest(preprocessed)
        a.pop("preprocess.config"), b.pop("preprocess.config")
        assert a == b
        snap_a, snap_b = load_config(tmp_path / "preprocess.config"), load_config(preprocessed / "preprocess.config")
        snap_a.pop("out_dir"), snap_b.pop("out_dir")
        assert snap_a == snap_b

    def test_all_silent(self, tmp_path):
        write_wav(tmp_path / "a.wav", AudioClip(np.zeros(RATE), RATE))
        (tmp_path / "m.csv").write_text("utterance_id,speaker_id,nonword_id,label,path,split\na,s,1,correct,a.wav,\n")
        assert main(["preprocess", "--manifest", str(tmp_path / "m.csv"), "--out-dir", str(tmp_path / "o")]) == 1

    def test_unreadable_manifest(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("utterance_id,label\n")
        assert main(["preprocess", "--manifest", str(tmp_path / "m.csv"), "--out-dir", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error: MissingColumn:")


@pytest.fixture(scope="module")
def extracted(preprocessed, tmp_path_factory):
    out = tmp_path_factory.mktemp("feat")
    assert main(["extract", "--manifest", str(preprocessed / "manifest.csv"), "--out-dir", str(out)]) == 0
    return out


class TestExtract:
    def test_features(self, extracted):
        files = sorted(extracted.glob("*.nwf"))
        assert len(files) == 55
        fm = ingest_features(files[0])
        assert fm.kind == FeatureKind.MEL and fm.dims == 128
        assert not (extracted / "warp_factors.csv").exists()

    def test_vtln_needs_reference(self, preprocessed, tmp_path, capsys):
        code = main(["extract", "--manifest", str(preprocessed / "manifest.csv"), "--out-dir", str(tmp_path), "--vtln"])
        assert code == 2
        assert capsys.readouterr().err.startswith("error: ConfigError:")

    def test_vtln_speakers(self, tmp_path):
        rows = ["utterance_id,speaker_id,nonword_id,label,path,split"]
        for spk, f0 in (("low", 200.0), ("high", 280.0)):
            for i in range(2):
                uid = f"{spk}{i}"
                write_wav(tmp_path / f"{uid}.wav", AudioClip(sine(f0, 0.6), RATE, uid))
                rows.append(f"{uid},{spk},1,correct,{uid}.wav,unassigned")
        (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
        out = tmp_path / "o"
        args = ["extract", "--manifest", str(tmp_path / "m.csv"), "--out-dir", str(out), "--vtln", "--reference-f0", "200"]
        assert main(args) == 0
        alphas = {r["speaker_id"]: float(r["alpha"]) for r in csv.DictReader((out / "warp_factors.csv").open())}
        assert alphas["low"] == pytest.approx(1.0, abs=1e-3)
        assert alphas["high"] == 1.4
        plain = tmp_path / "plain"
        assert main(["extract", "--manifest", str(tmp_path / "m.csv"), "--out-dir", str(plain)]) == 0
        # alpha ~1 leaves features almost unchanged, alpha 1.4 moves them
        high_w, high_p = (ingest_features(d / "high0.nwf").data for d in (out, plain))
        assert not np.allclose(high_w, high_p)


@pytest.fixture(scope="module")
def trained(extracted, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["train", "--manifest", str(extracted / "manifest.csv"), "--features", str(extracted)]
    assert main(args + ["--out-dir", str(out), "--max-epochs", "2", "--patience", "none", "--seed", "3"]) == 0
    return out


class TestTrainFinetuneEvaluate:
    def test_train_outputs(self, trained):
        m = read_manifest(trained / "manifest.csv")
        assert m.is_split
        model = read_checkpoint(trained / "model.nwck")
        assert model.metadata["epochs_run"] == 2 and model.metadata["patience"] is None
        assert (trained / "train_log.csv").read_text().count("\n") == 3
        snapshot = load_config(trained / "train.config")
        assert snapshot["max_epochs"] == 2 and snapshot["seed"] == 3

    def test_config_file_and_override(self, extracted, trained, tmp_path):
        (tmp_path / "c").write_text(f"max_epochs = 5\nseed = 3\npatience = none\nfeatures = {extracted}\n")
        args = ["train", "--config", str(tmp_path / "c"), "--manifest", str(trained / "manifest.csv")]
        assert main(args + ["--out-dir", str(tmp_path / "o"), "--max-epochs", "2"]) == 0
        assert digest(tmp_path / "o" / "model.nwck") == digest(trained / "model.nwck")

    def test_finetune_all_words_and_evaluate(self, extracted, trained, tmp_path):
        ft = tmp_path / "ft"
        args = ["finetune", "--manifest", str(trained / "manifest.csv"), "--features", str(extracted)]
        args += ["--base", str(trained / "model.nwck"), "--mode", "ft-all-layers", "--nonword", "all"]
        assert main(args + ["--out-dir", str(ft), "--max-epochs", "1"]) == 0
        ckpts = sorted(ft.glob("word_*.nwck"))
        assert len(ckpts) == 7
        m = read_checkpoint(ckpts[0])
        assert m.metadata["lr"] == 1e-5 and m.metadata["finetune_mode"] == "ft_all_layers"

        ev = tmp_path / "ev"
        args = ["evaluate", "--manifest", str(trained / "manifest.csv"), "--features", str(extracted)]
        assert main(args + ["--models-dir", str(ft), "--out-dir", str(ev)]) == 0
        lines = (ev / "report.csv").read_text().splitlines()
        assert lines[0] == "nonword_id,support,accuracy,precision,recall,auc,flags"
        n_words = len(read_manifest(trained / "manifest.csv").subset("test").nonword_ids)
        assert len(lines) == 1 + n_words + 1 and lines[-1].startswith("weighted,")

    def test_finetune_single_word(self, extracted, trained, tmp_path):
        args = ["finetune", "--manifest", str(trained / "manifest.csv"), "--features", str(extracted)]
        args += ["--base", str(trained / "model.nwck"), "--mode", "ft-last-layer", "--nonword", "4"]
        assert main(args + ["--out-dir", str(tmp_path), "--max-epochs", "1"]) == 0
        assert [p.name for p in tmp_path.glob("*.nwck")] == ["word_4.nwck"]

    def test_evaluate_needs_one_model(self, extracted, trained, tmp_path, capsys):
        args = ["evaluate", "--manifest", str(trained / "manifest.csv"), "--features", str(extracted)]
        assert main(args + ["--out-dir", str(tmp_path)]) == 2
        assert "ConfigError" in capsys.readouterr().err

    def test_sweep(self, extracted, trained, tmp_path):
        args = ["sweep", "--manifest", str(trained / "manifest.csv"), "--feature-dirs", str(extracted), str(tmp_path / "nope")]
        assert main(args + ["--out-dir", str(tmp_path / "o"), "--max-epochs", "1"]) == 1
        rows = list(csv.DictReader((tmp_path / "o" / "sweep.csv").open()))
        assert [r["status"] for r in rows] == ["ok", "failed"]
