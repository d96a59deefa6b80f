from dataclasses import replace

import numpy as np
import pytest

from nonword import nn
from nonword.dataset import ClassWeights, DatasetManifest, feature_path, write_features
from nonword.errors import EmptySplit, ModeMismatch, SingleClassSplit
from nonword.features import FeatureKind, FeatureMatrix
from nonword.model import Classifier, build_vgg, load_checkpoint, read_blobs, save_checkpoint
from nonword.train import (
    Split,
    TrainConfig,
    TrainLog,
    finetune_word_dependent,
    fit,
    sweep_feature_sets,
    sweep_to_csv,
    train_word_independent,
)
from synthetic import separable_features, toy_dataset


def quick(**kw):
    base = dict(max_epochs=3, patience=None, batch_size=8, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.max_epochs, cfg.patience, cfg.batch_size) == (1e-3, 100, 10, 16)
        assert cfg.finetune_lr == 1e-5

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"patience": -1}, {"batch_size": 0}, {"finetune_mode": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestFit:
    def test_overfit_twenty(self):
        x, y = separable_features(20, 32, 32)
        model = Classifier.initialize(build_vgg(32, 32), seed=0)
        data = Split(x, y)
        fit(model, data, data, ClassWeights(), TrainConfig(patience=None, max_epochs=200), 1e-3)
        assert np.all((model.predict(x) >= 0.5) == (y > 0.5))

    def test_patience_zero(self):
        x, y = separable_features(20, 32, 32)
        model = Classifier.initialize(build_vgg(32, 32), seed=0)
        # validation labels are inverted, so learning the training set hurts val loss
        trainlog = fit(model, Split(x, y), Split(x, 1 - y), ClassWeights(), TrainConfig(patience=0, max_epochs=20), 1e-3)
        assert len(trainlog.epochs) == 2
        assert trainlog.epochs[1].val_loss >= trainlog.epochs[0].val_loss
        assert trainlog.best_epoch == 1
        assert trainlog.stop_reason == "early_stopping"

    def test_restores_best(self):
        x, y = separable_features(20, 32, 32)
        model = Classifier.initialize(build_vgg(32, 32), seed=0)
        trainlog = fit(model, Split(x, y), Split(x, 1 - y), ClassWeights(), TrainConfig(patience=3, max_epochs=20), 1e-3)
        best = trainlog.epochs[trainlog.best_epoch - 1].val_loss
        assert best == trainlog.best_val_loss
        assert nn.weighted_bce(model.predict(x), 1 - y) == pytest.approx(best, rel=1e-6)
        assert len(trainlog.epochs) <= 20

    def test_log_csv(self):
        log = TrainLog()
        assert log.to_csv() == "epoch,train_loss,val_loss,val_acc\n"


class TestWordIndependent:
    def test_runs_and_records(self):
        manifest, feats = toy_dataset()
        model, log = train_word_independent(manifest, feats, quick())
        assert len(log.epochs) == 3
        assert model.metadata["scope"] == "word_independent"
        assert model.metadata["epochs_run"] == 3
        assert model.spec.input_shape == (1, 32, 32)
        assert model.spec.nonword_id is None

    def test_deterministic(self):
        manifest, feats = toy_dataset()
        a, _ = train_word_independent(manifest, feats, quick())
        b, _ = train_word_independent(manifest, feats, quick())
        assert save_checkpoint(a) == save_checkpoint(b)

    def test_resume_matches_uninterrupted(self):
        manifest, feats = toy_dataset()
        full, full_log = train_word_independent(manifest, feats, quick(max_epochs=6))
        part, _ = train_word_independent(manifest, feats, quick(max_epochs=3))
        resumed, resumed_log = train_word_independent(
            manifest, feats, quick(max_epochs=6), resume=load_checkpoint(save_checkpoint(part))
        )
        assert resumed_log.to_dict() == full_log.to_dict()
        assert save_checkpoint(resumed) == save_checkpoint(full)

    def test_empty_val(self):
        manifest, feats = toy_dataset()
        no_val = DatasetManifest(tuple(replace(r, split="train") if r.split == "val" else r for r in manifest))
        with pytest.raises(EmptySplit):
            train_word_independent(no_val, feats, quick())

    def test_single_class(self):
        manifest, feats = toy_dataset()
        one = DatasetManifest(tuple(r for r in manifest if r.label == "correct" or r.split != "train"))
        with pytest.raises(SingleClassSplit):
            train_word_independent(one, feats, quick())


@pytest.fixture(scope="module")
def base_model():
    manifest, feats = toy_dataset()
    model, _ = train_word_independent(manifest, feats, quick())
    return model, manifest, feats


def changed_blobs(before, after):
    _, a = read_blobs(save_checkpoint(before))
    _, b = read_blobs(save_checkpoint(after))
    return {k for k in a.keys() & b.keys() if a[k].tobytes() != b[k].tobytes()}


class TestFinetune:
    def test_last_layer_freeze(self, base_model):
        base, manifest, feats = base_model
        tuned, _ = finetune_word_dependent(base, manifest, feats, 1, quick(finetune_mode="ft_last_layer"))
        assert changed_blobs(base, tuned) == {"out.weight", "out.bias"}
        assert tuned.spec.nonword_id == 1
        assert tuned.metadata["trainable_layers"] == ["out"]

    def test_add_layer(self, base_model):
        base, manifest, feats = base_model
        tuned, _ = finetune_word_dependent(base, manifest, feats, 2, quick(finetune_mode="ft_add_layer"))
        assert tuned.spec.layer("adapter").args["out_units"] == 16
        _, b = read_blobs(save_checkpoint(tuned))
        _, a = read_blobs(save_checkpoint(base))
        assert set(b) - set(a) == {"adapter.weight", "adapter.bias"}
        assert b["out.weight"].shape == (16, 1)
        assert changed_blobs(base, tuned) == {"out.weight", "out.bias"}
        assert tuned.metadata["trainable_layers"] == ["adapter", "out"]

    def test_all_layers_lr(self, base_model):
        base, manifest, feats = base_model
        tuned, _ = finetune_word_dependent(base, manifest, feats, 1, quick(finetune_mode="ft_all_layers"))
        assert tuned.metadata["lr"] == 1e-5
        assert tuned.frozen_layers == []
        assert "conv1.weight" in changed_blobs(base, tuned)

    def test_from_scratch(self, base_model):
        base, manifest, feats = base_model
        tuned, _ = finetune_word_dependent(base, manifest, feats, 1, quick(finetune_mode="from_scratch"))
        assert tuned.metadata["lr"] == 1e-3
        assert tuned.spec.layers == base.spec.layers

    def test_word_scoped(self, base_model):
        base, manifest, feats = base_model
        # corrupting another word's features must not influence word 1
        poisoned = dict(feats)
        for uid in poisoned:
            if uid.startswith("w2_"):
                poisoned[uid] = FeatureMatrix(np.full((32, 32), 50, np.float32), 0.01, FeatureKind.MEL, uid)
        cfg = quick(finetune_mode="ft_last_layer")
        a, _ = finetune_word_dependent(base, manifest, feats, 1, cfg)
        b, _ = finetune_word_dependent(base, manifest, poisoned, 1, cfg)
        assert save_checkpoint(a) == save_checkpoint(b)
        assert a.metadata["class_weights"] == {"correct": 1.0, "incorrect": 1.0}

    def test_global_val_fallback(self, base_model):
        base, manifest, feats = base_model
        moved = DatasetManifest(
            tuple(replace(r, split="test") if r.nonword_id == 1 and r.split == "val" else r for r in manifest)
        )
        tuned, _ = finetune_word_dependent(base, moved, feats, 1, quick(finetune_mode="ft_last_layer"))
        assert tuned.metadata["val_scope"] == "global"

    def test_mode_none(self, base_model):
        base, manifest, feats = base_model
        with pytest.raises(ModeMismatch):
            finetune_word_dependent(base, manifest, feats, 1, quick())

    def test_word_dependent_base(self, base_model):
        base, manifest, feats = base_model
        tuned, _ = finetune_word_dependent(base, manifest, feats, 1, quick(finetune_mode="ft_last_layer"))
        with pytest.raises(ModeMismatch):
            finetune_word_dependent(tuned, manifest, feats, 1, quick(finetune_mode="ft_last_layer"))


class TestSweep:
    def write_dir(self, root, name, feats, dims=None):
        d = root / name
        d.mkdir()
        for i, (uid, fm) in enumerate(sorted(feats.items())):
            if dims is not None and i == 0:
                fm = FeatureMatrix(np.zeros((32, dims), np.float32), 0.01, FeatureKind.MEL, uid)
            write_features(feature_path(d, uid), fm)
        return d

    def test_identical_and_isolated(self, tmp_path):
        manifest, feats = toy_dataset()
        dirs = [
            self.write_dir(tmp_path, "a", feats),
            self.write_dir(tmp_path, "bad", feats, dims=16),
            self.write_dir(tmp_path, "b", feats),
        ]
        rows = sweep_feature_sets(dirs, manifest, quick(max_epochs=2), jobs=2)
        assert [r.name for r in rows] == ["a", "bad", "b"]
        assert rows[1].status == "failed" and "DimMismatch" in rows[1].error
        assert rows[0].status == rows[2].status == "ok"
        assert (rows[0].accuracy, rows[0].auc) == (rows[2].accuracy, rows[2].auc)
        assert sweep_to_csv(rows).count("\n") == 4
