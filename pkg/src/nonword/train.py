"""Word-independent training, early stopping and word-dependent fine-tuning."""

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .dataset import class_weights, load_feature_dir
from .errors import EmptySplit, ModeMismatch, NonwordError, SingleClassSplit
from .model import Classifier, nn_layers, prepare_inputs, spec_for_features, with_adapter

log = logging.getLogger(__name__)

FINETUNE_MODES = ("none", "ft_last_layer", "ft_all_layers", "ft_add_layer", "from_scratch")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10  # None disables early stopping
    batch_size: int = 16
    seed: int = 0
    finetune_mode: str = "none"
    finetune_lr: float = 1e-5

    def __post_init__(self):
        if not self.lr > 0 or not self.finetune_lr > 0:
            raise ValueError("learning rates must be positive")
        if self.patience is not None and self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"finetune_mode must be one of {FINETUNE_MODES}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best_val_loss(self):
        return min((e.val_loss for e in self.epochs), default=math.inf)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for e in self.epochs:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_acc)])
        return buf.getvalue()

    def to_dict(self):
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch, "stop_reason": self.stop_reason}

    @classmethod
    def from_dict(cls, d):
        return cls([EpochRecord(**e) for e in d["epochs"]], d["best_epoch"], d["stop_reason"])


@dataclass
class TrainState:
    """Everything needed to continue an interrupted run.

    ``info`` is JSON-serializable; ``arrays`` groups float32 arrays as
    ``param`` / ``buffer`` (the last-epoch weights, not the restored best),
    ``adam_m`` and ``adam_v``.
    """

    info: dict
    arrays: dict


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray


def _split_data(manifest, features, spec, split):
    sub = manifest.subset(split=split)
    x = prepare_inputs([features[r.utterance_id] for r in sub.records], spec)
    return Split(x, sub.targets())


def _require_splits(manifest, word=None):
    where = "" if word is None else f" for nonword {word}"
    for name in ("train", "val"):
        if not any(r.split == name for r in manifest.records):
            raise EmptySplit(f"split {name!r} is empty{where}")


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_arrays().items()}


def _restore(model, arrays):
    for k, v in model.state_arrays().items():
        v[...] = arrays[k]


def fit(model, train, val, weights, cfg, lr, positive_label="incorrect", resume=None):
    """Mini-batch Adam on weighted BCE with early stopping on validation loss.

    Only unfrozen layers are updated. Shuffling and dropout draw from
    generators seeded by ``(cfg.seed, epoch[, batch])``, so a run resumed
    from its :class:`TrainState` continues exactly as if uninterrupted. On
    return ``model`` holds the best-validation-loss weights and
    ``model.train_state`` the last-epoch state.
    """
    params = model.parameters(trainable_only=True)
    adam = nn.AdamState(lr=lr)
    trainlog = TrainLog()
    best = _snapshot(model)
    best_val, wait, start = math.inf, 0, 1
    if resume is not None:
        info = resume.info
        _restore(model, {**resume.arrays["param"], **resume.arrays["buffer"]})
        best = _snapshot(model)
        for k in best:
            if k in resume.arrays.get("best", {}):
                best[k] = resume.arrays["best"][k].copy()
        adam.step_count = info["step_count"]
        adam.m = {k: v.copy() for k, v in resume.arrays.get("adam_m", {}).items()}
        adam.v = {k: v.copy() for k, v in resume.arrays.get("adam_v", {}).items()}
        trainlog = TrainLog.from_dict(info["log"])
        best_val, wait, start = info["best_val_loss"], info["wait"], info["epoch"] + 1
        if trainlog.stop_reason == "early_stopping":
            start = cfg.max_epochs + 1

    n = len(train.y)
    stopped = trainlog.stop_reason == "early_stopping"
    for epoch in range(start, cfg.max_epochs + 1):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo : lo + cfg.batch_size]
            out, cache = nn.forward(model.layers, train.x[idx], training=True, rng_seed=[cfg.seed, epoch, b])
            total += nn.weighted_bce(out, train.y[idx], weights, positive_label) * len(idx)
            grad = nn.weighted_bce_grad(out, train.y[idx].reshape(out.shape), weights, positive_label)
            grads, _ = nn.backward(model.layers, cache, grad)
            nn.adam_step(adam, params, grads)
        val_pred = model.predict(val.x)
        val_loss = nn.weighted_bce(val_pred, val.y)
        val_acc = float(np.mean((val_pred >= 0.5) == (val.y > 0.5)))
        trainlog.epochs.append(EpochRecord(epoch, total / n, val_loss, val_acc))
        if val_loss < best_val:
            best_val, wait = val_loss, 0
            trainlog.best_epoch = epoch
            best = _snapshot(model)
        else:
            wait += 1
            if cfg.patience is not None and wait >= cfg.patience:
                stopped = True
                break
    trainlog.stop_reason = "early_stopping" if stopped else "max_epochs"

    last = _snapshot(model)
    state_info = {
        "epoch": trainlog.epochs[-1].epoch if trainlog.epochs else 0,
        "step_count": adam.step_count,
        "best_val_loss": best_val,
        "wait": wait,
        "log": trainlog.to_dict(),
    }
    buffer_names = set(model.buffers())
    model.train_state = TrainState(
        info=state_info,
        arrays={
            "param": {k: v for k, v in last.items() if k not in buffer_names},
            "buffer": {k: v for k, v in last.items() if k in buffer_names},
            "best": best,
            "adam_m": {k: v.copy() for k, v in adam.m.items()},
            "adam_v": {k: v.copy() for k, v in adam.v.items()},
        },
    )
    _restore(model, best)
    return trainlog


def _metadata(cfg, lr, weights, trainlog, **extra):
    meta = {
        "seed": cfg.seed,
        "lr": lr,
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "epochs_run": len(trainlog.epochs),
        "best_epoch": trainlog.best_epoch,
        "best_val_loss": trainlog.best_val_loss,
        "stop_reason": trainlog.stop_reason,
        "class_weights": {"correct": weights.w_correct, "incorrect": weights.w_incorrect},
    }
    meta.update(extra)
    return meta


def train_word_independent(manifest, features, cfg=TrainConfig(), spec=None, resume=None):
    """Train one classifier on all nonwords pooled.

    ``features`` maps utterance id to :class:`~nonword.features.FeatureMatrix`.
    Unless ``spec`` is given, the architecture is chosen from the features
    and the CNN frame axis is the longest utterance in the manifest.
    ``resume`` is a classifier carrying a :class:`TrainState`.
    Returns ``(classifier, TrainLog)``.
    """
    _require_splits(manifest)
    weights = class_weights(manifest, "train")
    if resume is not None:
        model = resume
        spec = model.spec
        state = model.train_state
        if state is None:
            raise ValueError("resume model carries no training state")
    else:
        if spec is None:
            spec = spec_for_features(features[r.utterance_id] for r in manifest.records)
        model = Classifier.initialize(spec, cfg.seed)
        state = None
    train = _split_data(manifest, features, spec, "train")
    val = _split_data(manifest, features, spec, "val")
    trainlog = fit(model, train, val, weights, cfg, cfg.lr, manifest.positive_label, resume=state)
    model.metadata.update(_metadata(cfg, cfg.lr, weights, trainlog, scope="word_independent", finetune_mode="none"))
    return model, trainlog



def finetune_word_dependent(base, manifest, features, nonword_id, cfg):
    """Derive a per-nonword model from a word-independent ``base``.

    Modes
    -----
    ft_last_layer
        Only the output dense layer trains (at ``cfg.lr``).
    ft_all_layers
        Every layer trains at ``cfg.finetune_lr``.
    ft_add_layer
        A 16-unit dense + ReLU is inserted before a freshly initialized
        output layer; only those two dense layers train.
    from_scratch
        The base weights are ignored; same architecture, new initialization.

    All splits are filtered to ``nonword_id`` and class weights are
    recomputed on the filtered training split. When the word has no
    validation records, the pooled validation split is used instead and
    ``metadata["val_scope"]`` says so.
    Returns ``(classifier, TrainLog)``.
    """
    mode = cfg.finetune_mode
    if mode == "none" or mode not in FINETUNE_MODES:
        raise ModeMismatch(f"finetune_mode {mode!r} is not a fine-tuning mode")
    if base.spec.nonword_id is not None:
        raise ModeMismatch(f"base model is already word-dependent (nonword {base.spec.nonword_id})")

    word = manifest.subset(nonword_id=nonword_id)
    if not any(r.split == "train" for r in word.records):
        raise EmptySplit(f"split 'train' is empty for nonword {nonword_id}")
    try:
        weights = class_weights(word, "train")
    except SingleClassSplit as exc:
        raise SingleClassSplit(f"nonword {nonword_id}: {exc}") from None
    val_scope = "word"
    val_manifest = word
    if not any(r.split == "val" for r in word.records):
        log.warning("nonword %d has no validation records; validating on the pooled split", nonword_id)
        val_scope = "global"
        val_manifest = manifest
    if not any(r.split == "val" for r in val_manifest.records):
        raise EmptySplit("split 'val' is empty")

    lr = cfg.lr
    if mode == "from_scratch":
        spec = replace(base.spec, nonword_id=nonword_id)
        model = Classifier.initialize(spec, cfg.seed)
        trainable = None
    elif mode == "ft_add_layer":
        spec = replace(with_adapter(base.spec), nonword_id=nonword_id)
        model = Classifier(spec, nn_layers(spec, cfg.seed))
        base_arrays = base.state_arrays()
        for name, arr in model.state_arrays().items():
            if not (name.startswith("adapter.") or name.startswith("out.")):
                arr[...] = base_arrays[name]
        trainable = {"adapter", "out"}
    else:
        model = base.copy()
        model.spec = replace(base.spec, nonword_id=nonword_id)
        trainable = {"out"} if mode == "ft_last_layer" else None
        if mode == "ft_all_layers":
            lr = cfg.finetune_lr
    model.train_state = None
    model.metadata = {"init_seed": cfg.seed}
    model.set_frozen(trainable)

    train = _split_data(word, features, model.spec, "train")
    val = _split_data(val_manifest, features, model.spec, "val")
    trainlog = fit(model, train, val, weights, cfg, lr, manifest.positive_label)
    model.train_state = None
    model.metadata.update(
        _metadata(
            cfg,
            lr,
            weights,
            trainlog,
            scope="word_dependent",
            finetune_mode=mode,
            nonword_id=nonword_id,
            val_scope=val_scope,
            trainable_layers=sorted(l.name for l in model.layers if not l.frozen and l.params),
        )
    )
    return model, trainlog


@dataclass
class SweepRow:
    name: str
    status: str
    dims: int = 0
    accuracy: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    auc: float = 0.0
    error: str = ""


SWEEP_COLUMNS = ("feature_set", "status", "dims", "accuracy", "precision", "recall", "auc", "error")


def sweep_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([r.name, r.status, r.dims, repr(r.accuracy), repr(r.precision), repr(r.recall), repr(r.auc), r.error])
    return buf.getvalue()


def _sweep_one(feature_dir, manifest, cfg):
    from .evaluation import evaluate

    name = Path(feature_dir).name
    try:
        features = load_feature_dir(feature_dir, manifest)
        model, _ = train_word_independent(manifest, features, cfg)
        report = evaluate(model, manifest, features)
    except (NonwordError, OSError, ValueError) as exc:
        kind = getattr(exc, "kind", type(exc).__name__)
        return SweepRow(name, "failed", error=f"{kind}: {exc}")
    agg = report.aggregate
    dims = model.spec.input_shape[-1]
    return SweepRow(name, "ok", dims, agg.accuracy, agg.precision, agg.recall, agg.auc)


def sweep_feature_sets(feature_dirs, manifest, cfg=TrainConfig(), jobs=1):
    """Train and test one word-independent model per feature directory.

    Rows come back in input order with support-weighted test metrics; a
    failing set yields a ``failed`` row and the others still run.
    """
    if jobs <= 1:
        return [_sweep_one(d, manifest, cfg) for d in feature_dirs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda d: _sweep_one(d, manifest, cfg), feature_dirs))
