"""Accuracy / precision / recall, ROC-AUC and per-nonword reports."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, EmptyTestSplit, MissingModelForWord, SingleClassInput

DEFAULT_THRESHOLD = 0.5
REPORT_COLUMNS = ("nonword_id", "support", "accuracy", "precision", "recall", "auc", "flags")


@dataclass(frozen=True)
class Confusion:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision_undefined(self):
        return self.tp + self.fp == 0

    @property
    def recall_undefined(self):
        return self.tp + self.fn == 0

    def __iter__(self):
        return iter((self.accuracy, self.precision, self.recall))


def _binary(labels, positive_label):
    return np.asarray([l == positive_label for l in labels], dtype=bool)


def confusion_metrics(scores, labels, threshold=DEFAULT_THRESHOLD, positive_label=1):
    """Threshold ``scores`` (positive iff ``score >= threshold``) and count.

    Precision or recall with a zero denominator is reported as 0; the
    ``*_undefined`` properties flag those cells. Iterating the result yields
    ``(accuracy, precision, recall)``.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise EmptyInput("no samples to score")
    truth = _binary(labels, positive_label)
    if truth.size != scores.size:
        raise ValueError(f"{scores.size} scores for {truth.size} labels")
    pred = scores >= threshold
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return Confusion(
        accuracy=(tp + tn) / scores.size,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


@dataclass(frozen=True, eq=False)
class RocCurve:
    """ROC points from (0, 0) to (1, 1); ``thresholds[i]`` produced point ``i`` (inf for the origin)."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self):
        return [(float(f), float(t)) for f, t in zip(self.fpr, self.tpr)]


def roc_auc(scores, labels, positive_label=1):
    """ROC curve and its trapezoidal area.

    Thresholds sweep the distinct scores from high to low; tied scores move
    the curve diagonally, which gives ties half credit. The area is summed
    in integer counts, so it equals the Mann-Whitney statistic exactly.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truth = _binary(labels, positive_label)
    if truth.size != scores.size:
        raise ValueError(f"{scores.size} scores for {truth.size} labels")
    n_pos = int(truth.sum())
    n_neg = int(truth.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput(f"need both classes, got {n_pos} positive and {n_neg} negative")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    tp_cum = np.cumsum(t)
    fp_cum = np.cumsum(~t)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, tp_cum[ends]].astype(np.int64)
    fp = np.r_[0, fp_cum[ends]].astype(np.int64)
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    curve = RocCurve(fpr=fp / n_neg, tpr=tp / n_pos, thresholds=np.r_[np.inf, s[ends]])
    return curve, auc


@dataclass
class MetricRow:
    nonword_id: object
    support: int
    accuracy: float
    precision: float
    recall: float
    auc: float
    flags: tuple = ()

    def as_csv_row(self):
        return [
            self.nonword_id,
            self.support,
            repr(float(self.accuracy)),
            repr(float(self.precision)),
            repr(float(self.recall)),
            repr(float(self.auc)),
            ";".join(self.flags),
        ]


@dataclass
class EvalReport:
    rows: list
    aggregate: MetricRow
    auc_std_dev: float
    threshold: float = DEFAULT_THRESHOLD
    positive_label: str = "incorrect"
    roc: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def row(self, nonword_id):
        for r in self.rows:
            if r.nonword_id == nonword_id:
                return r
        raise KeyError(nonword_id)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(r.as_csv_row())
        writer.writerow(self.aggregate.as_csv_row())
        return buf.getvalue()

    def to_json(self):
        def row_dict(r):
            return {
                "nonword_id": r.nonword_id,
                "support": r.support,
                "accuracy": r.accuracy,
                "precision": r.precision,
                "recall": r.recall,
                "auc": r.auc,
                "flags": list(r.flags),
            }

        doc = {
            "threshold": self.threshold,
            "positive_label": self.positive_label,
            "auc_std_dev": self.auc_std_dev,
            "rows": [row_dict(r) for r in self.rows],
            "aggregate": row_dict(self.aggregate),
            "roc": {str(k): {"points": c.points()} for k, c in self.roc.items()},
            "notes": self.notes,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def score_row(nonword_id, scores, labels, threshold=DEFAULT_THRESHOLD, positive_label=1):
    """Metrics for one subset; returns ``(MetricRow, RocCurve or None)``."""
    cm = confusion_metrics(scores, labels, threshold, positive_label)
    flags = []
    if cm.precision_undefined:
        flags.append("precision_undefined")
    if cm.recall_undefined:
        flags.append("recall_undefined")
    try:
        curve, auc = roc_auc(scores, labels, positive_label)
    except SingleClassInput:
        curve, auc = None, 0.0
        flags.append("auc_undefined")
    row = MetricRow(nonword_id, len(scores), cm.accuracy, cm.precision, cm.recall, auc, tuple(flags))
    return row, curve


def aggregate_rows(rows, label="weighted"):
    """Support-weighted mean of per-nonword rows plus the population SD of their AUCs.

    Rows flagged ``auc_undefined`` are left out of the AUC mean and SD.
    """
    support = np.array([r.support for r in rows], dtype=np.float64)
    total = support.sum()

    def wmean(values, w):
        return float(np.dot(values, w) / w.sum()) if w.sum() > 0 else 0.0

    has_auc = np.array(["auc_undefined" not in r.flags for r in rows])
    aucs = np.array([r.auc for r in rows])
    flags = () if has_auc.any() else ("auc_undefined",)
    agg = MetricRow(
        nonword_id=label,
        support=int(total),
        accuracy=wmean([r.accuracy for r in rows], support),
        precision=wmean([r.precision for r in rows], support),
        recall=wmean([r.recall for r in rows], support),
        auc=wmean(aucs[has_auc], support[has_auc]) if has_auc.any() else 0.0,
        flags=flags,
    )
    sd = float(np.std(aucs[has_auc])) if has_auc.any() else 0.0
    return agg, sd


def evaluate_scores(scores_by_word, labels_by_word, threshold=DEFAULT_THRESHOLD, positive_label=1, report_label="incorrect"):
    """Build an :class:`EvalReport` from precomputed per-nonword scores."""
    if not scores_by_word:
        raise EmptyTestSplit("no test utterances to evaluate")
    rows, roc = [], {}
    for wid in sorted(scores_by_word):
        row, curve = score_row(wid, scores_by_word[wid], labels_by_word[wid], threshold, positive_label)
        rows.append(row)
        if curve is not None:
            roc[wid] = curve
    agg, sd = aggregate_rows(rows)
    return EvalReport(rows=rows, aggregate=agg, auc_std_dev=sd, threshold=threshold, positive_label=report_label, roc=roc)


def evaluate(models, manifest, features, threshold=DEFAULT_THRESHOLD):
    """Score the test split and report per nonword.

    ``models`` is either one word-independent classifier or a mapping
    ``nonword_id -> classifier``. Each test utterance is scored by its
    word's model (or the shared one).
    """
    from .model import prepare_inputs

    test = manifest.subset(split="test")
    if len(test) == 0:
        raise EmptyTestSplit("manifest has no test records")
    truncated = 0
    scores_by_word, labels_by_word = {}, {}
    for wid in test.nonword_ids:
        recs = test.subset(nonword_id=wid)
        if isinstance(models, dict):
            if wid not in models:
                raise MissingModelForWord(f"no model for nonword {wid}")
            model = models[wid]
        else:
            model = models
        x, n_trunc = prepare_inputs([features[r.utterance_id] for r in recs], model.spec, count_truncated=True)
        truncated += n_trunc
        scores_by_word[wid] = model.predict(x)
        labels_by_word[wid] = recs.targets()
    report = evaluate_scores(scores_by_word, labels_by_word, threshold, positive_label=1.0, report_label=manifest.positive_label)
    report.notes["truncated_inputs"] = truncated
    report.notes["model_scope"] = "word_dependent" if isinstance(models, dict) else "word_independent"
    return report
