"""Manifests, splitting, class weights and the NWF1 feature file format."""

import csv
import io
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadLabel,
    BadMagic,
    BadNonwordId,
    DimMismatch,
    DuplicateId,
    EmptySplit,
    FeatureError,
    ManifestError,
    MissingColumn,
    NonFiniteValue,
    SingleClassSplit,
)
from .features import FeatureKind, FeatureMatrix

MANIFEST_COLUMNS = ("utterance_id", "speaker_id", "nonword_id", "label", "path", "split")
LABELS = ("correct", "incorrect")
SPLITS = ("train", "val", "test", "unassigned")
TRAIN_FRACTION = 0.75
VAL_FRACTION_OF_TEST = 0.25

NWF_MAGIC = b"NWF1"
NWF_VERSION = 1
NWF_HEADER = struct.Struct("<4sIBIId")
FEATURE_SUFFIX = ".nwf"


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    nonword_id: int
    label: str
    path: str
    split: str = "unassigned"


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    positive_label: str = "incorrect"

    def __post_init__(self):
        if self.positive_label not in LABELS:
            raise BadLabel(f"positive_label must be one of {LABELS}, got {self.positive_label!r}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, split=None, nonword_id=None):
        recs = tuple(
            r
            for r in self.records
            if (split is None or r.split == split) and (nonword_id is None or r.nonword_id == nonword_id)
        )
        return replace(self, records=recs)

    def targets(self):
        """Binary targets, 1 for the positive label."""
        return np.array([r.label == self.positive_label for r in self.records], dtype=np.float64)

    @property
    def nonword_ids(self):
        return sorted({r.nonword_id for r in self.records})

    @property
    def is_split(self):
        return any(r.split != "unassigned" for r in self.records)


def parse_manifest(text, positive_label="incorrect"):
    """Parse manifest CSV text.

    Raises
    ------
    MissingColumn, DuplicateId, BadNonwordId, BadLabel
        The message names the offending data row (1-based, header excluded).
    """
    reader = csv.DictReader(io.StringIO(text))
    header = tuple(reader.fieldnames or ())
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"header lacks column(s): {', '.join(missing)}")
    records = []
    seen = set()
    for row_no, row in enumerate(reader, start=1):
        if any(row.get(c) is None for c in MANIFEST_COLUMNS):
            raise MissingColumn(f"row {row_no}: too few fields")
        uid = row["utterance_id"]
        if uid in seen:
            raise DuplicateId(f"row {row_no}: utterance_id {uid!r} already used")
        seen.add(uid)
        try:
            nonword_id = int(row["nonword_id"])
        except ValueError:
            raise BadNonwordId(f"row {row_no}: nonword_id {row['nonword_id']!r} is not an integer") from None
        if not 1 <= nonword_id <= 7:
            raise BadNonwordId(f"row {row_no}: nonword_id {nonword_id} outside 1..7")
        label = row["label"]
        if label not in LABELS:
            raise BadLabel(f"row {row_no}: label {label!r} not in {LABELS}")
        split = row["split"] if row["split"] in SPLITS else "unassigned"
        records.append(
            UtteranceRecord(
                utterance_id=uid,
                speaker_id=row["speaker_id"],
                nonword_id=nonword_id,
                label=label,
                path=row["path"],
                split=split,
            )
        )
    return DatasetManifest(records=tuple(records), positive_label=positive_label)


def format_manifest(manifest):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        writer.writerow([r.utterance_id, r.speaker_id, r.nonword_id, r.label, r.path, r.split])
    return buf.getvalue()


def read_manifest(path, positive_label="incorrect"):
    return parse_manifest(Path(path).read_text(encoding="utf-8"), positive_label)


def write_manifest(path, manifest):
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


def round_half_up(x):
    return int(math.floor(x + 0.5))


def _split_sizes(n):
    n_train = round_half_up(TRAIN_FRACTION * n)
    n_val = round_half_up(VAL_FRACTION_OF_TEST * (n - n_train))
    return n_train, n_val


def split_dataset(manifest, seed=0, speaker_disjoint=False):
    """Random 75 / 25 train / test split, then the first quarter of test becomes val.

    Shuffling uses numpy's PCG64 generator seeded with ``seed``. Boundaries
    are rounded half up. With ``speaker_disjoint`` the same fractions apply
    to shuffled speakers and every utterance follows its speaker.
    """
    if manifest.is_split:
        raise ManifestError("manifest already carries split assignments")
    rng = np.random.default_rng(seed)
    if speaker_disjoint:
        speakers = sorted({r.speaker_id for r in manifest.records})
        order = [speakers[i] for i in rng.permutation(len(speakers))]
        n_train, n_val = _split_sizes(len(order))
        assign = {}
        for pos, spk in enumerate(order):
            assign[spk] = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
        records = tuple(replace(r, split=assign[r.speaker_id]) for r in manifest.records)
    else:
        perm = rng.permutation(len(manifest.records))
        n_train, n_val = _split_sizes(len(perm))
        split_of = [None] * len(perm)
        for pos, idx in enumerate(perm):
            split_of[idx] = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
        records = tuple(replace(r, split=s) for r, s in zip(manifest.records, split_of))
    out = replace(manifest, records=records)
    for name in ("train", "val", "test"):
        if not any(r.split == name for r in records):
            raise EmptySplit(f"split {name!r} received no records")
    return out


@dataclass(frozen=True)
class ClassWeights:
    w_correct: float = 1.0
    w_incorrect: float = 1.0

    def for_label(self, label):
        return self.w_correct if label == "correct" else self.w_incorrect

    def positive_negative(self, positive_label="incorrect"):
        """``(weight for target 1, weight for target 0)``."""
        if positive_label == "incorrect":
            return self.w_incorrect, self.w_correct
        return self.w_correct, self.w_incorrect


def class_weights(manifest, split="train"):
    """Balanced inverse-frequency weights ``N / (2 * N_c)``."""
    recs = manifest.records if split is None else [r for r in manifest.records if r.split == split]
    n = len(recs)
    n_correct = sum(r.label == "correct" for r in recs)
    n_incorrect = n - n_correct
    if n_correct == 0 or n_incorrect == 0:
        raise SingleClassSplit(
            f"split {split!r} has {n_correct} correct and {n_incorrect} incorrect records"
        )
    return ClassWeights(w_correct=n / (2.0 * n_correct), w_incorrect=n / (2.0 * n_incorrect))


def encode_features(fm):
    data = np.ascontiguousarray(fm.data, dtype="<f4")
    header = NWF_HEADER.pack(NWF_MAGIC, NWF_VERSION, int(fm.kind), fm.frames, fm.dims, float(fm.hop_seconds))
    return header + data.tobytes()


def decode_features(blob, utterance_id=""):
    """Parse an NWF1 byte string.

    Raises
    ------
    BadMagic
        Wrong magic, version or kind byte.
    DimMismatch
        Payload size disagrees with the header's frames x dims.
    NonFiniteValue
        The payload contains NaN or inf.
    """
    if len(blob) < NWF_HEADER.size:
        raise DimMismatch(f"{len(blob)} bytes is shorter than the {NWF_HEADER.size}-byte header")
    magic, version, kind, frames, dims, hop = NWF_HEADER.unpack_from(blob)
    if magic != NWF_MAGIC:
        raise BadMagic(f"magic {magic!r} != {NWF_MAGIC!r}")
    if version != NWF_VERSION:
        raise BadMagic(f"unsupported NWF version {version}")
    try:
        kind = FeatureKind(kind)
    except ValueError:
        raise BadMagic(f"unknown feature kind {kind}") from None
    expected = NWF_HEADER.size + 4 * frames * dims
    if len(blob) != expected:
        raise DimMismatch(f"{frames}x{dims} header needs {expected} bytes, file has {len(blob)}")
    if frames < 1 or dims < 1:
        raise DimMismatch(f"empty matrix {frames}x{dims}")
    data = np.frombuffer(blob, dtype="<f4", offset=NWF_HEADER.size).reshape(frames, dims).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("payload contains non-finite values")
    if kind == FeatureKind.UTTERANCE_EMBEDDING and frames != 1:
        raise DimMismatch(f"utterance embedding must have 1 frame, header says {frames}")
    if kind == FeatureKind.FRAME_EMBEDDING and not hop > 0:
        raise FeatureError(f"frame embedding needs a positive hop, got {hop}")
    return FeatureMatrix(data=data, hop_seconds=float(hop), kind=kind, utterance_id=utterance_id)


def write_features(path, fm):
    Path(path).write_bytes(encode_features(fm))


def ingest_features(path, utterance_id=None):
    path = Path(path)
    uid = path.stem if utterance_id is None else utterance_id
    return decode_features(path.read_bytes(), utterance_id=uid)


def feature_path(feature_dir, utterance_id):
    return Path(feature_dir) / f"{utterance_id}{FEATURE_SUFFIX}"


def load_feature_dir(feature_dir, manifest):
    """Load ``<dir>/<utterance_id>.nwf`` for every manifest record."""
    return {r.utterance_id: ingest_features(feature_path(feature_dir, r.utterance_id)) for r in manifest.records}
