"""Classifier architectures and the NWCK checkpoint format."""

import json
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import CorruptBlob, InputTooSmall, ShapeMismatch, VersionMismatch
from .nn import LayerSpec

VGG_FILTERS = (4, 8, 16, 32, 64)
MLP_HIDDEN = 256
ADAPTER_WIDTH = 16
DROPOUT_RATE = 0.5
UTTERANCE_EMBEDDING_DIMS = 192

CKPT_MAGIC = b"NWCK"
CKPT_VERSION = 1
TRAIN_PREFIX = "train/"


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_shape: tuple
    layers: tuple
    nonword_id: int = None
    feature_kind: str = "mel"

    def __post_init__(self):
        if self.family not in ("vgg_cnn", "embedding_mlp"):
            raise ValueError(f"unknown model family {self.family!r}")
        last = self.layers[-1]
        head = self.layers[-2]
        if last.kind != "sigmoid" or head.kind != "dense" or head.args["out_units"] != 1:
            raise ValueError("a model must end in dense(1) -> sigmoid")
        if self.nonword_id is not None and not 1 <= self.nonword_id <= 7:
            raise ValueError(f"nonword_id {self.nonword_id} outside 1..7")

    @property
    def filters(self):
        return tuple(l.args["out_channels"] for l in self.layers if l.kind == "conv3x3")

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def to_dict(self):
        return {
            "family": self.family,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "nonword_id": self.nonword_id,
            "feature_kind": self.feature_kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            family=d["family"],
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            nonword_id=d.get("nonword_id"),
            feature_kind=d.get("feature_kind", "mel"),
        )


def _halve(n, times):
    for _ in range(times):
        n //= 2
    return n


def build_vgg(input_frames, input_dims, feature_kind="mel"):
    """Five conv blocks (4, 8, 16, 32, 64 filters) and a 64-unit dense head.

    Each block is conv3x3 -> ReLU -> batchnorm -> 2x2 max-pool. The input is
    a single-channel ``frames x dims`` image.
    """
    if input_frames < 32 or input_dims < 32:
        raise InputTooSmall(f"input {input_frames}x{input_dims}: both axes must be >= 32 for five poolings")
    layers = []
    in_ch = 1
    for i, out_ch in enumerate(VGG_FILTERS, start=1):
        layers += [
            LayerSpec("conv3x3", f"conv{i}", {"in_channels": in_ch, "out_channels": out_ch}),
            LayerSpec("relu", f"relu{i}"),
            LayerSpec("batchnorm", f"bn{i}", {"channels": out_ch, "momentum": 0.9, "epsilon": 1e-5}),
            LayerSpec("maxpool2x2", f"pool{i}"),
        ]
        in_ch = out_ch
    flat = _halve(input_frames, 5) * _halve(input_dims, 5) * in_ch
    hidden = VGG_FILTERS[-1]
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", {"in_units": flat, "out_units": hidden}),
        LayerSpec("relu", "fc1_relu"),
        LayerSpec("dropout", "fc1_dropout", {"rate": DROPOUT_RATE}),
        LayerSpec("dense", "out", {"in_units": hidden, "out_units": 1}),
        LayerSpec("sigmoid", "out_sigmoid"),
    ]
    return ModelSpec("vgg_cnn", (1, int(input_frames), int(input_dims)), tuple(layers), feature_kind=feature_kind)


def build_embedding_mlp(input_dims=UTTERANCE_EMBEDDING_DIMS, feature_kind="utterance_embedding"):
    """Two dense layers for fixed-length utterance embeddings: in -> 256 -> 1."""
    layers = (
        LayerSpec("dense", "fc1", {"in_units": int(input_dims), "out_units": MLP_HIDDEN}),
        LayerSpec("relu", "fc1_relu"),
        LayerSpec("dropout", "fc1_dropout", {"rate": DROPOUT_RATE}),
        LayerSpec("dense", "out", {"in_units": MLP_HIDDEN, "out_units": 1}),
        LayerSpec("sigmoid", "out_sigmoid"),
    )
    return ModelSpec("embedding_mlp", (int(input_dims),), layers, feature_kind=feature_kind)


def with_adapter(spec, width=ADAPTER_WIDTH):
    """Insert dense(width) -> ReLU before the output layer, reshaping the output to ``width -> 1``."""
    names = [l.name for l in spec.layers]
    i = names.index("out")
    prev_units = spec.layers[i].args["in_units"]
    layers = list(spec.layers)
    layers[i] = LayerSpec("dense", "out", {"in_units": width, "out_units": 1})
    layers[i:i] = [
        LayerSpec("dense", "adapter", {"in_units": prev_units, "out_units": width}),
        LayerSpec("relu", "adapter_relu"),
    ]
    return replace(spec, layers=tuple(layers))


def parameter_count(spec):
    total = 0
    for layer in nn_layers(spec, seed=0):
        total += sum(p.size for p in layer.params.values())
    return total


def nn_layers(spec, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return [nn.make_layer(l, rng=rng, dtype=dtype) for l in spec.layers]


class Classifier:
    """A :class:`ModelSpec` bound to live layers, plus training metadata."""

    def __init__(self, spec, layers, metadata=None, train_state=None):
        self.spec = spec
        self.layers = layers
        self.metadata = dict(metadata or {})
        self.train_state = train_state

    @classmethod
    def initialize(cls, spec, seed=0):
        return cls(spec, nn_layers(spec, seed), metadata={"init_seed": int(seed)})

    def check_batch(self, x):
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeMismatch(f"model expects inputs of shape {self.spec.input_shape}, got {tuple(x.shape[1:])}")

    def predict(self, x, batch_size=64):
        """Inference-mode probabilities of the positive class, shape ``(N,)``."""
        self.check_batch(x)
        out = []
        for start in range(0, len(x), batch_size):
            y, _ = nn.forward(self.layers, x[start : start + batch_size], training=False)
            out.append(y.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)

    def parameters(self, trainable_only=False):
        return nn.parameters(self.layers, trainable_only)

    def buffers(self):
        return nn.buffers(self.layers)

    def state_arrays(self):
        return {**self.parameters(), **self.buffers()}

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def set_frozen(self, trainable_layers=None):
        """Freeze every layer not named in ``trainable_layers`` (``None`` unfreezes all)."""
        for l in self.layers:
            l.frozen = trainable_layers is not None and l.name not in trainable_layers

    @property
    def frozen_layers(self):
        return [l.name for l in self.layers if l.frozen]

    def copy(self):
        return load_checkpoint(save_checkpoint(self))


def _pack_blob(name, arr):
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    key = name.encode("utf-8")
    return (
        struct.pack("<I", len(key))
        + key
        + struct.pack("<I", len(payload))
        + payload
        + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    )


def save_checkpoint(model):
    """Serialize a classifier (and any resumable training state) to bytes."""
    blobs = dict(model.state_arrays())
    header = {
        "spec": model.spec.to_dict(),
        "metadata": model.metadata,
        "frozen": model.frozen_layers,
        "shapes": {},
    }
    ts = model.train_state
    if ts is not None:
        header["train_state"] = ts.info
        for group, arrays in ts.arrays.items():
            for name, arr in arrays.items():
                blobs[f"{TRAIN_PREFIX}{group}/{name}"] = arr
    header["shapes"] = {k: list(np.shape(v)) for k, v in blobs.items()}
    spec_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(spec_bytes)), spec_bytes]
    for name in sorted(blobs):
        parts.append(_pack_blob(name, blobs[name]))
    return b"".join(parts)


def _read(buf, pos, n, what):
    if pos + n > len(buf):
        raise CorruptBlob(f"truncated while reading {what} at byte {pos}")
    return buf[pos : pos + n], pos + n


def read_blobs(data):
    """Parse a checkpoint into ``(header dict, {name: float32 array})``."""
    data = bytes(data)
    magic, pos = _read(data, 0, 4, "magic")
    if magic != CKPT_MAGIC:
        raise CorruptBlob(f"bad magic {magic!r}")
    raw, pos = _read(data, pos, 8, "header")
    version, spec_len = struct.unpack("<II", raw)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    raw, pos = _read(data, pos, spec_len, "spec")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBlob(f"unreadable spec: {exc}") from None
    shapes = header.get("shapes", {})
    blobs = {}
    while pos < len(data):
        raw, pos = _read(data, pos, 4, "blob name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, pos = _read(data, pos, name_len, "blob name")
        name = raw.decode("utf-8", errors="replace")
        raw, pos = _read(data, pos, 4, f"length of {name}")
        (n_bytes,) = struct.unpack("<I", raw)
        payload, pos = _read(data, pos, n_bytes, f"payload of {name}")
        raw, pos = _read(data, pos, 4, f"checksum of {name}")
        if struct.unpack("<I", raw)[0] != zlib.crc32(payload) & 0xFFFFFFFF:
            raise CorruptBlob(f"checksum mismatch in blob {name!r}")
        if name not in shapes:
            raise CorruptBlob(f"blob {name!r} not declared in header")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if arr.size != int(np.prod(shapes[name], dtype=np.int64)):
            raise CorruptBlob(f"blob {name!r} has {arr.size} values, header shape {shapes[name]}")
        blobs[name] = arr.reshape(shapes[name])
    missing = set(shapes) - set(blobs)
    if missing:
        raise CorruptBlob(f"missing blob(s): {', '.join(sorted(missing))}")
    return header, blobs


def load_checkpoint(data):
    """Rebuild a :class:`Classifier` from :func:`save_checkpoint` output."""
    from .train import TrainState

    header, blobs = read_blobs(data)
    spec = ModelSpec.from_dict(header["spec"])
    model = Classifier(spec, nn_layers(spec), metadata=header.get("metadata", {}))
    for name, arr in model.state_arrays().items():
        if name not in blobs:
            raise CorruptBlob(f"missing parameter {name!r}")
        if blobs[name].shape != arr.shape:
            raise CorruptBlob(f"{name}: shape {blobs[name].shape} != {arr.shape}")
        arr[...] = blobs[name]
    frozen = set(header.get("frozen", []))
    for layer in model.layers:
        layer.frozen = layer.name in frozen
    if "train_state" in header:
        arrays = {}
        for name, arr in blobs.items():
            if name.startswith(TRAIN_PREFIX):
                group, _, key = name[len(TRAIN_PREFIX) :].partition("/")
                arrays.setdefault(group, {})[key] = arr.copy()
        model.train_state = TrainState(info=header["train_state"], arrays=arrays)
    return model


def write_checkpoint(path, model):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


def prepare_inputs(fms, spec, count_truncated=False):
    """Stack feature matrices into a float32 batch shaped for ``spec``.

    CNN inputs are zero-padded or truncated to the model's frame count and
    get a channel axis; MLP inputs must be single-frame embeddings.
    """
    from .errors import DimMismatch
    from .features import pad_or_truncate

    n_trunc = 0
    if spec.family == "vgg_cnn":
        _, frames, dims = spec.input_shape
        x = np.zeros((len(fms), 1, frames, dims), dtype=np.float32)
        for i, fm in enumerate(fms):
            if fm.dims != dims:
                raise DimMismatch(f"{fm.utterance_id}: {fm.dims} dims, model expects {dims}")
            fixed = pad_or_truncate(fm, frames)
            n_trunc += fixed.truncated
            x[i, 0] = fixed.data
    else:
        (dims,) = spec.input_shape
        x = np.zeros((len(fms), dims), dtype=np.float32)
        for i, fm in enumerate(fms):
            if fm.frames != 1 or fm.dims != dims:
                raise DimMismatch(f"{fm.utterance_id}: {fm.frames}x{fm.dims}, model expects 1x{dims}")
            x[i] = fm.data[0]
    return (x, n_trunc) if count_truncated else x


def spec_for_features(fms, feature_kind=None):
    """Pick the architecture for a feature set: the MLP for utterance embeddings, else the CNN.

    The CNN's frame axis is the longest utterance in ``fms``.
    """
    from .errors import DimMismatch
    from .features import FeatureKind

    fms = list(fms)
    if not fms:
        raise ValueError("no feature matrices")
    dims = {fm.dims for fm in fms}
    kinds = {fm.kind for fm in fms}
    if len(dims) != 1:
        raise DimMismatch(f"inconsistent feature dims {sorted(dims)}")
    if len(kinds) != 1:
        raise DimMismatch(f"mixed feature kinds {sorted(k.label for k in kinds)}")
    kind = kinds.pop()
    (d,) = dims
    label = kind.label if feature_kind is None else feature_kind
    if kind == FeatureKind.UTTERANCE_EMBEDDING:
        return build_embedding_mlp(d, feature_kind=label)
    return build_vgg(max(fm.frames for fm in fms), d, feature_kind=label)
