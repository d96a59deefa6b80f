"""WAV decoding, encoding and resampling.

Only uncompressed RIFF/WAVE is handled: integer PCM (16/24/32 bit) and
IEEE float32, any channel count. Everything is downmixed to mono float64
in [-1, 1].
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import CANONICAL_RATE
from .errors import EmptyAudio, MalformedHeader, UnsupportedEncoding

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono audio samples with their sample rate."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def _iter_chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        yield cid, body, len(body) == size
        pos += 8 + size + (size & 1)


def decode_wav(data, source_id=""):
    """Decode a RIFF/WAVE byte string into an :class:`AudioClip`.

    Multi-channel input is averaged to mono. Integer samples are divided by
    ``2 ** (bits - 1)``; float samples are clipped to [-1, 1].
    """
    data = bytes(data)
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader("missing RIFF/WAVE magic")

    fmt = None
    payload = None
    for cid, body, complete in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeader("fmt chunk shorter than 16 bytes")
            fmt = body
        elif cid == b"data":
            payload = body
    if fmt is None:
        raise MalformedHeader("no fmt chunk")
    if payload is None:
        raise MalformedHeader("no data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedHeader("truncated WAVE_FORMAT_EXTENSIBLE header")
        # first two bytes of the SubFormat GUID carry the real format tag
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels == 0 or rate == 0:
        raise MalformedHeader(f"channels={channels} rate={rate}")
    if block_align != channels * (bits // 8):
        raise MalformedHeader("block_align inconsistent with channels and bits")

    if tag == WAVE_FORMAT_PCM and bits in (16, 32):
        dtype = "<i2" if bits == 16 else "<i4"
        n = len(payload) // block_align
        raw = np.frombuffer(payload[: n * block_align], dtype=dtype)
        samples = raw.astype(np.float64) / float(2 ** (bits - 1))
    elif tag == WAVE_FORMAT_PCM and bits == 24:
        n = len(payload) // block_align
        b = np.frombuffer(payload[: n * block_align], dtype=np.uint8).reshape(-1, 3)
        ints = b[:, 0].astype(np.int32) | (b[:, 1].astype(np.int32) << 8) | (b[:, 2].astype(np.int32) << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float64) / float(1 << 23)
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        n = len(payload) // block_align
        raw = np.frombuffer(payload[: n * block_align], dtype="<f4")
        samples = raw.astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise UnsupportedEncoding("non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise UnsupportedEncoding(f"format tag 0x{tag:04x} with {bits} bits")

    if samples.size == 0:
        raise EmptyAudio("data chunk holds no complete frames")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate), source_id=source_id)


def read_wav(path, source_id=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_wav(data, source_id=str(path) if source_id is None else source_id)


def encode_wav(clip, encoding="float32"):
    """Serialize a mono clip as a WAV byte string (``float32`` or ``pcm16``)."""
    x = np.clip(np.asarray(clip.samples, dtype=np.float64), -1.0, 1.0)
    if encoding == "float32":
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = x.astype("<f4").tobytes()
    elif encoding == "pcm16":
        tag, bits = WAVE_FORMAT_PCM, 16
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block_align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * block_align, block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, clip, encoding="float32"):
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip, encoding))


def resample(clip, target_rate=CANONICAL_RATE):
    """Linear-interpolation resampling.

    The output has ``round(len * target / source)`` samples; output sample
    ``i`` is read at input position ``i * source / target``.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    n_in = len(clip.samples)
    n_out = max(1, int(round(n_in * target_rate / clip.sample_rate)))
    pos = np.arange(n_out) * (clip.sample_rate / target_rate)
    out = np.interp(pos, np.arange(n_in), clip.samples)
    return AudioClip(samples=out, sample_rate=int(target_rate), source_id=clip.source_id)


def load_canonical(path, source_id=None):
    """Read a WAV file and resample it to the canonical rate."""
    return resample(read_wav(path, source_id), CANONICAL_RATE)
