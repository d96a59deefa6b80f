"""Low-level acoustic features.

STFT power spectra, a 128-band mel filterbank whose edges can be warped per
speaker (VTLN), an autocorrelation pitch tracker used to choose the warp
factor, and frame padding for batching.
"""

import logging
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .errors import ClipTooShort, InvalidAlpha

log = logging.getLogger(__name__)

ALPHA_MIN = 0.7
ALPHA_MAX = 1.4
LOG_FLOOR = 1e-10
DEFAULT_REFERENCE_F0 = 145.0


class FeatureKind(IntEnum):
    MEL = 0
    UTTERANCE_EMBEDDING = 1
    FRAME_EMBEDDING = 2
    SENONE_POSTERIOR = 3

    @property
    def label(self):
        return self.name.lower()

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        return cls[str(value).upper()]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """A frames x dims feature matrix for one utterance."""

    data: np.ndarray
    hop_seconds: float
    kind: FeatureKind
    utterance_id: str = ""
    warnings: tuple = ()

    def __post_init__(self):
        data = self.data
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature data must be a non-empty 2-D matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data contains non-finite values")
        if self.kind == FeatureKind.UTTERANCE_EMBEDDING and data.shape[0] != 1:
            raise ValueError("utterance embeddings must have exactly one frame")

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1]

    @property
    def truncated(self):
        return "Truncated" in self.warnings


@dataclass(frozen=True)
class StftConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    window: str = "hann"

    def frame_length(self, sample_rate):
        return int(round(self.frame_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate):
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def validate(self, sample_rate):
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.n_fft < self.frame_length(sample_rate):
            raise ValueError(f"n_fft={self.n_fft} shorter than frame length {self.frame_length(sample_rate)}")


def hann(n):
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x, frame_len, hop_len):
    n_frames = (len(x) - frame_len) // hop_len + 1
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop_len][:n_frames]


def compute_stft(clip, cfg=StftConfig()):
    """Power spectrogram, shape ``(frames, n_fft // 2 + 1)``.

    No centring or reflection padding: the frame count is
    ``(N - frame_len) // hop_len + 1``.
    """
    rate = clip.sample_rate
    cfg.validate(rate)
    frame_len = cfg.frame_length(rate)
    hop_len = cfg.hop_length(rate)
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < frame_len:
        raise ClipTooShort(f"{len(x)} samples < one {frame_len}-sample frame")
    frames = frame_signal(x, frame_len, hop_len) * hann(frame_len)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def mel_hz(f):
    """Hz to mel (HTK formula)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def hz_mel(m):
    """Mel to Hz, inverse of :func:`mel_hz`."""
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def check_alpha(alpha):
    if not (ALPHA_MIN <= alpha <= ALPHA_MAX) or not np.isfinite(alpha):
        raise InvalidAlpha(f"warp factor {alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]")


def warp_frequencies(freqs, alpha, nyquist):
    """Move frequencies to ``f / alpha``, clamped at Nyquist."""
    return np.minimum(np.asarray(freqs, dtype=np.float64) / alpha, nyquist)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    sample_rate: int
    n_fft: int
    n_mels: int
    warp_alpha: float
    weights: np.ndarray
    edge_freqs: np.ndarray
    unwarped_edges: np.ndarray

    @property
    def center_freqs(self):
        return self.edge_freqs[1:-1]

    @property
    def unclamped(self):
        """Mask of filters whose centre was not pushed onto Nyquist."""
        return self.unwarped_edges[1:-1] / self.warp_alpha < self.sample_rate / 2.0


def _triangles(edges, bin_freqs):
    n_mels = len(edges) - 2
    weights = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        row = np.zeros(len(bin_freqs))
        if c > lo:
            rising = (bin_freqs >= lo) & (bin_freqs <= c)
            row[rising] = (bin_freqs[rising] - lo) / (c - lo)
        if hi > c:
            falling = (bin_freqs > c) & (bin_freqs <= hi)
            row[falling] = (hi - bin_freqs[falling]) / (hi - c)
        peak = row.max()
        if peak > 0.0:
            row /= peak
        else:
            # filter narrower than the bin spacing: keep the nearest bin
            row[np.argmin(np.abs(bin_freqs - c))] = 1.0
        weights[m] = row
    return weights


def build_mel_filterbank(sample_rate=16000, n_fft=512, n_mels=128, warp_alpha=1.0):
    """Triangular mel filterbank with VTLN edge warping.

    ``n_mels + 2`` edges are spaced uniformly in mel between 0 Hz and
    Nyquist, then moved to ``min(f / warp_alpha, nyquist)``. Each triangle
    is scaled to a peak of exactly 1. Filters narrower than one FFT bin
    collapse onto the bin closest to their centre.
    """
    check_alpha(warp_alpha)
    nyquist = sample_rate / 2.0
    edges = hz_mel(np.linspace(0.0, mel_hz(nyquist), n_mels + 2))
    edges[-1] = nyquist
    warped = warp_frequencies(edges, warp_alpha, nyquist)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = _triangles(warped, bin_freqs)
    return MelFilterbank(
        sample_rate=int(sample_rate),
        n_fft=int(n_fft),
        n_mels=int(n_mels),
        warp_alpha=float(warp_alpha),
        weights=weights,
        edge_freqs=warped,
        unwarped_edges=edges,
    )


def mel_spectrogram(clip, stft_cfg=StftConfig(), bank=None, utterance_id=None):
    """Log mel spectrogram, ``log(power @ weights.T + 1e-10)``."""
    if bank is None:
        bank = build_mel_filterbank(clip.sample_rate, stft_cfg.n_fft)
    if bank.sample_rate != clip.sample_rate or bank.n_fft != stft_cfg.n_fft:
        raise ValueError(
            f"filterbank built for {bank.sample_rate} Hz / n_fft {bank.n_fft}, "
            f"clip is {clip.sample_rate} Hz / n_fft {stft_cfg.n_fft}"
        )
    power = compute_stft(clip, stft_cfg)
    data = np.log(power @ bank.weights.T + LOG_FLOOR)
    return FeatureMatrix(
        data=data,
        hop_seconds=stft_cfg.hop_length(clip.sample_rate) / clip.sample_rate,
        kind=FeatureKind.MEL,
        utterance_id=clip.source_id if utterance_id is None else utterance_id,
    )


@dataclass(frozen=True, eq=False)
class F0Track:
    """Per-frame pitch; ``f0`` is NaN on unvoiced frames."""

    f0: np.ndarray
    strength: np.ndarray
    hop_seconds: float

    @property
    def voiced(self):
        return ~np.isnan(self.f0)

    @property
    def voiced_f0(self):
        return self.f0[self.voiced]


def _nccf(frames, lags):
    """Normalized cross-correlation of each frame with itself at each lag."""
    n_frames, length = frames.shape
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    out = np.zeros((n_frames, len(lags)))
    for j, lag in enumerate(lags):
        head = frames[:, : length - lag]
        tail = frames[:, lag:]
        num = np.einsum("ij,ij->i", head, tail)
        e_head = sq[:, length - lag]
        e_tail = sq[:, length] - sq[:, lag]
        den = np.sqrt(e_head * e_tail)
        ok = den > 1e-12
        out[ok, j] = num[ok] / den[ok]
    return out


def estimate_f0(
    clip,
    fmin=120.0,
    fmax=600.0,
    frame_ms=40.0,
    hop_ms=10.0,
    voicing_threshold=0.5,
    octave_tolerance=0.95,
):
    """Autocorrelation pitch tracker.

    For every 40 ms frame the normalized autocorrelation is computed over
    lags corresponding to ``[fmin, fmax]``. The frame is voiced when its
    chosen peak reaches ``voicing_threshold``; peaks on the edge of the lag
    band are rejected, so pitches outside the band come out unvoiced. To
    avoid octave errors the shortest-lag local maximum within
    ``octave_tolerance`` of the best peak wins. The lag is refined by
    parabolic interpolation.
    """
    rate = clip.sample_rate
    frame_len = int(round(frame_ms * rate / 1000.0))
    hop_len = int(round(hop_ms * rate / 1000.0))
    x = np.asarray(clip.samples, dtype=np.float64)
    hop_s = hop_len / rate
    if len(x) < frame_len:
        return F0Track(np.zeros(0), np.zeros(0), hop_s)

    lag_lo = int(np.ceil(rate / fmax))
    lag_hi = int(np.floor(rate / fmin))
    # one guard lag on either side so that band-edge peaks can be recognised
    lags = np.arange(max(1, lag_lo - 1), min(frame_len - 1, lag_hi + 1) + 1)
    frames = frame_signal(x, frame_len, hop_len)
    frames = frames - frames.mean(axis=1, keepdims=True)
    r = _nccf(frames, lags)

    f0 = np.full(len(frames), np.nan)
    strength = np.zeros(len(frames))
    for i, row in enumerate(r):
        mid = row[1:-1]
        is_peak = (mid > row[:-2]) & (mid >= row[2:])
        in_band = (lags[1:-1] >= lag_lo) & (lags[1:-1] <= lag_hi)
        cand = np.flatnonzero(is_peak & in_band) + 1
        if len(cand) == 0:
            continue
        best = row[cand].max()
        if best < voicing_threshold:
            strength[i] = best
            continue
        k = cand[np.flatnonzero(row[cand] >= octave_tolerance * best)[0]]
        a, b, c = row[k - 1], row[k], row[k + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        f0[i] = rate / (lags[k] + shift)
        strength[i] = b
    return F0Track(f0=f0, strength=strength, hop_seconds=hop_s)


@dataclass(frozen=True)
class WarpFactor:
    alpha: float
    speaker_id: str = ""
    mean_f0_hz: float = float("nan")
    warnings: tuple = ()


def warp_factor_from_mean_f0(mean_f0, reference_f0=DEFAULT_REFERENCE_F0, speaker_id=""):
    """``alpha = clamp(mean_f0 / reference_f0, 0.7, 1.4)``."""
    if reference_f0 <= 0:
        raise ValueError(f"reference_f0 must be positive, got {reference_f0}")
    alpha = min(max(mean_f0 / reference_f0, ALPHA_MIN), ALPHA_MAX)
    return WarpFactor(alpha=float(alpha), speaker_id=speaker_id, mean_f0_hz=float(mean_f0))


def compute_warp_factor(speaker_clips, reference_f0=DEFAULT_REFERENCE_F0, speaker_id=""):
    """Per-speaker warp factor from the mean f0 of all voiced frames.

    Voiced frames are pooled across every clip of the speaker before
    averaging. A speaker with no voiced frame gets the identity warp and a
    ``NoVoicedFrames`` warning.
    """
    if reference_f0 <= 0:
        raise ValueError(f"reference_f0 must be positive, got {reference_f0}")
    pooled = [estimate_f0(c).voiced_f0 for c in speaker_clips]
    voiced = np.concatenate(pooled) if pooled else np.zeros(0)
    if voiced.size == 0:
        log.warning("speaker %r: no voiced frames, using identity warp", speaker_id)
        return WarpFactor(alpha=1.0, speaker_id=speaker_id, warnings=("NoVoicedFrames",))
    return warp_factor_from_mean_f0(float(voiced.mean()), reference_f0, speaker_id)


def pad_or_truncate(fm, target_frames):
    """Zero-pad (append rows) or truncate ``fm`` to ``target_frames`` frames."""
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    n = fm.frames
    if n == target_frames:
        return fm
    if n > target_frames:
        return replace(fm, data=fm.data[:target_frames].copy(), warnings=fm.warnings + ("Truncated",))
    data = np.zeros((target_frames, fm.dims), dtype=fm.data.dtype)
    data[:n] = fm.data
    return replace(fm, data=data)
