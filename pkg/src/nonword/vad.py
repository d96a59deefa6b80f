"""Energy-based endpoint trimming.

Frames whose RMS level (relative to the loudest frame) reaches the floor
count as speech. Everything before the first and after the last speech
frame is cut; the interior is left untouched.
"""

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .errors import NoSpeechDetected


@dataclass(frozen=True)
class VadConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    energy_floor_db: float = -35.0
    hangover_frames: int = 5
    min_speech_frames: int = 5

    def __post_init__(self):
        if not (self.frame_ms >= self.hop_ms > 0):
            raise ValueError("need frame_ms >= hop_ms > 0")
        if self.hangover_frames < 0:
            raise ValueError("hangover_frames must be >= 0")
        if self.min_speech_frames < 1:
            raise ValueError("min_speech_frames must be >= 1")


def frame_levels_db(samples, frame_len, hop_len):
    """Per-frame RMS in dB relative to the loudest frame (-inf for silent frames)."""
    n = len(samples)
    if n < frame_len:
        frames = np.zeros((1, frame_len))
        frames[0, :n] = samples
    else:
        frames = np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop_len]
    rms = np.sqrt(np.mean(np.square(frames), axis=1))
    peak = rms.max()
    if peak <= 0.0:
        return np.full(len(rms), -np.inf)
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(rms / peak)


def speech_span(clip, cfg=VadConfig()):
    """Return the ``(start, stop)`` sample span retained by :func:`trim`."""
    rate = clip.sample_rate
    frame_len = int(round(cfg.frame_ms * rate / 1000.0))
    hop_len = int(round(cfg.hop_ms * rate / 1000.0))
    x = np.asarray(clip.samples, dtype=np.float64)
    levels = frame_levels_db(x, frame_len, hop_len)
    speech = np.flatnonzero(levels >= cfg.energy_floor_db)
    if len(speech) < cfg.min_speech_frames:
        raise NoSpeechDetected(
            f"{clip.source_id or 'clip'}: {len(speech)} speech frames < {cfg.min_speech_frames}"
        )
    last_frame = len(levels) - 1
    first = max(0, speech[0] - cfg.hangover_frames)
    last = min(last_frame, speech[-1] + cfg.hangover_frames)
    start = first * hop_len
    # the final frame owns the sub-hop tail so that untrimmed clips pass through whole
    stop = len(x) if last == last_frame else min(len(x), last * hop_len + frame_len)
    return start, stop


def trim(clip, cfg=VadConfig()):
    """Cut leading and trailing non-speech from ``clip``.

    Raises
    ------
    NoSpeechDetected
        If fewer than ``cfg.min_speech_frames`` frames reach the energy floor.
    """
    start, stop = speech_span(clip, cfg)
    if start == 0 and stop == len(clip.samples):
        return clip
    return AudioClip(samples=clip.samples[start:stop].copy(), sample_rate=clip.sample_rate, source_id=clip.source_id)
