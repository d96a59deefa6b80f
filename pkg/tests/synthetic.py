"""Synthetic fixtures: tones, WAV bytes written by hand, and a toy nonword corpus."""

import struct
from pathlib import Path

import numpy as np

from nonword.audio import AudioClip, write_wav

RATE = 16000


def sine(freq, seconds=1.0, rate=RATE, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


def clip(samples, rate=RATE, source_id=""):
    return AudioClip(np.asarray(samples, dtype=np.float64), rate, source_id)


def pcm16_wav(frames, rate=RATE, channels=1):
    """Little-endian PCM16 WAV built directly with struct (independent of encode_wav)."""
    payload = np.asarray(frames, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * 2 * channels, 2 * channels, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def float32_wav(frames, rate=RATE, channels=1):
    payload = np.asarray(frames, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, channels, rate, rate * 4 * channels, 4 * channels, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def shaped_noise(rng, center_hz, width_hz, seconds, rate=RATE):
    """White noise with a Gaussian spectral envelope around ``center_hz``."""
    n = int(round(seconds * rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec *= np.exp(-0.5 * ((freqs - center_hz) / width_hz) ** 2)
    x = np.fft.irfft(spec, n)
    return x / np.max(np.abs(x))


def utterance(rng, label, nonword_id, f0=220.0, speech_s=0.5, pad_s=0.15, rate=RATE):
    """Silence + voiced band-limited noise + silence.

    The two labels differ in where the spectral energy sits: 'correct'
    around 700 Hz, 'incorrect' around 2200 Hz, each jittered by a Gaussian
    draw and shifted slightly per nonword.
    """
    center = (700.0 if label == "correct" else 2200.0) + 60.0 * nonword_id + rng.normal(0, 80)
    body = 0.6 * shaped_noise(rng, center, 250.0, speech_s, rate)
    body += 0.3 * sine(f0, speech_s, rate, amp=1.0)
    ramp = np.minimum(1.0, np.arange(len(body)) / (0.01 * rate))
    body *= ramp * ramp[::-1]
    pad = np.zeros(int(pad_s * rate))
    x = np.concatenate([pad, body, pad]) + rng.normal(0, 1e-4, 2 * len(pad) + len(body))
    return 0.8 * x / np.max(np.abs(x))


def write_corpus(root, n_per_word=40, n_speakers=20, seed=0, silent_ids=()):
    """Write WAVs plus an unassigned manifest; returns the manifest path."""
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = ["utterance_id,speaker_id,nonword_id,label,path,split"]
    k = 0
    for word in range(1, 8):
        for i in range(n_per_word):
            uid = f"w{word}_{i:03d}"
            spk = f"spk{k % n_speakers:02d}"
            label = "incorrect" if i % 2 else "correct"
            if uid in silent_ids:
                x = np.zeros(RATE // 2)
            else:
                x = utterance(rng, label, word, f0=200.0 + 4.0 * (k % n_speakers))
            write_wav(root / "wav" / f"{uid}.wav", AudioClip(x, RATE, uid), encoding="pcm16")
            rows.append(f"{uid},{spk},{word},{label},wav/{uid}.wav,unassigned")
            k += 1
    path = root / "manifest.csv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


def separable_features(n=20, frames=32, dims=32, seed=0):
    """Two classes of feature matrices separated by a mean shift in one band."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, frames, dims)).astype(np.float32)
    y = (np.arange(n) % 2).astype(np.float64)
    x[y > 0.5, :, :, dims // 4 : dims // 2] += 1.5
    return x, y


def toy_dataset(n_per_word=12, words=(1, 2), frames=32, dims=32, seed=0, shift=1.5):
    """Split manifest plus separable mel-like features, keyed by utterance id."""
    from nonword.dataset import DatasetManifest, UtteranceRecord
    from nonword.features import FeatureKind, FeatureMatrix

    rng = np.random.default_rng(seed)
    splits = ("train",) * 8 + ("val",) * 2 + ("test",) * 2
    records, features = [], {}
    for w in words:
        for i in range(n_per_word):
            uid = f"w{w}_{i:03d}"
            label = "incorrect" if i % 2 else "correct"
            data = rng.normal(size=(frames, dims)).astype(np.float32)
            if label == "incorrect":
                data[:, dims // 4 : dims // 2] += shift
            records.append(UtteranceRecord(uid, f"s{i % 4}", w, label, "", splits[i % len(splits)]))
            features[uid] = FeatureMatrix(data, 0.01, FeatureKind.MEL, uid)
    return DatasetManifest(tuple(records)), features
