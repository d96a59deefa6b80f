"""``key = value`` run configuration with defaults < file < flags layering."""

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .features import DEFAULT_REFERENCE_F0, StftConfig
from .train import TrainConfig
from .vad import VadConfig


@dataclass(frozen=True)
class RunConfig:
    # paths
    manifest: str = ""
    features: str = ""
    feature_dirs: tuple = ()
    out_dir: str = ""
    base_model: str = ""
    model: str = ""
    models_dir: str = ""
    resume: str = ""
    # training
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    seed: int = 0
    finetune_mode: str = "none"
    finetune_lr: float = 1e-5
    nonword: str = "all"
    speaker_disjoint: bool = False
    positive_label: str = "incorrect"
    # features
    stft_frame_ms: float = 25.0
    stft_hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 128
    vtln: bool = False
    reference_f0_hz: float = None
    # vad
    vad_frame_ms: float = 25.0
    vad_hop_ms: float = 10.0
    vad_floor_db: float = -35.0
    hangover_frames: int = 5
    min_speech_frames: int = 5
    # evaluation / execution
    threshold: float = 0.5
    jobs: int = 1

    def train_config(self):
        return TrainConfig(
            lr=self.lr,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            seed=self.seed,
            finetune_mode=self.finetune_mode,
            finetune_lr=self.finetune_lr,
        )

    def stft_config(self):
        return StftConfig(frame_ms=self.stft_frame_ms, hop_ms=self.stft_hop_ms, n_fft=self.n_fft)

    def vad_config(self):
        return VadConfig(
            frame_ms=self.vad_frame_ms,
            hop_ms=self.vad_hop_ms,
            energy_floor_db=self.vad_floor_db,
            hangover_frames=self.hangover_frames,
            min_speech_frames=self.min_speech_frames,
        )

    @property
    def reference_f0_or_default(self):
        return DEFAULT_REFERENCE_F0 if self.reference_f0_hz is None else self.reference_f0_hz


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}  # key -> declared type
_DEFAULTS = RunConfig()
OPTIONAL_NONE = {"patience", "reference_f0_hz"}


def _coerce(key, raw):
    default = getattr(_DEFAULTS, key)
    text = raw.strip() if isinstance(raw, str) else raw
    if not isinstance(text, str):
        return tuple(text) if isinstance(default, tuple) else text
    if key in OPTIONAL_NONE and text.lower() in ("none", ""):
        return None
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in text.split(",") if p.strip())
        if key == "reference_f0_hz" or isinstance(default, float):
            return float(text)
        if key == "patience" or isinstance(default, int):
            return int(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return text


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments allowed); unknown keys are rejected."""
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve(file_values=None, flag_values=None):
    """Defaults, overridden by config-file values, overridden by flags (``None`` flags are unset)."""
    merged = dict(file_values or {})
    for key, value in (flag_values or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown option {key!r}")
        if value is not None:
            merged[key] = _coerce(key, value)
    return replace(_DEFAULTS, **merged)


def load_config(path):
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg):
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(value)
        elif value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
