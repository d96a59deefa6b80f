"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` (the class name) so
the CLI can print single-line diagnostics.
"""


class NonwordError(Exception):
    """Base class for all package errors."""

    @property
    def kind(self):
        return type(self).__name__


# audio
class AudioError(NonwordError):
    pass


class MalformedHeader(AudioError):
    pass


class UnsupportedEncoding(AudioError):
    pass


class EmptyAudio(AudioError):
    pass


class NoSpeechDetected(AudioError):
    pass


# features
class FeatureError(NonwordError):
    pass


class ClipTooShort(FeatureError):
    pass


class InvalidAlpha(FeatureError):
    pass


class BadMagic(FeatureError):
    pass


class DimMismatch(FeatureError):
    pass


class NonFiniteValue(FeatureError):
    pass


# dataset
class ManifestError(NonwordError):
    pass


class MissingColumn(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class BadNonwordId(ManifestError):
    pass


class BadLabel(ManifestError):
    pass


class EmptySplit(ManifestError):
    pass


class SingleClassSplit(ManifestError):
    pass


# nn / model
class ShapeMismatch(NonwordError):
    pass


class StaleCache(NonwordError):
    pass


class InputTooSmall(NonwordError):
    pass


class CheckpointError(NonwordError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptBlob(CheckpointError):
    pass


# train / eval
class ModeMismatch(NonwordError):
    pass


class SingleClassInput(NonwordError):
    pass


class EmptyInput(NonwordError):
    pass


class MissingModelForWord(NonwordError):
    pass


class EmptyTestSplit(NonwordError):
    pass


class ConfigError(NonwordError):
    pass
