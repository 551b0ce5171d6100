"""Exception types shared across the pipeline."""


class ProtoKGError(Exception):
    """Base class for all pipeline errors."""


class InvalidInput(ProtoKGError, ValueError):
    pass


class EncoderUnavailable(ProtoKGError, RuntimeError):
    pass


class ChatUnavailable(ProtoKGError, RuntimeError):
    """A chat client could not produce a response (network, quota, missing transcript)."""


class ExtractionUnavailable(ProtoKGError, RuntimeError):
    pass


class UnknownDisease(ProtoKGError, KeyError):
    pass


class UnknownCategory(ProtoKGError, KeyError):
    pass


class InvalidGraph(ProtoKGError, ValueError):
    pass


class DegenerateEmbedding(ProtoKGError, ValueError):
    pass


class InvalidRanking(ProtoKGError, ValueError):
    pass


class DivergenceAbort(ProtoKGError, RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class ConfigError(ProtoKGError, ValueError):
    pass


class MissingArtifact(ProtoKGError, FileNotFoundError):
    pass


class EmptyExtractionWarning(UserWarning):
    """No parseable triplet came back for a disease; it is recorded as knowledge-poor."""
