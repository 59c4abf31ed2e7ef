"""Exception types shared across the package."""


class ConfigError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    """A cosine was requested for a zero-norm (or non-finite) embedding."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term
        self.value = value


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class BackboneKindError(CheckpointError):
    pass


class BackboneUnavailableError(RuntimeError):
    pass
