class CilCodecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CilCodecError, ValueError):
    pass


class EmptyDomainError(CilCodecError, ValueError):
    pass


class ContractViolation(CilCodecError, RuntimeError):
    pass


class TrainingDivergence(CilCodecError, RuntimeError):
    """Loss went non-finite twice; ``checkpoint`` holds the last stable state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class IncompatibleModel(CilCodecError, ValueError):
    pass


class CorruptStream(CilCodecError, ValueError):
    pass


class UnsupportedArchitecture(CilCodecError, TypeError):
    pass


class EmptyForeground(CilCodecError, ValueError):
    """Raised by mask_to_bbox when the mask has no foreground pixel."""


class PhaseError(CilCodecError, RuntimeError):
    def __init__(self, phase, cause):
        super().__init__(f"phase {phase}: {cause}")
        self.phase = phase
        self.cause = cause
