"""Exception types shared across the toolkit."""


class ProbeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ProbeError, ValueError):
    """Invalid configuration value."""


class ValidationError(ConfigError):
    """Experiment config failed schema or semantic validation."""


class InfeasiblePairError(ProbeError):
    pass


class StylizationError(ProbeError):
    def __init__(self, image_id, style_id, cause):
        self.image_id = image_id
        self.style_id = style_id
        self.cause = cause
        super().__init__(f"stylization failed for image {image_id!r} style {style_id!r}: {cause}")


class StageError(ProbeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown stage"


class ConsistencyError(ProbeError):
    """Observed tensor shapes disagree with what an encoder declares."""


class AdapterValidationError(ProbeError):
    pass


class InsufficientSamplesError(ProbeError, ValueError):
    pass


class DomainError(ProbeError, ValueError):
    pass


class ChannelMismatchError(ProbeError, ValueError):
    pass


class TrainingDiverged(ProbeError, RuntimeError):
    """Loss became non-finite. ``snapshots`` holds everything saved before it happened."""

    def __init__(self, epoch, snapshots):
        self.epoch = epoch
        self.snapshots = snapshots
        super().__init__(f"loss diverged during epoch {epoch}; {len(snapshots)} snapshot(s) retained")


class EmptyDatasetError(ProbeError, ValueError):
    pass


class UnknownTableError(ProbeError, KeyError):
    def __init__(self, table_id, available):
        self.available = sorted(available)
        super().__init__(f"unknown table {table_id!r}; available: {', '.join(self.available)}")

    def __str__(self):
        return self.args[0]


class MissingColumnError(ProbeError, ValueError):
    pass
