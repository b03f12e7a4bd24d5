"""Exception hierarchy. Everything raised on purpose derives from TadaError."""


class TadaError(Exception):
    """Base class for all errors raised by this package."""


class ImageError(TadaError):
    """Invalid image contents (shape, depth, value range)."""


class PgmError(TadaError):
    """Base class for PGM read/write failures."""


class PgmHeaderError(PgmError):
    """Malformed or unsupported PGM header."""


class PgmMaxvalError(PgmError):
    """Maxval other than 255 or 65535."""


class PgmTruncatedError(PgmError):
    """Pixel payload shorter than the header promises."""


class AlignmentError(TadaError):
    """Image dimensions are not multiples of the JPEG block size."""


class ExactModeError(TadaError):
    """Operation requires an exact (integer-coefficient) JPEG plane."""


class ArchiveError(TadaError):
    """Corrupt or mismatched coefficient / probability-map archive."""


class DegenerateKernelError(TadaError):
    """Kernel weights sum to (numerically) zero; cannot be normalized."""


class EmptySelectionError(TadaError):
    """Patch selection removed every candidate patch.

    Carries diagnostic counts so a failed training run can explain itself.
    """

    def __init__(self, total: int, std_rejected: int, prob_rejected: int):
        self.total = total
        self.std_rejected = std_rejected
        self.prob_rejected = prob_rejected
        super().__init__(
            f"no patch survived selection: {total} candidates, "
            f"{std_rejected} below the std threshold, "
            f"{prob_rejected} above the change-probability threshold"
        )


class CapacityError(TadaError):
    """Requested payload exceeds the embeddable capacity."""


class SolverError(TadaError):
    """Lagrange-multiplier search failed to bracket or converge."""


class GradientError(TadaError):
    """Loss evaluation produced a non-finite value during differentiation."""


class HomogeneityError(TadaError):
    """A plane collection mixes quantization tables or dimensions."""


class FeatureSpecError(TadaError):
    """Feature vectors built under different configurations were mixed."""


class DetectorError(TadaError):
    """Invalid detector training/evaluation input (e.g. a single class)."""


class RankError(TadaError):
    """Feature matrix rank too low for the requested subspace dimension."""


class TrainingError(TadaError):
    """Emulator training failed (non-finite loss, empty batches, ...)."""


class ConfigError(TadaError):
    """Invalid experiment configuration or CLI usage."""
