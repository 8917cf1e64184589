"""Exception hierarchy shared by every module."""


class NTLError(Exception):
    """Base class for all package errors."""


class ValidationError(NTLError):
    """A config or argument violates its declared constraints."""


class UnknownDataset(NTLError):
    pass


class MissingFiles(NTLError):
    pass


class ChecksumMismatch(NTLError):
    pass


class LabelDestroyingShift(ValidationError):
    """The requested synthetic shift would make glyphs indistinguishable from background."""


class GeometryMismatch(NTLError):
    pass


class SpecError(ValidationError):
    """Architecture descriptor is internally inconsistent."""


class CheckpointError(NTLError):
    pass


class DegenerateBandwidth(NTLError):
    """All joint vectors coincide, so the kernel bandwidth base is zero."""


class DimensionMismatch(NTLError):
    pass


class InvalidDistribution(NTLError):
    pass


class IncompatibleDomains(NTLError):
    pass


class DegenerateAuxiliary(NTLError):
    """The auxiliary domain is identical to the source domain."""


class UnknownAttack(NTLError):
    pass


class IncompleteRun(NTLError):
    pass
