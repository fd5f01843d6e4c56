"""Exception types shared across the toolbox."""


class TomobenchError(Exception):
    """Base class for all toolbox errors."""


class GeometryError(TomobenchError, ValueError):
    """Invalid scanner geometry or image grid."""


class SelectionError(TomobenchError, ValueError):
    """Angular selection incompatible with the geometry it is applied to."""


class ShapeError(TomobenchError, ValueError):
    """Array dimensions do not match the attached geometry or grid."""


class StageError(TomobenchError, ValueError):
    """Sinogram is at the wrong processing stage (counts/transmission/line integral)."""


class CalibrationError(TomobenchError, ValueError):
    """Detector calibration frames are unusable (e.g. flat <= dark)."""


class SolverDivergenceError(TomobenchError, RuntimeError):
    """Iterative solver diverged; usually fixed by lowering step_scale."""


class CorruptFileError(TomobenchError, IOError):
    """On-disk payload is truncated or has a malformed header."""


class ParamsError(TomobenchError, ValueError):
    """Parameter file cannot be parsed."""


class ParamsVersionError(ParamsError):
    """Parameter file version is not supported by this build."""


class RegistryError(TomobenchError, KeyError):
    """Unknown reconstructor name or bad descriptor."""


class ExternalProtocolError(TomobenchError, RuntimeError):
    """External reconstructor violated the subprocess wire protocol."""
