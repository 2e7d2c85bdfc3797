"""Exception types shared across the simulator.

Every error carries a stable exit code so the command line front end can map
failures onto distinct process exit statuses.
"""


class HotboxError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1


# --- phy ------------------------------------------------------------------

class OversizeFrame(HotboxError):
    """Header plus payload plus FCS does not fit the 127 octet MPDU."""


class LengthError(HotboxError):
    """Chip stream length is not a whole number of symbols."""


class EmptySignal(HotboxError):
    """An operation needs at least one baseband sample."""


class InsufficientSymbols(HotboxError):
    """Fewer symbol scores than the LQI estimator needs."""


# --- impairments ----------------------------------------------------------

class TempOutOfRange(HotboxError):
    """Temperature outside the range the link model is defined for."""


class CalibrationError(HotboxError):
    """Calibration file is missing, malformed or inconsistent."""

    exit_code = 4


class CalibrationInfeasible(CalibrationError):
    """No grid point satisfied all calibration targets."""

    def __init__(self, message, nearest=None):
        super().__init__(message)
        self.nearest = nearest


# --- thermal --------------------------------------------------------------

class TargetAboveLimit(HotboxError):
    """Requested chamber temperature exceeds the plant's safety limit."""


# --- orchestrator / config ------------------------------------------------

class ConfigError(HotboxError):
    """Invalid experiment configuration.

    ``source`` and ``line`` point at the offending location when the config
    came from a file.
    """

    exit_code = 3

    def __init__(self, message, source=None, line=None):
        self.source = source
        self.line = line
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# --- analysis / files -----------------------------------------------------

class LengthMismatch(HotboxError):
    """Bit strings of different lengths cannot be compared."""


class UnknownPayloadPattern(HotboxError):
    """Trace payloads do not follow the repeating test pattern."""


class DegenerateHistogram(HotboxError):
    """Histogram has no mass, so a correlation is undefined."""


class TraceFormatError(HotboxError):
    """Trace file is truncated or malformed."""

    exit_code = 5


class IoError(HotboxError):
    """Reading or writing an output file failed."""

    exit_code = 5


class UsageError(HotboxError):
    """Bad command line."""

    exit_code = 2
