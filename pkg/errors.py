"""
Exception hierarchy for CTMORPH
Every engine raises a subclass of CTMorphError so the CLI can map failures to exit codes.
"""


class CTMorphError(Exception):
    """Base class for all pipeline errors"""


class InvalidArgumentError(CTMorphError, ValueError):
    """Bad argument passed to a volume operation"""


class NiftiParseError(CTMorphError):
    """NIfTI-1 file could not be parsed; `field` names the offending header field"""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NiftiRangeError(CTMorphError):
    """Data cannot be represented in the requested NIfTI datatype"""


class DicomParseError(CTMorphError):
    """DICOM file rejected; `tag` names the missing tag or the syntax problem"""

    def __init__(self, tag, message):
        self.tag = tag
        super().__init__(f"{tag}: {message}")


class SeriesAssemblyError(CTMorphError):
    """Parsed slices do not form one regular series"""


class RegistrationError(CTMorphError):
    """Registration could not produce a valid transform"""


class NotDiffeomorphicError(RegistrationError):
    """Recovered field failed the inverse-consistency or Jacobian check"""


class SpaceMismatchError(CTMorphError):
    """Two grids or transforms that must share a space do not"""

    def __init__(self, expected, actual, message=None):
        self.expected = expected
        self.actual = actual
        super().__init__(message or f"space mismatch: expected '{expected}', got '{actual}'")


class StageError(CTMorphError):
    """A pipeline stage failed"""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


class ConfigError(CTMorphError):
    """Configuration problems, reported all at once"""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))
