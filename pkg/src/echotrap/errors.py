"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems exit 2, numerical failures exit 3.
"""


class EchotrapError(Exception):
    pass


class ConfigurationError(EchotrapError):
    """Invalid parameter value, config key, or argument combination."""


class DataError(EchotrapError):
    """Missing or malformed on-disk data."""


class ManifestParseError(DataError):
    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ReconciliationError(DataError):
    """Decode results and references do not cover the same utterance ids."""

    def __init__(self, missing_refs, missing_results):
        self.missing_refs = tuple(missing_refs)
        self.missing_results = tuple(missing_results)
        parts = []
        if self.missing_refs:
            parts.append(f"ids without references: {', '.join(self.missing_refs)}")
        if self.missing_results:
            parts.append(f"ids without results: {', '.join(self.missing_results)}")
        super().__init__("; ".join(parts))


class NumericalError(EchotrapError):
    """Loss blow-up or other numerical failure."""


class TrainingDivergenceError(NumericalError):
    def __init__(self, step: int, message: str = "non-finite training loss"):
        super().__init__(f"{message} at optimizer step {step}")
        self.step = step
