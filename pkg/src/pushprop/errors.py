"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid user-supplied data (bad ids, malformed values, shape mismatch)."""


class ParseError(InputError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class OracleCapError(RuntimeError):
    """Dense oracle refused: graph exceeds the exhaustive-computation cap."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""
