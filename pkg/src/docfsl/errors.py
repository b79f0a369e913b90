"""Exception hierarchy. Each family maps onto one CLI exit code."""


class DocFSLError(Exception):
    exit_code = 2


class ConfigError(DocFSLError):
    """Invalid configuration; carries every problem found, not just the first."""

    exit_code = 1

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(DocFSLError):
    exit_code = 2


class ManifestError(DataError):
    pass


class ImageDecodeError(DataError):
    pass


class InsufficientSamplesError(DataError):
    pass


class CompatibilityError(DataError):
    """Checkpoint, backbone or config do not fit together."""


class BackboneError(DataError):
    pass


class NumericError(DocFSLError):
    """Non-finite values reached the model; the run is aborted."""

    exit_code = 3
