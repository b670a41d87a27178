class StitchkitError(Exception):
    """Base class for errors raised by stitchkit."""


class ConfigurationError(StitchkitError, ValueError):
    pass


class DatasetParseError(StitchkitError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class IntegrityError(StitchkitError, ValueError):
    def __init__(self, traj_id: int, t: int, message: str):
        super().__init__(f"trajectory {traj_id}, step {t}: {message}")
        self.traj_id = traj_id
        self.t = t


class TrainingFault(StitchkitError, RuntimeError):
    pass
