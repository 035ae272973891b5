class RegionCounterError(Exception):
    pass


class ConfigError(RegionCounterError):
    "Invalid configuration or command line. Exit code 2."


class DataError(RegionCounterError):
    "Input data can't be processed. Exit code 3."


class DetectionParseError(DataError):
    def __init__(self, path, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class EmptyDistributionError(DataError):
    pass


class DegenerateRegressionError(DataError):
    pass


class EmptyRegionError(DataError):
    pass


class ShapeError(DataError):
    pass


class NonFiniteError(DataError):
    def __init__(self, where: str, step: int | None = None):
        self.where = where
        self.step = step
        msg = f"non-finite values in {where}"
        if step is not None:
            msg += f" at step {step}"
        super().__init__(msg)


class CheckpointError(DataError):
    pass
