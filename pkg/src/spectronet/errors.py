"""Exception hierarchy shared by every stage of the pipeline."""


class SpectroNetError(Exception):
    """Base class for all package errors."""


class FormatError(SpectroNetError, ValueError):
    """A file does not follow the expected on-disk layout."""


class GridError(SpectroNetError, ValueError):
    """Wavelength grids are non-increasing or disagree between sources."""


class DataError(SpectroNetError, ValueError):
    """Numeric content is invalid (NaN/Inf, wrong lengths, ...)."""


class EmptySpectrumError(DataError):
    pass


class GroupingError(SpectroNetError, ValueError):
    """Spectra passed to a group operation do not belong together."""


class SamplingError(SpectroNetError, ValueError):
    """Not enough distinct targets to draw the requested tuples."""


class ShapeError(SpectroNetError, ValueError):
    pass


class StateError(SpectroNetError, RuntimeError):
    pass


class CheckpointError(SpectroNetError, ValueError):
    pass


class CoverageError(SpectroNetError, ValueError):
    """Calibration labels are missing for the requested oxide."""


class TrainingDivergedError(SpectroNetError, ArithmeticError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"loss became non-finite ({value}) at epoch {epoch}, batch {batch}")
