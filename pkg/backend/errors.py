class HansLensError(Exception):
    """Base class for all errors raised by the hanslens backend"""


class DatasetError(HansLensError, ValueError):
    """A manifest, sample or synthetic spec violates its invariants"""


class ShapeError(HansLensError, ValueError):
    """Tensor, layer or model/dataset shapes do not chain"""


class ModelFormatError(HansLensError, ValueError):
    """A weight file, envelope or backbone cannot be interpreted"""


class RelevanceError(HansLensError, ValueError):
    """A propagation rule was asked for an undefined attribution"""


class DegenerateScoreError(HansLensError, ValueError):
    """Scores are constant and cannot be standardized"""


class NumericalError(HansLensError, RuntimeError):
    """A computation produced non-finite values"""


class TrainingDivergedError(NumericalError):
    """Training produced a non-finite loss"""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class OutputExistsError(HansLensError, FileExistsError):
    """An output path already holds artifacts and --force was not given"""
