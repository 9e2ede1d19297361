"""Exception types raised across poisonlab."""


class PoisonLabError(Exception):
    """Base class for all library errors."""


class DataError(PoisonLabError, ValueError):
    """Corrupt, missing or inconsistent dataset input."""


class ScenarioError(PoisonLabError, ValueError):
    """A scenario cannot be satisfied by the available pools."""


class TriggerError(PoisonLabError, ValueError):
    pass


class EncoderError(PoisonLabError, ValueError):
    pass


class DegenerateScoresError(EncoderError):
    """Sum of prompt cosines too close to zero to normalise."""


class OptimizationError(PoisonLabError, RuntimeError):
    pass


class TrainingDivergedError(PoisonLabError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(PoisonLabError, ValueError):
    pass


class ConfigError(PoisonLabError, ValueError):
    pass
