class RecFusionError(Exception):
    pass


class DimensionError(RecFusionError, ValueError):
    """Inputs have incompatible or too-small shapes."""


class ConstraintError(RecFusionError, ValueError):
    """Weight maps violate the pairwise sum-to-one constraint."""


class RoleError(RecFusionError, ValueError):
    """A parameter collection was passed to a network of another role."""


class TrainingError(RecFusionError, RuntimeError):
    """Non-finite losses or gradients during training."""


class ContractError(RecFusionError, RuntimeError):
    pass


class DatasetError(RecFusionError, ValueError):
    pass
