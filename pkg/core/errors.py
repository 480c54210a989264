"""
Exception hierarchy shared by every SDHSI-Net module.
Each error carries a stable code so the command line can print a machine-parseable prefix.
"""


class SdhsiError(Exception):
    """Base class for all library errors"""
    code = "ERROR"


class DimensionError(SdhsiError):
    code = "DIMENSION"


class ShapeError(SdhsiError):
    code = "SHAPE"


class DomainError(SdhsiError):
    code = "DOMAIN"


class ContractError(SdhsiError):
    code = "CONTRACT"


class ConfigError(SdhsiError):
    code = "CONFIG"


class EmptyDatasetError(SdhsiError):
    code = "EMPTY_DATASET"


class SplitError(SdhsiError):
    code = "SPLIT"


class FormatError(SdhsiError):
    code = "FORMAT"


class CheckpointError(SdhsiError):
    code = "CHECKPOINT"


class DivergenceError(SdhsiError):
    code = "DIVERGENCE"
