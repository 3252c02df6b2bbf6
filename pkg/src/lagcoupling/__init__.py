"""Lead-lag amplitude coupling between two recorded regions.

Latent canonical series per region and time are linked through a banded
sparse precision matrix; its cross block describes which time pairs are
conditionally coupled across regions.
"""
from .errors import (ConfigError, DataError, FormatError, IoError, LagCouplingError, LengthError,
                     NumericalError, ParamError)
from .tensorio import AnalysisConfig, PairedDataset, load_config, read_dataset, write_dataset
from .glasso import PenaltyMatrix, build_penalty, pglasso_banded
from .fit import FitResult, Hyperparams

__version__ = "0.1.0"
