__version__ = "0.1.0"

from ._errors import (
    AcceptanceError,
    HomlabError,
    HomlabWarning,
    InvalidInputError,
    NonConvergenceError,
    RunRejectedError,
)
from ._logging import HOMLAB_LOGGER
from .config import AcceptanceConfig, HomlabConfig, load_config
from .field import (
    CoefficientMap,
    CoefficientSet,
    CovarianceSpec,
    GridSpec,
    ParameterField,
    sample_gaussian_field,
)
from .jobs import JobManager


__all__ = [
    "__version__",
    "HOMLAB_LOGGER",
    "HomlabError",
    "InvalidInputError",
    "NonConvergenceError",
    "RunRejectedError",
    "AcceptanceError",
    "HomlabWarning",
    "HomlabConfig",
    "AcceptanceConfig",
    "load_config",
    "GridSpec",
    "CovarianceSpec",
    "ParameterField",
    "CoefficientSet",
    "CoefficientMap",
    "sample_gaussian_field",
    "JobManager",
]
