"""Deep backward schemes for parabolic integro-differential equations with finite jump measures."""

from .model import (
    LevyMeasure,
    NonFiniteError,
    PideModel,
    TimeGrid,
    ValidationReport,
    gaussian_levy,
    nonlocal_operator_mc,
    validate_model,
    zero_levy,
)
from .nn import MlpParams, MlpSpec, TriNet
from .oracle import (
    ErrorReport,
    ManufacturedProblem,
    error_report,
    feynman_kac_mc,
    make_heat_problem,
    make_quadratic_manufactured,
)
from .sim import JumpRecord, PathBatch, compensated_integral, euler_step, sample_poisson_measure, simulate_forward
from .train import TrainConfig, TrainedScheme, TrainingAborted, evaluate, load_scheme, save_scheme, solve

__version__ = "0.1.0"
