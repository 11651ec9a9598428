"""Initial-state estimation for nonlinear systems with output-dependent
linear part: Gramian reconstruction, contraction iteration and a hybrid
reset observer."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    EvaluationError,
    GramianSingular,
    GridTooCoarse,
    IntegrationDiverged,
    ModelError,
    ObsvError,
    UnsupportedCheck,
)
from .numerics import MatrixPath, TimeGrid, Trajectory, integrate_ode, quadrature, solve_spd  # noqa: F401
from .expression import evaluate, parse  # noqa: F401
from .system import (  # noqa: F401
    InputSignal,
    SystemModel,
    TriangularSpec,
    build_triangular,
    check_h2,
    estimate_lipschitz,
    simulate_truth,
)
from .reconstruction import (  # noqa: F401
    check_pe,
    compute_bundle,
    contraction_modulus,
    find_contraction_time,
    fixed_point_map,
    fundamental_matrix,
    gramian_psi,
    one_shot_initial_state,
    xi_map,
)
from .estimator import estimate_general, estimate_known_bound, forward_propagate, iterate_step  # noqa: F401
from .hybrid import ResetSchedule, build_reset_values, run_hybrid_observer  # noqa: F401
