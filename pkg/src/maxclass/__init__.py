"""Invariants of rank-2 distributions: growth vectors, the class via
symplectification, and the projective structure on characteristic curves."""

from .distributions import (
    Distribution2,
    from_ode,
    growth_vector,
    model_distribution,
)
from .errors import (
    EvaluationDomainError,
    ExprSyntaxError,
    InputError,
    MaxclassError,
    NumericalInstabilityError,
    RankInstabilityError,
    StepInstabilityError,
    StratumError,
    WindowError,
)
from .expr import Chart, ChartPoint, ScalarExpr, coordinates, parse
from .fields import VecField, flow, lie_bracket
from .frames import (
    EpsilonNormalization,
    KappaResult,
    ModelFrame,
    SigmaField,
    SigmaFlowFields,
    SigmaPoint,
    StructureTable,
    epsilon_normalize,
    epsilon_pairing,
    frame_labels,
    kappa_coefficients,
    model_frame,
    reference_model_table,
    sigma_flow_fields,
    skew_complement,
    vertical_space,
)
from .jets import Jet, eval_jet
from .linalg import ToleranceRecord, collect_records
from .projective import (
    GrassCurve,
    MobiusMap,
    ProjectiveMap,
    SmoothMap1D,
    cross_ratio,
    cross_ratio_eigenvalues,
    g_function,
    jacobi_curve,
    number_cross_ratio,
    projectivize,
    rho,
    schwarzian,
    zero_order,
)
from .symplectic import (
    ClassReport,
    CotangentPoint,
    annihilator,
    characteristic_direction,
    characteristic_field,
    class_at,
    class_nu,
    extension_dims,
    jacobi_subspace,
    sample_regular_covector,
)

__version__ = "0.1.0"

__all__ = [
    "Chart",
    "ChartPoint",
    "ClassReport",
    "CotangentPoint",
    "Distribution2",
    "EpsilonNormalization",
    "EvaluationDomainError",
    "ExprSyntaxError",
    "GrassCurve",
    "InputError",
    "Jet",
    "KappaResult",
    "MaxclassError",
    "MobiusMap",
    "ModelFrame",
    "NumericalInstabilityError",
    "ProjectiveMap",
    "RankInstabilityError",
    "ScalarExpr",
    "SigmaField",
    "SigmaFlowFields",
    "SigmaPoint",
    "SmoothMap1D",
    "StepInstabilityError",
    "StratumError",
    "StructureTable",
    "ToleranceRecord",
    "VecField",
    "WindowError",
    "annihilator",
    "characteristic_direction",
    "characteristic_field",
    "class_at",
    "class_nu",
    "collect_records",
    "coordinates",
    "cross_ratio",
    "cross_ratio_eigenvalues",
    "epsilon_normalize",
    "epsilon_pairing",
    "eval_jet",
    "extension_dims",
    "flow",
    "frame_labels",
    "from_ode",
    "g_function",
    "growth_vector",
    "jacobi_curve",
    "jacobi_subspace",
    "kappa_coefficients",
    "lie_bracket",
    "model_distribution",
    "model_frame",
    "number_cross_ratio",
    "parse",
    "projectivize",
    "reference_model_table",
    "rho",
    "sample_regular_covector",
    "schwarzian",
    "sigma_flow_fields",
    "skew_complement",
    "vertical_space",
    "zero_order",
    "__version__",
]
