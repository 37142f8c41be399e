"""Numerical laboratory for dispersing billiards on the two-torus."""

from .errors import (
    NumericalFailure,
    ValidationFailure,
)
from .table import (
    FiniteHorizonReport,
    Scatterer,
    Table,
    build_table,
    check_finite_horizon,
    default_table,
    regularity,
)
from .dynamics import (
    CollisionPoint,
    CollisionRecord,
    PhasePoint,
    billiard_map,
    collision_to_phase,
    flow,
    free_flight,
    homogeneity_index,
    phase_to_collision,
    project_to_map,
    sample_mu,
    sample_nu,
    singularity_distance,
)
from .front import (
    FrontVector,
    HyperbolicityEstimate,
    estimate_hyperbolicity,
    in_unstable_cone,
    jacobian_gamma_to_W,
    map_derivative,
    transport_along,
    transport_collision,
    transport_free,
)
from .curves import (
    CurvePiece,
    StandardPair,
    UCurve,
    default_standard_pair,
    line_integral,
    make_standard_pair,
    make_ucurve,
    push_forward,
    restrict_pair,
    separation_time,
)
from .norms import (
    NormReport,
    SampledFunction,
    dyn_holder_seminorm,
    gen_holder_seminorm,
    holder_extend,
    holder_extend_point,
    holder_seminorm,
    mollify,
    osc_integral,
    osc_r,
)
from .calibration import load_calibration
from .holonomy import (
    ApproxDensity,
    G0_eval,
    H1Set,
    HolonomyTable,
    MatchResult,
    TubeChart,
    beta_formula,
    build_G,
    build_H1,
    build_holonomy_table,
    build_tube,
    cs_radius,
    density_mass,
    dump_diagnostics,
    fan_survey,
    holonomy_jacobian,
    holonomy_point,
    q_density,
    stable_match,
    tube_leakage,
)

__version__ = "0.1.0"

__all__ = [
    "ApproxDensity",
    "G0_eval",
    "H1Set",
    "HolonomyTable",
    "MatchResult",
    "TubeChart",
    "beta_formula",
    "build_G",
    "build_H1",
    "build_holonomy_table",
    "build_tube",
    "cs_radius",
    "density_mass",
    "dump_diagnostics",
    "fan_survey",
    "holonomy_jacobian",
    "holonomy_point",
    "q_density",
    "stable_match",
    "tube_leakage",
    "CollisionPoint",
    "CollisionRecord",
    "CurvePiece",
    "FiniteHorizonReport",
    "FrontVector",
    "HyperbolicityEstimate",
    "NormReport",
    "NumericalFailure",
    "PhasePoint",
    "SampledFunction",
    "Scatterer",
    "StandardPair",
    "Table",
    "UCurve",
    "ValidationFailure",
    "billiard_map",
    "build_table",
    "check_finite_horizon",
    "collision_to_phase",
    "default_standard_pair",
    "default_table",
    "dyn_holder_seminorm",
    "estimate_hyperbolicity",
    "flow",
    "free_flight",
    "gen_holder_seminorm",
    "holder_extend",
    "holder_extend_point",
    "holder_seminorm",
    "homogeneity_index",
    "in_unstable_cone",
    "jacobian_gamma_to_W",
    "line_integral",
    "load_calibration",
    "make_standard_pair",
    "make_ucurve",
    "map_derivative",
    "mollify",
    "osc_integral",
    "osc_r",
    "phase_to_collision",
    "project_to_map",
    "push_forward",
    "regularity",
    "restrict_pair",
    "sample_mu",
    "sample_nu",
    "separation_time",
    "singularity_distance",
    "transport_along",
    "transport_collision",
    "transport_free",
]
