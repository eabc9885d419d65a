"""Nonlinear-elasticity image comparison.

Registration energies over fold-free piecewise-affine homeomorphisms, with
mass-conserving and intensity-matching fidelity terms, a second-order
curvature-penalized model, morphing distances between images, shear
decompositions of area-preserving linear maps, and a one-dimensional
closed-form demonstration.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    AffineMap,
    BoundaryParam,
    Domain2,
    GeometryError,
    GridDeformation,
    Mesh,
    MeshDeformation,
    Monotone1DMap,
    RadialMap,
    ShearFactor,
    ValidationReport,
    boundary_cyclic_order,
    build_mesh,
    cyclic_orders_equal,
    deformation_from_csv,
    deformation_to_csv,
    disk_polygon,
    evaluate_map,
    invert_map,
    radial_map,
    shear_decompose,
    validate_homeomorphism,
)
from .imagery import (  # noqa: F401
    GridImage,
    ImageError,
    Signal1D,
    change_of_variables_check,
    make_related_pair,
    pullback,
    quadrature_points,
    read_pgm,
    write_pgm,
)
from .energy import (  # noqa: F401
    EnergyBreakdown,
    EnergyError,
    EnergySpec,
    FidelitySpec,
    HFunction,
    SecondOrderSpec,
    StoredEnergySpec,
    energy_first_order,
    energy_inverse_form,
    eval_Psi,
    eval_psi,
    gradient,
    jensen_bound_check,
    verify_suite,
)
from .secondorder import (  # noqa: F401
    SecondOrderEnergy,
    grid_dets,
)
from .solve import (  # noqa: F401
    AffineSearchSet,
    LandmarkSet,
    LandmarkVerdict,
    MorphSequence,
    OptimizerParams,
    RegisterResult,
    SolveError,
    concatenate_paths,
    demo_1d,
    detect_two_slopes,
    energy_1d,
    estimate_rho,
    fidelity_1d,
    match_part,
    morph_F,
    morph_sequence,
    random_deformation_onto,
    register,
    register_landmarks,
    register_second_order,
    two_slope_oracle,
    validate_landmarks,
)
