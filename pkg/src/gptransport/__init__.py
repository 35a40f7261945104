"""Transport-diffusion under smoothed stationary-increment Gaussian noise.

Submodules: kernels (covariance algebra), sampling (exact paths and mollified
drives), dissipation (the window-averaged dissipation clock), spectral
(pathwise mode solver and reconstruction), moments (limiting mean/covariance
closures), ensemble (Monte Carlo engine), twoscale (torus reduction study),
cli (experiment runner).
"""

from .dissipation import (
    DissipationCurve,
    dissipation_curve,
    dissipation_density,
    drive_variance,
    weak_limit_residual,
)
from .ensemble import EnsembleStats, FieldStats, mc_variance_field, run_ensemble
from .kernels import (
    BrownianMotion,
    CovarianceKernel,
    DampedFractionalKernel,
    FractionalBrownianMotion,
    KernelDomainError,
    RegularityClass,
    TabulatedGammaKernel,
    TabulatedRangeError,
)
from .moments import (
    EllipticOperator,
    covariance_equation_residual,
    covariance_mode,
    covariance_mode_ode,
    mean_equation_residual,
    mean_field,
    mean_lattice,
    mean_mode,
    mean_mode_mollified,
    smalltime_exponents,
    variance_field,
)
from .sampling import (
    CovarianceFactorizationError,
    DrivePath,
    HorizonError,
    RegularizedDrive,
    regularize,
    sample_paths,
)
from .spectral import (
    GaussianBump,
    ModeTrajectory,
    PhysicalField,
    SpectralProblem,
    SpectrumSymmetryError,
    reconstruct,
    solve_lattice,
    solve_mode,
    verify_ode_residual,
)
from .twoscale import (
    BoundCheckResult,
    CflError,
    SmallScaleFamily,
    TorusProblem,
    TwoScaleResult,
    make_drive,
    maximum_principle_overshoot,
    q_operator_norm,
    q_operator_norm_power,
    reduced_solve,
    simulate_two_scale,
    theorem_bound_check,
    trig_grid,
)

__version__ = "0.1.0"
