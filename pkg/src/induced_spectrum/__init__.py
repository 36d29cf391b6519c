"""Spectral measures of finite permutation systems, spreading by inducing and multiplicity certificates."""

from .circle_measures import (
    AtomicMeasure,
    CircleMeasure,
    ConvergenceReport,
    DensityGrid,
    GoodSpec,
    ScheduleError,
    check_convergence,
    dirac,
    from_density,
    is_good,
    lebesgue,
    ratio_deviation,
    spread_out,
    strong_close,
    to_density,
    weak_distance,
)
from .construction import (
    ConstructionError,
    ConstructionState,
    Schedule,
    StepParams,
    Trace,
    add_orthogonal_function,
    inductive_step,
    init_state,
    lebesgue_track,
    run_construction,
)
from .inducing import (
    InducedSystem,
    NonReturningOrbitError,
    SpreadError,
    Tower,
    TowerError,
    induce,
    independent_subset,
    kac_check,
    restrict_observable,
    rokhlin_tower,
    spread_by_inducing,
)
from .spectra import MultiplicityCertificate, density_matrix, flatness_report, multiplicity_witness
from .systems import (
    FiniteSystem,
    Observable,
    Partition,
    bernoulli_approx,
    build_cyclic,
    correlation,
    cross_spectral,
    meilijson_mc,
    product,
    spectral_measure,
)
from .trace import verify_trace, write_trace

__version__ = "0.1.0"
