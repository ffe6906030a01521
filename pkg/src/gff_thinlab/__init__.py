"""Lattice Gaussian free field sampling, dyadic exploration of its
level geometry, and a thinness test battery for local sets."""

__version__ = "0.1.0"

from ._backend import backend_name, use_numba
from .dyadic import (
    BoxSet,
    Cell,
    DyadicScheme,
    DyadicWord,
    GeometricSet,
    PointSet,
    RasterSet,
    SegmentSet,
    ShiftedScheme,
    approximate,
    cell_at,
    children,
    load_set_file,
    neighborhood_volume,
    root_cell,
    validate_das,
)
from .errors import (
    ConfigurationError,
    GffThinlabError,
    InputError,
    OutputError,
    ResolutionError,
)
from .exploration import (
    BranchingSchedule,
    bbm_ensemble,
    bm_hit_prob,
    branching_times,
    field_ensemble,
    lineage_active_counts,
    observables,
    run_bbm,
    run_field_coupled,
    write_trace,
)
from .green_field import (
    FieldSample,
    GreensOperator,
    LatticeDomain,
    build_greens,
    cell_indicator,
    cell_variance,
    free_space_kernel,
    interior_slices,
    markov_decompose,
    pair,
    sample_gff,
)
from .thinness import (
    GaussianBoundReport,
    MomentReport,
    ThresholdSpec,
    bridge_identity_check,
    cord_union_bound,
    deterministic_thin_report,
    exceedance_stats,
    gaussian_bound_check,
    indicator_sum,
    moment_report,
    sup_cell_statistic,
    threshold_spec,
    truncated_second_moment,
)

__all__ = [
    "__version__",
    "backend_name",
    "use_numba",
    "BoxSet",
    "Cell",
    "DyadicScheme",
    "DyadicWord",
    "GeometricSet",
    "PointSet",
    "RasterSet",
    "SegmentSet",
    "ShiftedScheme",
    "approximate",
    "cell_at",
    "children",
    "load_set_file",
    "neighborhood_volume",
    "root_cell",
    "validate_das",
    "ConfigurationError",
    "GffThinlabError",
    "InputError",
    "OutputError",
    "ResolutionError",
    "BranchingSchedule",
    "bbm_ensemble",
    "bm_hit_prob",
    "branching_times",
    "field_ensemble",
    "lineage_active_counts",
    "observables",
    "run_bbm",
    "run_field_coupled",
    "write_trace",
    "FieldSample",
    "GreensOperator",
    "LatticeDomain",
    "build_greens",
    "cell_indicator",
    "cell_variance",
    "free_space_kernel",
    "interior_slices",
    "markov_decompose",
    "pair",
    "sample_gff",
    "GaussianBoundReport",
    "MomentReport",
    "ThresholdSpec",
    "bridge_identity_check",
    "cord_union_bound",
    "deterministic_thin_report",
    "exceedance_stats",
    "gaussian_bound_check",
    "indicator_sum",
    "moment_report",
    "sup_cell_statistic",
    "threshold_spec",
    "truncated_second_moment",
]
