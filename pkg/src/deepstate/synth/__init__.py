from .cohort import (
    ANEMIA_ITEMS,
    DRUGS,
    REGIMES,
    CohortSpec,
    GroundTruth,
    LabDesign,
    realized_missing_rate,
    signal_codes_by_regime,
    simulate_cohort,
    simulate_lgssm_cohort,
)
from .lgssm import (
    FilterResult,
    LgssmSpec,
    NumericalError,
    SmootherResult,
    kalman_filter,
    kalman_loglik,
    kalman_smoother,
)

__all__ = [
    "ANEMIA_ITEMS",
    "DRUGS",
    "REGIMES",
    "CohortSpec",
    "FilterResult",
    "GroundTruth",
    "LabDesign",
    "LgssmSpec",
    "NumericalError",
    "SmootherResult",
    "kalman_filter",
    "kalman_loglik",
    "kalman_smoother",
    "realized_missing_rate",
    "signal_codes_by_regime",
    "simulate_cohort",
    "simulate_lgssm_cohort",
]
