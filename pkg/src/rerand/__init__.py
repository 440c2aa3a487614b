"""Design and analysis of rerandomized experiments.

Covariate-balance criteria and thresholds, acceptable-assignment generation,
difference-in-means / linearly adjusted / doubly robust estimation with
mixture-distribution confidence intervals and randomization tests, missing
data handling, and a finite-sample simulation harness.
"""

__version__ = "0.1.0"

from ._kernels import backend_name
from .assignment import (
    AcceptanceTimeout,
    DrawLog,
    complete_randomization,
    pair_switch_rerandomize,
    rejection_rerandomize,
    sample_acceptable_batch,
)
from .balance import (
    Assignment,
    BalanceCriterion,
    is_acceptable,
    mahalanobis_distance,
    make_criterion,
    metric_value,
    quadratic_form_distance,
    threshold_from_chisq,
    threshold_monte_carlo,
)
from .estimators import (
    EifTable,
    EstimateReport,
    ObservedExperiment,
    coherence_stat,
    phack_min_pvalue,
    tau_d,
    tau_dr,
    tau_l,
)
from .finite_pop import (
    ExperimentFrame,
    PotentialOutcomes,
    SampleMoments,
    SingularCovariance,
    column_moments,
    projection_variance,
    tau_projection_variance,
)
from .inference import (
    MixtureSpec,
    TestResult,
    confidence_interval,
    mixture_quantile,
    normal_interval,
    randomization_test,
    sample_l_da,
    v_da,
)
from .missing_data import (
    MaskedMatrix,
    ResponseRecord,
    augment_missing_indicators,
    mask_missing_outcomes,
    tau_dr_missing_outcomes,
)
from .outcome_models import (
    FoldError,
    FoldPlan,
    OutcomeModelSpec,
    fit,
    make_folds,
    stepwise_select,
)
from .rng import substream
