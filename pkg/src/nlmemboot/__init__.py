"""Non-linear mixed-effects models: SAEM fitting, conditional sampling and bootstrap intervals.

The sub-modules are

``model``      structural and error models, designs, datasets, simulation
``saem``       SAEM estimation, Metropolis-Hastings conditional sampling, EBEs
``fim``        first-order Fisher information and asymptotic intervals
``bootstrap``  Case, parametric, non-parametric and conditional non-parametric bootstraps
``study``      scenario catalog and Monte Carlo coverage/bias harness
``report``     CSV/JSON writers and SVG coverage plots
``cli``        the ``nlmemboot`` command
"""

__version__ = "0.1.0"

from .bootstrap import (
    BootstrapConfig,
    BootstrapRun,
    EtaDraw,
    ResidualPool,
    Scheme,
    correct_random_effects_evd,
    correct_residuals,
    percentile_ci,
    resample_case,
    resample_conditional_np,
    resample_nonparametric,
    resample_parametric,
    run_bootstrap,
    summarize_run,
)
from .errors import (
    EstimationError,
    InvalidConfigError,
    InvalidInputError,
    MissingPrerequisiteError,
    NumericError,
    SamplerError,
)
from .fim import asymptotic_ci, compute_fim
from .model import (
    Dataset,
    Design,
    ErrorModel,
    ModelSpec,
    PopulationParams,
    Transform,
    design_from_groups,
    evaluate_error_sd,
    evaluate_structural,
    sig_emax_spec,
    simulate_dataset,
    transform_psi,
)
from .saem import (
    ConditionalDraws,
    MHSettings,
    PopulationEstimate,
    SaemSettings,
    compute_ebe,
    fit_saem,
    sample_conditional,
)
from .study import (
    CoverageReport,
    ScenarioSpec,
    coverage_rate,
    empirical_se,
    mc_se,
    relative_bias_params,
    relative_bias_se,
    run_replicate,
    run_study,
    scenario_preset,
)
