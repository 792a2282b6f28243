"""Latent-menu mixture models: identification and estimation from short choice panels."""

from .errors import (
    BudgetExceededError,
    EstimationError,
    IdentificationError,
    IllConditionedError,
    MenumixError,
    ParseError,
)
from .model import (
    DGP1,
    DGP2,
    AssumptionReport,
    ChoiceSetMask,
    DGPSpec,
    JointChoiceTensor,
    MarkovMixtureModel,
    MixtureModel,
    build_population_tensor,
    check_assumptions,
    eval_mixture_pmf,
    sample_panel,
)
from .ingest import (
    CellTensorSet,
    PanelDataset,
    PanelReport,
    build_cell_tensors,
    empirical_tensor,
    parse_panel_csv,
    validate_panel,
)
from .spectral import (
    DEFAULT_RANK_TAU,
    LinIndepReport,
    MarkovEstimate,
    MixtureEstimate,
    RankEstimate,
    SpectralOptions,
    estimate_rank,
    lin_indep_check,
    markov_identify,
    spectral_identify,
)
from .estimator import (
    BestSubsetSolution,
    FitConfig,
    Step1Result,
    Step2Result,
    TrimResult,
    TwoStepResult,
    best_subset_select,
    brute_force_estimate,
    dictionary_bits,
    embed_warm_start,
    final_fit,
    masks_for_bits,
    pool_supports,
    step1_fit,
    step2_masked_fit,
    trim_normalize,
    two_step_estimate,
)
from .montecarlo import (
    MCCell,
    MCReport,
    bias_rmse,
    run_mc,
    set_recovery_metrics,
    table_csv,
)
from .demand import (
    DemandPanel,
    GmmResult,
    MenuShareSummary,
    RegressionData,
    build_log_ratio_panel,
    elasticity_mixture,
    elasticity_naive,
    fit_all_menus,
    gmm_beta,
    make_instruments,
    menu_share_summaries,
    read_demand_bundle,
    write_demand_bundle,
)

__version__ = "0.1.0"
