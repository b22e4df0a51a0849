"""Survival risk modeling for biochemical-recurrence prognosis studies.

The package is organized around five areas:

* :mod:`bcrisk.cohort`    - patient records, outcome rules, CAPRA-S scoring
* :mod:`bcrisk.tiling`    - tissue-mask tiling, embedding bags and the
  binary store (:mod:`bcrisk.store`), synthetic cohorts
  (:mod:`bcrisk.synthetic`)
* :mod:`bcrisk.model`     - attention-MIL/clinical/multimodal risk heads,
  Cox loss, exact gradients, Adam; training in :mod:`bcrisk.training`
* :mod:`bcrisk.survstats` - Kaplan-Meier, log-rank, C-index,
  time-dependent AUC, bootstrap CIs, Cox regression, likelihood-ratio tests
* :mod:`bcrisk.pipeline`  - stratified folds, nested cross-validation,
  external validation, CAPRA-S comparison; CLI in :mod:`bcrisk.cli`
"""

__version__ = "0.1.0"

from .cohort import (
    CapraGroup,
    CapraSInputs,
    ClinicalFeatures,
    CohortRecord,
    NormalizationStats,
    OutcomeRule,
    PsaSeries,
    SurvivalOutcome,
    capra_s_score,
    derive_bcr,
    fit_normalization,
    load_manifest,
    normalize_clinical,
    save_manifest,
)
from .model import (
    Architecture,
    PatientExample,
    RiskModel,
    adam_step,
    attention_pool,
    cox_loss,
    ensemble_predict,
    gradients,
    init_params,
    predict,
)
from .store import read_store, write_store
from .survstats import (
    CoxFit,
    KmCurve,
    MetricReport,
    SurvivalData,
    bootstrap_ci,
    c_index,
    cox_fit,
    km_estimate,
    likelihood_ratio_test,
    logrank_test,
    quartile_stratify,
    time_dependent_auc,
)
from .synthetic import SyntheticSignalSpec, generate_synthetic_cohort, simulate_event_times
from .tiling import (
    EmbeddingBag,
    TileGrid,
    TissueMask,
    assemble_bag,
    concat_embeddings,
    enumerate_tiles,
    read_mask,
    sample_training_slides,
    write_mask,
)
from .training import PatientData, TrainConfig, load_checkpoint, save_checkpoint, train
