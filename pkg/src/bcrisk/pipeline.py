"""Experiment orchestration: folds, nested CV, external validation, CAPRA-S.

All routines are deterministic functions of (inputs, config): every random
choice flows from the experiment seed through named substreams, so two runs
with the same inputs produce identical reports.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cohort import CohortRecord, capra_s_score, fit_normalization, normalize_clinical
from .config import ExperimentConfig
from .errors import ConvergenceError, EstimationError, ValidationError
from .model import RiskModel, predict
from .survstats import (
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
from .tiling import EmbeddingBag, assemble_bag
from .training import PatientData, train

logger = logging.getLogger("bcrisk")


def _stream_seed(*parts: int) -> int:
    """Well-mixed integer seed for a named substream of the master seed."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of each patient to exactly one of k folds."""

    k: int
    fold_of: dict[str, int]
    strata: dict[str, tuple]

    def members(self, fold: int) -> list[str]:
        return [pid for pid, f in self.fold_of.items() if f == fold]


def make_folds(
    records: list[CohortRecord], k: int = 5, bins: int = 4, seed: int = 0
) -> FoldPlan:
    """Stratified folds balancing event status, follow-up bin and ISUP.

    Patients are grouped into composite strata, each stratum is shuffled,
    and a single round-robin counter (continuing across strata) deals
    patients to folds, so per-stratum fold counts differ by at most one.
    """
    if len(records) < k:
        raise ValidationError(f"need at least k={k} patients, got {len(records)}")
    if bins < 2:
        raise ValidationError("need at least 2 follow-up bins")
    times = np.array([r.outcome.time for r in records])
    edges = np.quantile(times, [i / bins for i in range(1, bins)])
    strata: dict[tuple, list[str]] = {}
    label_of: dict[str, tuple] = {}
    for r in records:
        fbin = int(np.searchsorted(edges, r.outcome.time, side="right"))
        isup = r.clinical.isup_grade if r.clinical is not None else 0
        key = (bool(r.outcome.event), fbin, isup)
        strata.setdefault(key, []).append(r.patient_id)
        label_of[r.patient_id] = key
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    counter = 0
    for key in sorted(strata):
        pids = strata[key]
        for j in rng.permutation(len(pids)):
            fold_of[pids[j]] = counter % k
            counter += 1
    return FoldPlan(k=k, fold_of=fold_of, strata=label_of)


def _bags_by_patient(bags: list[EmbeddingBag] | None) -> dict[str, tuple[EmbeddingBag, ...]]:
    grouped: dict[str, list[EmbeddingBag]] = {}
    for b in bags or []:
        grouped.setdefault(b.patient_id, []).append(b)
    return {pid: tuple(v) for pid, v in grouped.items()}


def _eligible(records, bag_map, modality):
    out = []
    for r in records:
        if modality in ("image", "multimodal") and r.patient_id not in bag_map:
            continue
        if modality in ("clinical", "multimodal") and r.clinical is None:
            continue
        out.append(r)
    return out


def _patient_data(records, bag_map, stats, modality) -> list[PatientData]:
    out = []
    for r in records:
        clinical_z = None
        if modality in ("clinical", "multimodal"):
            clinical_z = normalize_clinical(r.clinical, stats)
        out.append(
            PatientData(
                patient_id=r.patient_id,
                outcome=r.outcome,
                clinical_z=clinical_z,
                slide_bags=bag_map.get(r.patient_id, ()) if modality != "clinical" else (),
            )
        )
    return out


def _score_records(models, records, bag_map, max_tiles, eval_seed) -> np.ndarray:
    """Fold-ensemble scores; clinical inputs use each member's own stats."""
    uses_image = models[0].arch.uses_image
    uses_clinical = models[0].arch.uses_clinical
    bags = {}
    if uses_image:
        bags = {
            r.patient_id: assemble_bag(
                list(bag_map[r.patient_id]), max_tiles, [eval_seed, i]
            )
            for i, r in enumerate(records)
        }
    total = np.zeros(len(records))
    for m in models:
        for i, r in enumerate(records):
            clinical = (
                normalize_clinical(r.clinical, m.norm_stats) if uses_clinical else None
            )
            total[i] += predict(m, bag=bags.get(r.patient_id), clinical=clinical)
    return total / len(models)


@dataclass
class FoldOutcome:
    fold: int
    n_train: int
    n_val: int
    n_test: int
    epochs: int
    cindex: float
    auc: float


@dataclass
class ModalityCvResult:
    modality: str
    per_fold: list[FoldOutcome]
    mean: dict[str, float]
    std: dict[str, float]
    held_out: SurvivalData
    models: list[RiskModel] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "per_fold": [
                {
                    "fold": f.fold,
                    "n_train": f.n_train,
                    "n_val": f.n_val,
                    "n_test": f.n_test,
                    "epochs": f.epochs,
                    "cindex": f.cindex,
                    "auc": f.auc,
                }
                for f in self.per_fold
            ],
            "mean": self.mean,
            "std": self.std,
            "held_out_scores": {
                pid: float(s)
                for pid, s in zip(self.held_out.patient_ids, self.held_out.scores)
            },
        }


def nested_cv(
    records: list[CohortRecord],
    bags: list[EmbeddingBag] | None,
    config: ExperimentConfig,
) -> dict[str, ModalityCvResult]:
    """Nested stratified k-fold cross-validation, one result per modality.

    Outer fold f is the held-out test set, fold (f+1) mod k the
    early-stopping validation set, the remaining folds the training set
    (the 60/20/20 split at k=5). Folds are shared across modalities.
    """
    plan = make_folds(records, k=config.folds, bins=config.followup_bins, seed=config.seed)
    bag_map = _bags_by_patient(bags)
    results: dict[str, ModalityCvResult] = {}
    for mod_idx, modality in enumerate(config.modalities):
        eligible = _eligible(records, bag_map, modality)
        if len(eligible) < config.folds:
            raise ValidationError(f"too few eligible patients for modality {modality!r}")
        by_fold: dict[int, list[CohortRecord]] = {f: [] for f in range(config.folds)}
        for r in eligible:
            by_fold[plan.fold_of[r.patient_id]].append(r)
        for f in range(config.folds):
            if not any(r.outcome.event for r in by_fold[f]):
                raise ValidationError(f"fold {f} has no events for modality {modality!r}")

        per_fold: list[FoldOutcome] = []
        models: list[RiskModel] = []
        held_pids: list[str] = []
        held_scores: list[float] = []
        held_times: list[float] = []
        held_events: list[bool] = []
        for f in range(config.folds):
            val_fold = (f + 1) % config.folds
            test_recs = by_fold[f]
            val_recs = by_fold[val_fold]
            train_recs = [
                r
                for g in range(config.folds)
                if g not in (f, val_fold)
                for r in by_fold[g]
            ]
            stats = None
            if modality in ("clinical", "multimodal"):
                stats = fit_normalization(train_recs)
            train_split = _patient_data(train_recs, bag_map, stats, modality)
            val_split = _patient_data(val_recs, bag_map, stats, modality)
            train_cfg = config.train_for(modality, _stream_seed(config.seed, mod_idx, f))
            model, history = train(train_split, val_split, train_cfg, norm_stats=stats)
            models.append(model)

            eval_seed = _stream_seed(config.seed, mod_idx, f, 1)
            scores = _score_records([model], test_recs, bag_map, train_cfg.max_tiles, eval_seed)
            test_data = SurvivalData(
                times=[r.outcome.time for r in test_recs],
                events=[r.outcome.event for r in test_recs],
                scores=scores,
                patient_ids=tuple(r.patient_id for r in test_recs),
            )
            per_fold.append(
                FoldOutcome(
                    fold=f,
                    n_train=len(train_recs),
                    n_val=len(val_recs),
                    n_test=len(test_recs),
                    epochs=len(history),
                    cindex=float(c_index(test_data)),
                    auc=float(time_dependent_auc(test_data, config.horizon_years)),
                )
            )
            held_pids.extend(test_data.patient_ids)
            held_scores.extend(scores.tolist())
            held_times.extend(test_data.times.tolist())
            held_events.extend(test_data.events.tolist())

        cvals = np.array([fo.cindex for fo in per_fold])
        avals = np.array([fo.auc for fo in per_fold])
        results[modality] = ModalityCvResult(
            modality=modality,
            per_fold=per_fold,
            mean={"cindex": float(cvals.mean()), "auc": float(avals.mean())},
            std={"cindex": float(cvals.std(ddof=1)), "auc": float(avals.std(ddof=1))},
            held_out=SurvivalData(
                times=held_times,
                events=held_events,
                scores=held_scores,
                patient_ids=tuple(held_pids),
            ),
            models=models,
        )
    return results


@dataclass
class StratificationReport:
    """Quartile risk groups with their KM curves and log-rank tests."""

    group_sizes: dict[int, int]
    five_year_survival: dict[int, float]
    km_curves: dict[int, dict]
    logrank_chi2: float | None
    logrank_p: float | None
    extreme_chi2: float | None  # lowest vs highest occupied group
    extreme_p: float | None
    horizon_years: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "group_sizes": {str(k): v for k, v in self.group_sizes.items()},
            "five_year_survival": {str(k): v for k, v in self.five_year_survival.items()},
            "km_curves": {str(k): v for k, v in self.km_curves.items()},
            "logrank_chi2": self.logrank_chi2,
            "logrank_p": self.logrank_p,
            "extreme_chi2": self.extreme_chi2,
            "extreme_p": self.extreme_p,
            "horizon_years": self.horizon_years,
            "degenerate": self.degenerate,
        }


def stratify_scores(data: SurvivalData, horizon_years: float) -> StratificationReport:
    """Quartile-stratify scored patients and test group separation."""
    labels = quartile_stratify(data.scores)
    groups = sorted(set(labels.tolist()))
    sizes = {g: int((labels == g).sum()) for g in groups}
    curves: dict[int, dict] = {}
    five_year: dict[int, float] = {}
    subsets = {}
    for g in groups:
        sub = data.subset(np.flatnonzero(labels == g))
        subsets[g] = sub
        if sub.n_events > 0:
            km = km_estimate(sub)
            curves[g] = {
                "times": [0.0] + km.event_times.tolist(),
                "survival": [1.0] + km.survival.tolist(),
            }
            five_year[g] = km.survival_at(horizon_years)
        else:
            curves[g] = {"times": [0.0], "survival": [1.0]}
            five_year[g] = 1.0
    degenerate = len(groups) < 2
    logrank_chi2 = logrank_p = extreme_chi2 = extreme_p = None
    if not degenerate:
        overall = logrank_test([subsets[g] for g in groups])
        logrank_chi2, logrank_p = overall.chi_square, overall.p_value
        extremes = logrank_test([subsets[groups[0]], subsets[groups[-1]]])
        extreme_chi2, extreme_p = extremes.chi_square, extremes.p_value
    return StratificationReport(
        group_sizes=sizes,
        five_year_survival=five_year,
        km_curves=curves,
        logrank_chi2=logrank_chi2,
        logrank_p=logrank_p,
        extreme_chi2=extreme_chi2,
        extreme_p=extreme_p,
        horizon_years=horizon_years,
        degenerate=degenerate,
    )


@dataclass
class ExternalCohortReport:
    cohort: str
    modality: str
    n_scored: int
    cindex: MetricReport
    auc: MetricReport
    stratification: StratificationReport
    scores: SurvivalData
    auc_bootstrap: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cohort": self.cohort,
            "modality": self.modality,
            "n_scored": self.n_scored,
            "cindex": self.cindex.to_dict(),
            "auc": self.auc.to_dict(),
            "stratification": self.stratification.to_dict(),
            "scores": {
                pid: float(s) for pid, s in zip(self.scores.patient_ids, self.scores.scores)
            },
            "auc_bootstrap": self.auc_bootstrap,
        }


def train_final_models(
    records: list[CohortRecord],
    bags: list[EmbeddingBag] | None,
    config: ExperimentConfig,
) -> dict[str, list[RiskModel]]:
    """Five models per modality on the k-fold 80/20 splits of the dev cohort.

    Fold f serves as the 20% early-stopping split of model f; the other
    folds form its training set.
    """
    plan = make_folds(records, k=config.folds, bins=config.followup_bins, seed=config.seed)
    bag_map = _bags_by_patient(bags)
    out: dict[str, list[RiskModel]] = {}
    for mod_idx, modality in enumerate(config.modalities):
        eligible = _eligible(records, bag_map, modality)
        if len(eligible) < config.folds:
            raise ValidationError(f"too few eligible patients for modality {modality!r}")
        models = []
        for f in range(config.folds):
            val_recs = [r for r in eligible if plan.fold_of[r.patient_id] == f]
            train_recs = [r for r in eligible if plan.fold_of[r.patient_id] != f]
            if not any(r.outcome.event for r in val_recs):
                raise ValidationError(f"fold {f} has no events for modality {modality!r}")
            stats = None
            if modality in ("clinical", "multimodal"):
                stats = fit_normalization(train_recs)
            model, _ = train(
                _patient_data(train_recs, bag_map, stats, modality),
                _patient_data(val_recs, bag_map, stats, modality),
                config.train_for(modality, _stream_seed(config.seed, 100 + mod_idx, f)),
                norm_stats=stats,
            )
            models.append(model)
        out[modality] = models
    return out


def validate_external(
    models_by_modality: dict[str, list[RiskModel]],
    external_name: str,
    records: list[CohortRecord],
    bags: list[EmbeddingBag] | None,
    config: ExperimentConfig,
) -> list[ExternalCohortReport]:
    """Ensemble-score one external cohort and evaluate every usable modality.

    A modality without the inputs it needs in this cohort is skipped with a
    logged warning rather than failing the run.
    """
    bag_map = _bags_by_patient(bags)
    reports: list[ExternalCohortReport] = []
    for modality, models in models_by_modality.items():
        eligible = _eligible(records, bag_map, modality)
        if not eligible:
            logger.warning(
                "cohort %s lacks inputs for modality %s; skipping", external_name, modality
            )
            continue
        eval_seed = _stream_seed(config.seed, 7)
        scores = _score_records(
            models, eligible, bag_map, config.train.max_tiles, eval_seed
        )
        data = SurvivalData(
            times=[r.outcome.time for r in eligible],
            events=[r.outcome.event for r in eligible],
            scores=scores,
            patient_ids=tuple(r.patient_id for r in eligible),
        )
        cindex_report = bootstrap_ci(
            c_index,
            data,
            metric_name="cindex",
            n_resamples=config.n_bootstrap,
            seed=config.seed,
        )
        auc_samples: list[float] = []
        auc_report = bootstrap_ci(
            lambda d: time_dependent_auc(d, config.horizon_years),
            data,
            metric_name="auc",
            n_resamples=config.n_bootstrap,
            seed=config.seed,
            horizon_years=config.horizon_years,
            bootstrap_values=auc_samples,
        )
        reports.append(
            ExternalCohortReport(
                cohort=external_name,
                modality=modality,
                n_scored=len(eligible),
                cindex=cindex_report,
                auc=auc_report,
                stratification=stratify_scores(data, config.horizon_years),
                scores=data,
                auc_bootstrap=auc_samples,
            )
        )
    return reports


@dataclass
class CapraComparisonReport:
    """The guideline-comparison workflow: AUCs, delta, and the LRT."""

    n_patients: int
    n_excluded: int
    auc_ai: MetricReport
    auc_capra: MetricReport
    auc_combined: MetricReport
    delta_auc: MetricReport
    lrt_chi2: float
    lrt_p: float

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "n_excluded": self.n_excluded,
            "auc_ai": self.auc_ai.to_dict(),
            "auc_capra": self.auc_capra.to_dict(),
            "auc_combined": self.auc_combined.to_dict(),
            "delta_auc": self.delta_auc.to_dict(),
            "lrt_chi2": self.lrt_chi2,
            "lrt_p": self.lrt_p,
        }


def _with_scores(data: SurvivalData, scores: np.ndarray) -> SurvivalData:
    return SurvivalData(times=data.times, events=data.events, scores=scores)


def compare_with_capra(
    records: list[CohortRecord],
    ai_scores: dict[str, float],
    horizon_years: float = 5.0,
    n_bootstrap: int = 1000,
    seed: int = 0,
) -> CapraComparisonReport:
    """5-year AUC of AI vs CAPRA-S vs both combined, plus the nested LRT.

    Patients missing CAPRA-S inputs or an AI score are excluded (counted).
    The combined model is a two-covariate Cox fit; its AUC is bootstrapped
    by refitting on each resample. The LRT compares (CAPRA-S) against
    (CAPRA-S + AI score) with one added degree of freedom.
    """
    kept = [
        r
        for r in records
        if r.capra_s_inputs is not None and r.patient_id in ai_scores
    ]
    n_excluded = len(records) - len(kept)
    if len(kept) < 4:
        raise ValidationError("too few patients with complete CAPRA-S inputs and scores")
    capra = np.array([float(capra_s_score(r.capra_s_inputs)[0]) for r in kept])
    ai = np.array([ai_scores[r.patient_id] for r in kept])
    base = SurvivalData(
        times=[r.outcome.time for r in kept],
        events=[r.outcome.event for r in kept],
        covariates=np.column_stack([capra, ai]),
        patient_ids=tuple(r.patient_id for r in kept),
    )

    def auc_ai_fn(d: SurvivalData) -> float:
        return time_dependent_auc(_with_scores(d, d.covariates[:, 1]), horizon_years)

    def auc_capra_fn(d: SurvivalData) -> float:
        return time_dependent_auc(_with_scores(d, d.covariates[:, 0]), horizon_years)

    def delta_fn(d: SurvivalData) -> float:
        return auc_ai_fn(d) - auc_capra_fn(d)

    def auc_combined_fn(d: SurvivalData) -> float:
        try:
            fit = cox_fit(d)
        except ConvergenceError as exc:
            raise EstimationError(f"combined model did not converge: {exc}") from None
        return time_dependent_auc(
            _with_scores(d, fit.linear_predictor(d.covariates)), horizon_years
        )

    common = dict(n_resamples=n_bootstrap, seed=seed, horizon_years=horizon_years)
    auc_ai_report = bootstrap_ci(auc_ai_fn, base, metric_name="auc_ai", **common)
    auc_capra_report = bootstrap_ci(auc_capra_fn, base, metric_name="auc_capra", **common)
    auc_combined_report = bootstrap_ci(
        auc_combined_fn, base, metric_name="auc_combined", **common
    )
    delta_report = bootstrap_ci(delta_fn, base, metric_name="delta_auc", **common)

    full = cox_fit(base)
    reduced = cox_fit(
        SurvivalData(times=base.times, events=base.events, covariates=capra[:, None])
    )
    lrt = likelihood_ratio_test(full, reduced, df_added=1)
    return CapraComparisonReport(
        n_patients=len(kept),
        n_excluded=n_excluded,
        auc_ai=auc_ai_report,
        auc_capra=auc_capra_report,
        auc_combined=auc_combined_report,
        delta_auc=delta_report,
        lrt_chi2=lrt.chi_square,
        lrt_p=lrt.p_value,
    )
