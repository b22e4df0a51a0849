"""Censored-survival statistics on (time, event, score/covariate) arrays.

Conventions used throughout (and by the training loss, which must agree):

* Kaplan-Meier risk sets include subjects censored at the current time.
* Harrell's C-index: score ties count 0.5; two events at the same time are
  not comparable; an event tied in time with a censored subject counts the
  censored one as surviving past it.
* Time-dependent AUC is the cumulative/dynamic variant at a fixed horizon,
  with inverse-probability-of-censoring weights from the Kaplan-Meier
  estimate of the censoring distribution; with no censoring it reduces
  exactly to the empirical binary AUC of (event by horizon) vs score.
* Cox partial likelihood uses Breslow tie handling.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from .errors import (
    ConvergenceError,
    EstimationError,
    ParseError,
    ReliabilityError,
    ValidationError,
)

__all__ = [
    "SurvivalData",
    "KmCurve",
    "LogRankResult",
    "MetricReport",
    "CoxFit",
    "LrtResult",
    "km_estimate",
    "logrank_test",
    "c_index",
    "time_dependent_auc",
    "bootstrap_ci",
    "cox_fit",
    "likelihood_ratio_test",
    "quartile_stratify",
    "load_scores",
    "save_scores",
]


@dataclass(frozen=True)
class SurvivalData:
    """Aligned arrays of follow-up times, event flags and optional marks."""

    times: np.ndarray
    events: np.ndarray
    scores: np.ndarray | None = None
    covariates: np.ndarray | None = None  # (n, p)
    patient_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        events = np.asarray(self.events, dtype=bool)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events)
        if times.ndim != 1 or events.shape != times.shape:
            raise ValidationError("times and events must be equal-length 1-D arrays")
        if np.any(times <= 0):
            raise ValidationError("all times must be > 0")
        if self.scores is not None:
            scores = np.asarray(self.scores, dtype=float)
            if scores.shape != times.shape:
                raise ValidationError("scores must align with times")
            object.__setattr__(self, "scores", scores)
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != times.shape[0]:
                raise ValidationError("covariates must be (n, p) aligned with times")
            object.__setattr__(self, "covariates", cov)
        if self.patient_ids is not None and len(self.patient_ids) != len(times):
            raise ValidationError("patient_ids must align with times")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_events(self) -> int:
        return int(self.events.sum())

    def subset(self, idx: np.ndarray) -> "SurvivalData":
        return SurvivalData(
            times=self.times[idx],
            events=self.events[idx],
            scores=None if self.scores is None else self.scores[idx],
            covariates=None if self.covariates is None else self.covariates[idx],
            patient_ids=None
            if self.patient_ids is None
            else tuple(self.patient_ids[i] for i in np.atleast_1d(idx)),
        )


@dataclass(frozen=True)
class KmCurve:
    """Product-limit estimate, defined at the observed event times."""

    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    n_events: np.ndarray

    def survival_at(self, t: float) -> float:
        """Step-function value S(t); S = 1 before the first event time."""
        i = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if i == 0 else float(self.survival[i - 1])


def km_estimate(data: SurvivalData) -> KmCurve:
    """Kaplan-Meier estimate of the event-free survival function."""
    if data.n_events == 0:
        raise EstimationError("Kaplan-Meier requires at least one event")
    t, d = data.times, data.events
    event_times = np.unique(t[d])
    at_risk = np.array([(t >= u).sum() for u in event_times])
    n_events = np.array([((t == u) & d).sum() for u in event_times])
    survival = np.cumprod(1.0 - n_events / at_risk)
    return KmCurve(
        event_times=event_times, survival=survival, at_risk=at_risk, n_events=n_events
    )


def _censoring_survival(times: np.ndarray, events: np.ndarray):
    """KM of the censoring distribution; events stay at risk through ties."""
    censor_times = np.unique(times[~events])
    factors = []
    for u in censor_times:
        n_u = (times >= u).sum()
        c_u = ((times == u) & ~events).sum()
        factors.append(1.0 - c_u / n_u)
    g = np.cumprod(factors) if len(factors) else np.array([])

    def g_left(t: float) -> float:
        # G(t-): product over censoring times strictly before t
        i = np.searchsorted(censor_times, t, side="left")
        return 1.0 if i == 0 else float(g[i - 1])

    def g_at(t: float) -> float:
        i = np.searchsorted(censor_times, t, side="right")
        return 1.0 if i == 0 else float(g[i - 1])

    return g_left, g_at


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    p_value: float
    df: int


def logrank_test(groups: Sequence[SurvivalData]) -> LogRankResult:
    """K-sample log-rank test with the multivariate hypergeometric variance."""
    if len(groups) < 2:
        raise ValidationError("log-rank needs at least two groups")
    k = len(groups)
    times = np.concatenate([g.times for g in groups])
    events = np.concatenate([g.events for g in groups])
    labels = np.concatenate([np.full(len(g), i) for i, g in enumerate(groups)])
    if not events.any():
        raise EstimationError("log-rank requires at least one event overall")

    observed = np.zeros(k)
    expected = np.zeros(k)
    cov = np.zeros((k, k))
    for u in np.unique(times[events]):
        at_risk = times >= u
        n = at_risk.sum()
        n_g = np.array([(at_risk & (labels == i)).sum() for i in range(k)])
        dead = (times == u) & events
        d = dead.sum()
        d_g = np.array([(dead & (labels == i)).sum() for i in range(k)])
        observed += d_g
        expected += d * n_g / n
        if n > 1:
            p = n_g / n
            cov += d * (n - d) / (n - 1) * (np.diag(p) - np.outer(p, p))

    v = (observed - expected)[: k - 1]
    vcov = cov[: k - 1, : k - 1]
    try:
        chi = float(v @ np.linalg.solve(vcov, v))
    except np.linalg.LinAlgError:
        chi = float(v @ np.linalg.pinv(vcov) @ v)
    chi = max(chi, 0.0)
    return LogRankResult(chi_square=chi, p_value=float(sps.chi2.sf(chi, k - 1)), df=k - 1)


def _pair_matrices(times, events, scores):
    t_i = times[:, None]
    t_j = times[None, :]
    comparable = events[:, None] & ((t_i < t_j) | ((t_i == t_j) & ~events[None, :]))
    np.fill_diagonal(comparable, False)
    s_i = scores[:, None]
    s_j = scores[None, :]
    return comparable, (s_i > s_j), (s_i == s_j)


def c_index(data: SurvivalData) -> float:
    """Harrell's concordance index of scores against censored outcomes."""
    if data.scores is None:
        raise ValidationError("c_index needs scores")
    t, d, s = data.times, data.events, data.scores
    n = len(t)
    if n <= 4000:
        comparable, greater, equal = _pair_matrices(t, d, s)
        n_comp = comparable.sum()
        conc = (comparable & greater).sum()
        ties = (comparable & equal).sum()
    else:
        n_comp = conc = ties = 0
        for i in np.flatnonzero(d):
            later = (t > t[i]) | ((t == t[i]) & ~d)
            later[i] = False
            n_comp += int(later.sum())
            conc += int((s[i] > s[later]).sum())
            ties += int((s[i] == s[later]).sum())
    if n_comp == 0:
        raise EstimationError("no comparable pairs")
    return (conc + 0.5 * ties) / n_comp


def time_dependent_auc(data: SurvivalData, horizon: float) -> float:
    """Cumulative/dynamic AUC at a horizon with IPCW case weights."""
    if data.scores is None:
        raise ValidationError("time_dependent_auc needs scores")
    t, d, s = data.times, data.events, data.scores
    cases = d & (t <= horizon)
    controls = t > horizon
    if not cases.any() or not controls.any():
        raise EstimationError("horizon leaves no cases or no controls")
    g_left, _ = _censoring_survival(t, d)
    # the control weight 1/G(horizon) is constant across controls and
    # cancels between numerator and denominator, so only case weights matter
    w_case = np.array([1.0 / g_left(u) for u in t[cases]])

    s_case = s[cases]
    s_ctrl = s[controls]
    num = 0.0
    for start in range(0, len(s_case), 256):
        block = s_case[start : start + 256, None]
        wins = (block > s_ctrl[None, :]).sum(axis=1) + 0.5 * (block == s_ctrl[None, :]).sum(
            axis=1
        )
        num += float(w_case[start : start + 256] @ wins)
    den = float(w_case.sum()) * len(s_ctrl)
    return num / den


def time_dependent_roc_points(data: SurvivalData, horizon: float):
    """IPCW-weighted ROC coordinates at the horizon, for plotting.

    Returns (fpr, tpr, thresholds) arrays swept over the observed scores,
    consistent with :func:`time_dependent_auc` (cases weighted by inverse
    censoring survival, controls unweighted).
    """
    if data.scores is None:
        raise ValidationError("roc points need scores")
    t, d, s = data.times, data.events, data.scores
    cases = d & (t <= horizon)
    controls = t > horizon
    if not cases.any() or not controls.any():
        raise EstimationError("horizon leaves no cases or no controls")
    g_left, _ = _censoring_survival(t, d)
    w_case = np.array([1.0 / g_left(u) for u in t[cases]])
    s_case, s_ctrl = s[cases], s[controls]
    thresholds = np.concatenate(([np.inf], np.unique(s)[::-1]))
    tpr = np.array([(w_case * (s_case >= c)).sum() / w_case.sum() for c in thresholds])
    fpr = np.array([(s_ctrl >= c).mean() for c in thresholds])
    return fpr, tpr, thresholds


@dataclass(frozen=True)
class MetricReport:
    """Point estimate with a percentile bootstrap interval."""

    metric: str
    estimate: float
    ci_low: float
    ci_high: float
    n_boot: int
    seed: int
    horizon_years: float | None = None
    n_degenerate: int = 0

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "estimate": self.estimate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_boot": self.n_boot,
            "horizon_years": self.horizon_years,
            "seed": self.seed,
            "n_degenerate": self.n_degenerate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            metric=d["metric"],
            estimate=d["estimate"],
            ci_low=d["ci_low"],
            ci_high=d["ci_high"],
            n_boot=d["n_boot"],
            seed=d["seed"],
            horizon_years=d.get("horizon_years"),
            n_degenerate=d.get("n_degenerate", 0),
        )


def bootstrap_ci(
    metric_fn: Callable[[SurvivalData], float],
    data: SurvivalData,
    *,
    metric_name: str,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    horizon_years: float | None = None,
    bootstrap_values: list | None = None,
) -> MetricReport:
    """Percentile bootstrap over patients, resampled with replacement.

    Resample ``i`` draws its indices from ``default_rng([seed, i])``, so the
    result does not depend on evaluation order. Resamples on which the
    metric is undefined (EstimationError) are skipped and counted; more than
    50% degenerate resamples raises ReliabilityError. If ``bootstrap_values``
    is supplied, the retained per-resample values are appended to it.
    """
    n = len(data)
    estimate = metric_fn(data)
    values = []
    n_degenerate = 0
    for i in range(n_resamples):
        rng = np.random.default_rng([seed, i])
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric_fn(data.subset(idx)))
        except EstimationError:
            n_degenerate += 1
    if n_degenerate > n_resamples // 2:
        raise ReliabilityError(
            f"{n_degenerate}/{n_resamples} bootstrap resamples were degenerate"
        )
    alpha = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [alpha, 100.0 - alpha])
    if bootstrap_values is not None:
        bootstrap_values.extend(values)
    return MetricReport(
        metric=metric_name,
        estimate=float(estimate),
        # percentile interval, widened if needed so it brackets the estimate
        ci_low=float(min(lo, estimate)),
        ci_high=float(max(hi, estimate)),
        n_boot=n_resamples,
        seed=seed,
        horizon_years=horizon_years,
        n_degenerate=n_degenerate,
    )


@dataclass(frozen=True)
class CoxFit:
    """Newton-Raphson fit of the Breslow partial likelihood."""

    beta: np.ndarray
    loglik: float
    loglik_null: float
    converged: bool
    n_iter: int
    collinear: bool = False
    separation_suspected: bool = False

    def linear_predictor(self, covariates: np.ndarray) -> np.ndarray:
        return np.asarray(covariates, dtype=float) @ self.beta


def _breslow_loglik_parts(times, events, x, beta, want_derivs):
    """Breslow partial log-likelihood and optional score/information."""
    n, p = x.shape
    eta = x @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    order = np.argsort(-times, kind="stable")
    ll = 0.0
    score = np.zeros(p) if want_derivs else None
    info = np.zeros((p, p)) if want_derivs else None
    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p)) if want_derivs else None
    i = 0
    while i < n:
        j = i
        t_cur = times[order[i]]
        while j < n and times[order[j]] == t_cur:
            idx = order[j]
            s0 += w[idx]
            s1 += w[idx] * x[idx]
            if want_derivs:
                s2 += w[idx] * np.outer(x[idx], x[idx])
            j += 1
        group = order[i:j]
        dead = group[events[group]]
        d = len(dead)
        if d > 0:
            ll += eta[dead].sum() - d * (np.log(s0) + shift)
            if want_derivs:
                xbar = s1 / s0
                score += x[dead].sum(axis=0) - d * xbar
                info += d * (s2 / s0 - np.outer(xbar, xbar))
        i = j
    return ll, score, info


def cox_fit(
    data: SurvivalData,
    max_iter: int = 100,
    grad_tol: float = 1e-8,
    loglik_tol: float = 1e-10,
) -> CoxFit:
    """Fit a Cox proportional-hazards model by Newton-Raphson.

    Convergence: max absolute score < ``grad_tol`` or relative
    log-likelihood change < ``loglik_tol``. Steps that lower the likelihood
    are halved. A singular information matrix (collinear covariates) falls
    back to least-squares steps and is flagged; coefficients running away
    (|beta| > 50) flag suspected monotone likelihood.
    """
    if data.covariates is None:
        raise ValidationError("cox_fit needs covariate rows")
    if data.n_events == 0:
        raise EstimationError("cox_fit requires at least one event")
    x = data.covariates
    t, d = data.times, data.events
    n, p = x.shape
    # centering covariates stabilizes exp() without changing beta
    center = x.mean(axis=0)
    xc = x - center

    beta = np.zeros(p)
    ll_null, _, _ = _breslow_loglik_parts(t, d, xc, beta, want_derivs=False)
    ll = ll_null
    collinear = False
    separation = False
    for it in range(1, max_iter + 1):
        ll, score, info = _breslow_loglik_parts(t, d, xc, beta, want_derivs=True)
        if np.max(np.abs(score)) < grad_tol:
            return CoxFit(beta, float(ll), float(ll_null), True, it, collinear, separation)
        try:
            delta = np.linalg.solve(info, score)
            if not np.all(np.isfinite(delta)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(info, score, rcond=None)[0]
            collinear = True
        step = 1.0
        ll_new = -np.inf
        for _ in range(30):
            cand = beta + step * delta
            ll_new, _, _ = _breslow_loglik_parts(t, d, xc, cand, want_derivs=False)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            step /= 2.0
        beta = beta + step * delta
        if np.max(np.abs(beta)) > 50.0:
            separation = True
        if abs(ll_new - ll) < loglik_tol * (abs(ll) + 1.0):
            return CoxFit(beta, float(ll_new), float(ll_null), True, it, collinear, separation)
        ll = ll_new
    msg = f"Cox fit did not converge in {max_iter} iterations"
    if separation:
        msg += " (monotone likelihood / perfect separation suspected)"
    raise ConvergenceError(msg)


@dataclass(frozen=True)
class LrtResult:
    chi_square: float
    p_value: float
    df: int


def likelihood_ratio_test(full: CoxFit, reduced: CoxFit, df_added: int) -> LrtResult:
    """Chi-square test of nested Cox fits on the same dataset."""
    chi = 2.0 * (full.loglik - reduced.loglik)
    if chi < -1e-6:
        raise ValidationError(
            f"models are not nested: full log-likelihood {full.loglik} is below "
            f"reduced {reduced.loglik}"
        )
    chi = max(chi, 0.0)
    return LrtResult(chi_square=chi, p_value=float(sps.chi2.sf(chi, df_added)), df=df_added)


def quartile_stratify(scores: np.ndarray) -> np.ndarray:
    """Labels 1..4 from the 25/50/75 empirical percentiles of the scores.

    Scores exactly at a cut go to the lower group; fully degenerate scores
    collapse into group 1 with a warning.
    """
    s = np.asarray(scores, dtype=float)
    if len(s) < 4:
        raise ValidationError(f"quartile stratification needs >= 4 patients, got {len(s)}")
    q1, q2, q3 = np.percentile(s, [25.0, 50.0, 75.0])
    if q1 == q3 and np.all(s == s[0]):
        warnings.warn("all scores identical; every patient assigned to quartile 1")
        return np.ones(len(s), dtype=int)
    labels = np.ones(len(s), dtype=int)
    labels[s > q1] = 2
    labels[s > q2] = 3
    labels[s > q3] = 4
    return labels


def load_scores(path: str | Path) -> SurvivalData:
    """Read the exchange CSV ``patient_id, score, time_years, event``."""
    pids, scores, times, events = [], [], [], []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = ["patient_id", "score", "time_years", "event"]
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"scores file is missing columns: {missing}")
        for i, row in enumerate(reader, start=2):
            try:
                pids.append(row["patient_id"])
                scores.append(float(row["score"]))
                times.append(float(row["time_years"]))
                events.append(row["event"] == "1")
            except (KeyError, ValueError) as exc:
                raise ParseError(f"row {i}: {exc}") from None
    return SurvivalData(
        times=np.array(times),
        events=np.array(events),
        scores=np.array(scores),
        patient_ids=tuple(pids),
    )


def save_scores(data: SurvivalData, path: str | Path) -> None:
    if data.scores is None or data.patient_ids is None:
        raise ValidationError("saving scores needs scores and patient ids")
    lines = ["patient_id,score,time_years,event"]
    for pid, s, t, e in zip(data.patient_ids, data.scores, data.times, data.events):
        lines.append(f"{pid},{s!r},{t!r},{'1' if e else '0'}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
