"""Report serialization: JSON payloads, aligned-text tables, plot CSVs."""

from __future__ import annotations

import json
from pathlib import Path

from . import __version__
from .errors import FormatError
from .pipeline import CapraComparisonReport, ExternalCohortReport, ModalityCvResult
from .survstats import SurvivalData, time_dependent_roc_points

CV_SCHEMA = "bcrisk-cv-report/1"
VALIDATION_SCHEMA = "bcrisk-validation-report/1"
CAPRA_SCHEMA = "bcrisk-capra-report/1"
STRATIFY_SCHEMA = "bcrisk-stratify-report/1"


def report_header(config_hash: str, seed: int, **extra) -> dict:
    header = {"config_hash": config_hash, "seed": seed, "version": __version__}
    header.update(extra)
    return header


def dump_json(payload: dict, path: Path) -> None:
    path.write_bytes(json.dumps(payload, sort_keys=True, indent=1).encode("utf-8"))


def load_report(path: str | Path) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid report JSON: {exc}") from None
    if "schema" not in payload:
        raise FormatError(f"{path}: missing report schema field")
    return payload


def _table(rows: list[list[str]], header: list[str]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def cv_report_payload(results: dict[str, ModalityCvResult], header: dict) -> dict:
    return {
        "schema": CV_SCHEMA,
        "header": header,
        "modalities": {m: r.to_dict() for m, r in results.items()},
    }


def render_cv_text(payload: dict) -> str:
    out = [
        "Nested cross-validation report",
        f"config_hash={payload['header']['config_hash']} seed={payload['header']['seed']}"
        f" version={payload['header']['version']}",
        "",
    ]
    rows = []
    for modality, res in sorted(payload["modalities"].items()):
        for fold in res["per_fold"]:
            rows.append(
                [
                    modality,
                    fold["fold"],
                    fold["n_train"],
                    fold["n_val"],
                    fold["n_test"],
                    fold["epochs"],
                    f"{fold['cindex']:.4f}",
                    f"{fold['auc']:.4f}",
                ]
            )
    out.append(
        _table(rows, ["modality", "fold", "n_train", "n_val", "n_test", "epochs", "cindex", "auc"])
    )
    out.append("")
    rows = [
        [
            m,
            f"{res['mean']['cindex']:.4f} +/- {res['std']['cindex']:.4f}",
            f"{res['mean']['auc']:.4f} +/- {res['std']['auc']:.4f}",
        ]
        for m, res in sorted(payload["modalities"].items())
    ]
    out.append(_table(rows, ["modality", "cindex (mean +/- std)", "auc (mean +/- std)"]))
    return "\n".join(out) + "\n"


def validation_report_payload(reports: list[ExternalCohortReport], header: dict) -> dict:
    return {
        "schema": VALIDATION_SCHEMA,
        "header": header,
        "cohorts": [r.to_dict() for r in reports],
    }


def render_validation_text(payload: dict) -> str:
    out = [
        "External validation report",
        f"config_hash={payload['header']['config_hash']} seed={payload['header']['seed']}"
        f" version={payload['header']['version']}",
        "",
    ]
    rows = []
    for rep in payload["cohorts"]:
        ci, auc = rep["cindex"], rep["auc"]
        rows.append(
            [
                rep["cohort"],
                rep["modality"],
                rep["n_scored"],
                f"{ci['estimate']:.3f} [{ci['ci_low']:.3f}, {ci['ci_high']:.3f}]",
                f"{auc['estimate']:.3f} [{auc['ci_low']:.3f}, {auc['ci_high']:.3f}]",
            ]
        )
    out.append(_table(rows, ["cohort", "modality", "n", "cindex [95% CI]", "5y AUC [95% CI]"]))
    out.append("")
    for rep in payload["cohorts"]:
        strat = rep["stratification"]
        out.append(f"Risk quartiles: {rep['cohort']} / {rep['modality']}")
        rows = [
            [
                f"Q{g}",
                strat["group_sizes"][g],
                f"{strat['five_year_survival'][g]:.3f}",
            ]
            for g in sorted(strat["group_sizes"])
        ]
        out.append(_table(rows, ["group", "n", "5y event-free survival"]))
        if strat["logrank_p"] is not None:
            out.append(
                f"log-rank across groups: chi2={strat['logrank_chi2']:.3f}"
                f" p={strat['logrank_p']:.4g}; lowest vs highest:"
                f" chi2={strat['extreme_chi2']:.3f} p={strat['extreme_p']:.4g}"
            )
        out.append("")
    return "\n".join(out) + "\n"


def capra_report_payload(report: CapraComparisonReport, header: dict) -> dict:
    return {"schema": CAPRA_SCHEMA, "header": header, "comparison": report.to_dict()}


def render_capra_text(payload: dict) -> str:
    c = payload["comparison"]

    def fmt(m):
        return f"{m['estimate']:.3f} [{m['ci_low']:.3f}, {m['ci_high']:.3f}]"

    rows = [
        ["AI score", fmt(c["auc_ai"])],
        ["CAPRA-S", fmt(c["auc_capra"])],
        ["AI + CAPRA-S (Cox)", fmt(c["auc_combined"])],
        ["delta (AI - CAPRA-S)", fmt(c["delta_auc"])],
    ]
    return "\n".join(
        [
            "CAPRA-S comparison report",
            f"config_hash={payload['header']['config_hash']} seed={payload['header']['seed']}"
            f" version={payload['header']['version']}",
            f"patients={c['n_patients']} excluded={c['n_excluded']}",
            "",
            _table(rows, ["model", "5y AUC [95% CI]"]),
            "",
            f"likelihood-ratio test (CAPRA-S vs CAPRA-S + AI):"
            f" chi2={c['lrt_chi2']:.4f} p={c['lrt_p']:.6g}",
        ]
    ) + "\n"


def write_km_csv(strat_dicts: list[tuple[str, dict]], path: Path) -> None:
    """KM step coordinates per (label, quartile) as plot-ready CSV."""
    lines = ["cohort,quartile,time_years,survival"]
    for label, strat in strat_dicts:
        for g in sorted(strat["km_curves"]):
            curve = strat["km_curves"][g]
            for t, s in zip(curve["times"], curve["survival"]):
                lines.append(f"{label},Q{g},{t!r},{s!r}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def write_violin_csv(reports: list[dict], path: Path) -> None:
    """Bootstrap AUC replicates per cohort/modality (violin plot data)."""
    lines = ["cohort,modality,auc_bootstrap"]
    for rep in reports:
        for v in rep.get("auc_bootstrap", []):
            lines.append(f"{rep['cohort']},{rep['modality']},{v!r}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def write_roc_csv(label: str, data: SurvivalData, horizon: float, path: Path) -> None:
    fpr, tpr, thr = time_dependent_roc_points(data, horizon)
    lines = ["label,threshold,fpr,tpr"]
    for c, f, t in zip(thr, fpr, tpr):
        lines.append(f"{label},{c!r},{f!r},{t!r}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
