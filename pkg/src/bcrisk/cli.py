"""Command-line entry points.

Every subcommand writes a ``run_manifest.json`` (config hash, seed, package
version) beside its outputs, and removes partial outputs when it fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import __version__
from .cohort import load_manifest, save_manifest
from .config import ExperimentConfig, config_hash, load_config
from .errors import BcriskError
from .pipeline import (
    compare_with_capra,
    nested_cv,
    stratify_scores,
    train_final_models,
    validate_external,
)
from .reporting import (
    CAPRA_SCHEMA,
    CV_SCHEMA,
    STRATIFY_SCHEMA,
    VALIDATION_SCHEMA,
    capra_report_payload,
    cv_report_payload,
    dump_json,
    load_report,
    render_capra_text,
    render_cv_text,
    render_validation_text,
    report_header,
    validation_report_payload,
    write_km_csv,
    write_roc_csv,
    write_violin_csv,
)
from .store import read_store, write_store
from .survstats import load_scores, save_scores
from .synthetic import SyntheticSignalSpec, generate_synthetic_cohort, unit_direction
from .tiling import enumerate_tiles, read_mask
from .training import load_checkpoint, save_checkpoint


_ACTIVE_TRACKERS: list["_OutputTracker"] = []


class _OutputTracker:
    """Records files written by a command so failures can clean them up."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.created: list[Path] = []
        out_dir.mkdir(parents=True, exist_ok=True)
        _ACTIVE_TRACKERS.append(self)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.created.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.created:
            p.unlink(missing_ok=True)


def _write_run_manifest(out: _OutputTracker, command: str, seed: int, cfg_hash: str) -> None:
    dump_json(
        {"command": command, "config_hash": cfg_hash, "seed": seed, "version": __version__},
        out.path("run_manifest.json"),
    )


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "modality", None):
        overrides["modalities"] = tuple(args.modality)
    if getattr(args, "cohort", None):
        overrides["cohort"] = Path(args.cohort)
    if getattr(args, "embeddings", None):
        overrides["embeddings"] = Path(args.embeddings)
    if getattr(args, "out", None):
        overrides["out_dir"] = Path(args.out)
    return dataclasses.replace(config, **overrides) if overrides else config


def _load_cohort_inputs(config: ExperimentConfig):
    if config.cohort is None:
        raise BcriskError("no cohort manifest given (use --cohort or [paths] in the config)")
    records = load_manifest(config.cohort)
    bags = read_store(config.embeddings) if config.embeddings else None
    if config.encoder and bags:
        bad = {b.provenance for b in bags if not b.provenance.startswith(config.encoder)}
        if bad:
            raise BcriskError(f"store provenance {sorted(bad)} does not match encoder "
                              f"{config.encoder!r}")
    return records, bags


def _cmd_synth(args) -> int:
    out = _OutputTracker(Path(args.out))
    spec = SyntheticSignalSpec(
        dim=args.dim,
        signal_direction=unit_direction(args.dim, args.seed),
        signal_tile_fraction_range=(args.signal_lo, args.signal_hi),
        noise_std=args.noise_std,
        beta=args.beta,
        baseline_hazard=args.baseline_hazard,
        censor_horizon=args.censor_horizon,
    )
    tiles = (args.tiles_min, args.tiles_max if args.tiles_max else args.tiles_min)
    records, bags, true_risk = generate_synthetic_cohort(
        spec,
        args.patients,
        tiles,
        args.seed,
        clinical_correlation=args.clinical_correlation,
        with_capra=args.with_capra,
    )
    save_manifest(records, out.path("manifest.csv"))
    write_store(bags, out.path("embeddings.bin"))
    lines = ["patient_id,true_risk"]
    lines += [f"{r.patient_id},{tr!r}" for r, tr in zip(records, true_risk)]
    out.path("true_risk.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    _write_run_manifest(out, "synth", args.seed, "-")
    print(f"wrote {args.patients} patients to {out.out_dir}")
    return 0


def _cmd_tile(args) -> int:
    out = _OutputTracker(Path(args.out))
    mask = read_mask(args.mask)
    grid = enumerate_tiles(mask, args.tile_size, args.stride, args.min_tissue)
    lines = ["x,y,tissue_fraction"]
    lines += [
        f"{int(x)},{int(y)},{f!r}"
        for (x, y), f in zip(grid.positions, grid.tissue_fraction)
    ]
    out.path("tiles.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    _write_run_manifest(out, "tile", 0, "-")
    nx, ny = grid.lattice_shape
    print(f"retained {len(grid)} of {nx * ny} lattice positions")
    return 0


def _cmd_cv(args) -> int:
    config = _resolve_config(args)
    out = _OutputTracker(config.out_dir or Path("."))
    records, bags = _load_cohort_inputs(config)
    results = nested_cv(records, bags, config)
    cfg_hash = config_hash(config)
    header = report_header(cfg_hash, config.seed, horizon_years=config.horizon_years)
    payload = cv_report_payload(results, header)
    dump_json(payload, out.path("cv_report.json"))
    out.path("cv_report.txt").write_bytes(render_cv_text(payload).encode("utf-8"))
    for modality, res in results.items():
        save_scores(res.held_out, out.path(f"held_out_scores_{modality}.csv"))
    _write_run_manifest(out, "cv", config.seed, cfg_hash)
    print(render_cv_text(payload))
    return 0


def _cmd_train_final(args) -> int:
    config = _resolve_config(args)
    out = _OutputTracker(config.out_dir or Path("."))
    records, bags = _load_cohort_inputs(config)
    models = train_final_models(records, bags, config)
    for modality, folds in models.items():
        for f, model in enumerate(folds):
            save_checkpoint(model, out.path(f"model_{modality}_fold{f}.json"))
    cfg_hash = config_hash(config)
    _write_run_manifest(out, "train-final", config.seed, cfg_hash)
    n = sum(len(v) for v in models.values())
    print(f"wrote {n} checkpoints to {out.out_dir}")
    return 0


def _cmd_validate(args) -> int:
    config = _resolve_config(args)
    out = _OutputTracker(config.out_dir or Path("."))
    records, bags = _load_cohort_inputs(config)
    models_dir = Path(args.models)
    models_by_modality: dict[str, list] = {}
    for path in sorted(models_dir.glob("model_*_fold*.json")):
        model = load_checkpoint(path)
        models_by_modality.setdefault(model.modality, []).append(model)
    if not models_by_modality:
        raise BcriskError(f"no checkpoints matching model_*_fold*.json in {models_dir}")
    reports = validate_external(models_by_modality, args.name, records, bags, config)
    if not reports:
        raise BcriskError(f"cohort {args.name!r} had usable inputs for no modality")
    cfg_hash = config_hash(config)
    header = report_header(cfg_hash, config.seed, horizon_years=config.horizon_years)
    payload = validation_report_payload(reports, header)
    dump_json(payload, out.path("validation_report.json"))
    out.path("validation_report.txt").write_bytes(
        render_validation_text(payload).encode("utf-8")
    )
    write_km_csv(
        [(f"{r.cohort}/{r.modality}", r.stratification.to_dict()) for r in reports],
        out.path("km_quartiles.csv"),
    )
    write_violin_csv(payload["cohorts"], out.path("auc_bootstrap.csv"))
    for r in reports:
        save_scores(r.scores, out.path(f"scores_{r.modality}.csv"))
        write_roc_csv(
            f"{r.cohort}/{r.modality}",
            r.scores,
            config.horizon_years,
            out.path(f"roc_{r.modality}.csv"),
        )
    _write_run_manifest(out, "validate", config.seed, cfg_hash)
    print(render_validation_text(payload))
    return 0


def _cmd_compare_capra(args) -> int:
    out = _OutputTracker(Path(args.out))
    records = load_manifest(args.cohort)
    scored = load_scores(args.scores)
    ai_scores = dict(zip(scored.patient_ids, scored.scores))
    report = compare_with_capra(
        records,
        ai_scores,
        horizon_years=args.horizon,
        n_bootstrap=args.n_boot,
        seed=args.seed,
    )
    header = report_header("-", args.seed, horizon_years=args.horizon)
    payload = capra_report_payload(report, header)
    dump_json(payload, out.path("capra_report.json"))
    out.path("capra_report.txt").write_bytes(render_capra_text(payload).encode("utf-8"))
    _write_run_manifest(out, "compare-capra", args.seed, "-")
    print(render_capra_text(payload))
    return 0


def _cmd_stratify(args) -> int:
    out = _OutputTracker(Path(args.out))
    data = load_scores(args.scores)
    strat = stratify_scores(data, args.horizon)
    payload = {
        "schema": STRATIFY_SCHEMA,
        "header": report_header("-", 0, horizon_years=args.horizon),
        "stratification": strat.to_dict(),
    }
    dump_json(payload, out.path("stratify_report.json"))
    write_km_csv([("scores", strat.to_dict())], out.path("km_quartiles.csv"))
    _write_run_manifest(out, "stratify", 0, "-")
    sizes = " ".join(f"Q{g}:{n}" for g, n in sorted(strat.group_sizes.items()))
    print(f"quartiles {sizes}; log-rank p={strat.logrank_p}")
    return 0


def _cmd_report(args) -> int:
    out = _OutputTracker(Path(args.out))
    payload = load_report(args.run)
    schema = payload["schema"]
    if schema == VALIDATION_SCHEMA:
        out.path("report.txt").write_bytes(render_validation_text(payload).encode("utf-8"))
        write_km_csv(
            [
                (f"{rep['cohort']}/{rep['modality']}", rep["stratification"])
                for rep in payload["cohorts"]
            ],
            out.path("km_quartiles.csv"),
        )
        write_violin_csv(payload["cohorts"], out.path("auc_bootstrap.csv"))
    elif schema == CV_SCHEMA:
        out.path("report.txt").write_bytes(render_cv_text(payload).encode("utf-8"))
    elif schema == CAPRA_SCHEMA:
        out.path("report.txt").write_bytes(render_capra_text(payload).encode("utf-8"))
    elif schema == STRATIFY_SCHEMA:
        write_km_csv([("scores", payload["stratification"])], out.path("km_quartiles.csv"))
    else:
        raise BcriskError(f"unknown report schema {schema!r}")
    _write_run_manifest(out, "report", 0, "-")
    print(f"rendered {schema} into {out.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bcrisk",
        description="Recurrence-risk models and survival statistics on tile embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort and embedding store")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--tiles-min", type=int, default=50)
    p.add_argument("--tiles-max", type=int, default=0, help="0 means fixed at --tiles-min")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--signal-lo", type=float, default=0.0)
    p.add_argument("--signal-hi", type=float, default=1.0)
    p.add_argument("--baseline-hazard", type=float, default=0.05)
    p.add_argument("--censor-horizon", type=float, default=10.0)
    p.add_argument("--clinical-correlation", type=float, default=0.0)
    p.add_argument("--with-capra", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", help="enumerate tissue tiles over a PGM mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--min-tissue", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tile)

    for name, fn, extra in (
        ("cv", _cmd_cv, "nested cross-validation on a development cohort"),
        ("train-final", _cmd_train_final, "train the five final models per modality"),
    ):
        p = sub.add_parser(name, help=extra)
        p.add_argument("--config")
        p.add_argument("--cohort")
        p.add_argument("--embeddings")
        p.add_argument("--modality", action="append", choices=["clinical", "image", "multimodal"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(func=fn)

    p = sub.add_parser("validate", help="ensemble-score an external cohort")
    p.add_argument("--config")
    p.add_argument("--models", required=True, help="directory with model_*_fold*.json")
    p.add_argument("--name", default="external")
    p.add_argument("--cohort", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("compare-capra", help="compare AI scores with CAPRA-S")
    p.add_argument("--cohort", required=True, help="manifest with CAPRA-S columns")
    p.add_argument("--scores", required=True, help="CSV patient_id,score,time_years,event")
    p.add_argument("--horizon", type=float, default=5.0)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compare_capra)

    p = sub.add_parser("stratify", help="quartile-stratify a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--horizon", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_stratify)

    p = sub.add_parser("report", help="render tables and plot CSVs from a report JSON")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _ACTIVE_TRACKERS.clear()
    try:
        return args.func(args)
    except BcriskError as exc:
        for tracker in _ACTIVE_TRACKERS:
            tracker.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
