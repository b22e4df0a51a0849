"""Experiment configuration: defaults, TOML loading, canonical hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError, ValidationError
from .model import MODALITIES
from .training import TrainConfig

if sys.version_info >= (3, 11):  # pragma: no cover - version-dependent import
    import tomllib
else:
    import tomli as tomllib

_EXPERIMENT_KEYS = {
    "modalities",
    "encoder",
    "horizon_years",
    "n_bootstrap",
    "seed",
    "folds",
    "followup_bins",
}
_TRAIN_KEYS = {
    "learning_rate",
    "batch_size",
    "max_tiles",
    "min_epochs",
    "max_epochs",
    "patience",
    "attention_dim",
    "head_dim",
    "slides_per_epoch",
}
_PATH_KEYS = {"cohort", "embeddings", "out_dir"}
_EXTERNAL_KEYS = {"name", "cohort", "embeddings"}


@dataclass(frozen=True)
class ExternalCohortRef:
    name: str
    cohort: Path
    embeddings: Path | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs beyond the input files themselves."""

    modalities: tuple[str, ...] = ("image",)
    encoder: str | None = None  # expected bag-provenance prefix, if any
    horizon_years: float = 5.0
    n_bootstrap: int = 1000
    seed: int = 0
    folds: int = 5
    followup_bins: int = 4
    train: TrainConfig = TrainConfig()
    cohort: Path | None = None
    embeddings: Path | None = None
    out_dir: Path | None = None
    externals: tuple[ExternalCohortRef, ...] = ()

    def __post_init__(self):
        if self.horizon_years <= 0:
            raise ValidationError("horizon_years must be > 0")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if self.followup_bins < 2:
            raise ValidationError("followup_bins must be >= 2")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValidationError(f"unknown modality {m!r}")

    def train_for(self, modality: str, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, modality=modality, seed=seed)


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ParseError(f"config section [{section}] has unknown keys: {sorted(unknown)}")


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a TOML experiment config; unknown sections or keys are errors."""
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    unknown = set(doc) - {"experiment", "train", "paths", "external"}
    if unknown:
        raise ParseError(f"{path}: unknown config sections: {sorted(unknown)}")

    exp = doc.get("experiment", {})
    _check_keys("experiment", exp, _EXPERIMENT_KEYS)
    tr = doc.get("train", {})
    _check_keys("train", tr, _TRAIN_KEYS)
    paths = doc.get("paths", {})
    _check_keys("paths", paths, _PATH_KEYS)

    externals = []
    for i, ext in enumerate(doc.get("external", [])):
        _check_keys(f"external #{i + 1}", ext, _EXTERNAL_KEYS)
        if "name" not in ext or "cohort" not in ext:
            raise ParseError(f"{path}: [[external]] #{i + 1} needs 'name' and 'cohort'")
        externals.append(
            ExternalCohortRef(
                name=ext["name"],
                cohort=Path(ext["cohort"]),
                embeddings=Path(ext["embeddings"]) if "embeddings" in ext else None,
            )
        )

    train = TrainConfig(**tr)
    return ExperimentConfig(
        modalities=tuple(exp.get("modalities", ("image",))),
        encoder=exp.get("encoder"),
        horizon_years=float(exp.get("horizon_years", 5.0)),
        n_bootstrap=int(exp.get("n_bootstrap", 1000)),
        seed=int(exp.get("seed", 0)),
        folds=int(exp.get("folds", 5)),
        followup_bins=int(exp.get("followup_bins", 4)),
        train=train,
        cohort=Path(paths["cohort"]) if "cohort" in paths else None,
        embeddings=Path(paths["embeddings"]) if "embeddings" in paths else None,
        out_dir=Path(paths["out_dir"]) if "out_dir" in paths else None,
        externals=tuple(externals),
    )


def config_hash(config: ExperimentConfig) -> str:
    """Stable hash of the numeric/semantic configuration (paths excluded)."""

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, Path):
            return None
        return obj

    payload = clean(dataclasses.asdict(config))
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()[:16]
