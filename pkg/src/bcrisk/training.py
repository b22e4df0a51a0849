"""Mini-batch Cox training with C-index early stopping, plus checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cohort import NormalizationStats, SurvivalOutcome
from .errors import FormatError, ValidationError
from .model import (
    AdamState,
    Architecture,
    PatientExample,
    RiskModel,
    adam_step,
    batch_scores,
    init_params,
    loss_and_gradients,
)
from .survstats import SurvivalData, c_index
from .tiling import EmbeddingBag, assemble_bag, sample_training_slides

CHECKPOINT_SCHEMA = "bcrisk-checkpoint/1"


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs; the defaults mirror the study configuration."""

    modality: str = "image"
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_tiles: int = 3500
    min_epochs: int = 100
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    attention_dim: int = 128
    head_dim: int = 128
    slides_per_epoch: int = 1

    def __post_init__(self):
        if not 0 < self.min_epochs <= self.max_epochs:
            raise ValidationError("need 0 < min_epochs <= max_epochs")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")


@dataclass(frozen=True)
class PatientData:
    """One patient's training-ready inputs: outcome, slides, covariates."""

    patient_id: str
    outcome: SurvivalOutcome
    clinical_z: np.ndarray | None = None  # standardized (age, psa, isup)
    slide_bags: tuple[EmbeddingBag, ...] = ()


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_cindex: float


def _pooled_example(pd: PatientData, max_tiles: int, sampler_seed, use_image: bool):
    bag = None
    if use_image:
        bag = assemble_bag(list(pd.slide_bags), max_tiles, sampler_seed)
    return PatientExample(
        bag=bag,
        clinical=pd.clinical_z,
        time=pd.outcome.time,
        event=pd.outcome.event,
        patient_id=pd.patient_id,
    )


def _epoch_examples(split, config: TrainConfig, epoch: int, use_image: bool):
    """Per-epoch training views; multi-slide patients get slides resampled."""
    examples = []
    for i, pd in enumerate(split):
        if use_image and len(pd.slide_bags) > config.slides_per_epoch:
            ids = [b.slide_id or str(j) for j, b in enumerate(pd.slide_bags)]
            chosen = set(
                sample_training_slides(ids, config.slides_per_epoch, [config.seed, epoch, i])
            )
            bags = [b for b, sid in zip(pd.slide_bags, ids) if sid in chosen]
            bag = assemble_bag(bags, config.max_tiles, [config.seed, epoch, i, 1])
            examples.append(
                PatientExample(
                    bag=bag,
                    clinical=pd.clinical_z,
                    time=pd.outcome.time,
                    event=pd.outcome.event,
                    patient_id=pd.patient_id,
                )
            )
        else:
            examples.append(_pooled_example(pd, config.max_tiles, [config.seed, i], use_image))
    return examples


def _validate_split(split: Sequence[PatientData], name: str, config: TrainConfig):
    if not split:
        raise ValidationError(f"{name} split is empty")
    if not any(p.outcome.event for p in split):
        raise ValidationError(f"{name} split has no events")
    arch_needs_image = config.modality in ("image", "multimodal")
    arch_needs_clinical = config.modality in ("clinical", "multimodal")
    for p in split:
        if arch_needs_image and not p.slide_bags:
            raise ValidationError(f"patient {p.patient_id!r} has no bags for {config.modality}")
        if arch_needs_clinical and p.clinical_z is None:
            raise ValidationError(
                f"patient {p.patient_id!r} has no clinical features for {config.modality}"
            )


def train(
    train_split: Sequence[PatientData],
    val_split: Sequence[PatientData],
    config: TrainConfig,
    norm_stats: NormalizationStats | None = None,
) -> tuple[RiskModel, list[EpochRecord]]:
    """Train one risk model, returning the best-validation-epoch parameters.

    Each epoch runs shuffled mini-batches of the Cox loss with Adam updates,
    then scores the validation split (all slides pooled, deterministic cap)
    and records its C-index. Training stops once ``epoch >= min_epochs`` and
    the C-index has not improved for ``patience`` consecutive epochs, or at
    ``max_epochs``. Mini-batches without events are skipped; the next
    epoch's reshuffle redraws their membership. Fully deterministic per
    ``config.seed``.
    """
    _validate_split(train_split, "train", config)
    _validate_split(val_split, "validation", config)

    use_image = config.modality in ("image", "multimodal")
    embed_dim = None
    if use_image:
        dims = {b.dim for p in list(train_split) + list(val_split) for b in p.slide_bags}
        if len(dims) != 1:
            raise ValidationError(f"mixed embedding dims across patients: {sorted(dims)}")
        embed_dim = dims.pop()
    arch = Architecture(
        modality=config.modality,
        embed_dim=embed_dim,
        attention_dim=config.attention_dim,
        head_dim=config.head_dim,
    )
    params = init_params(arch, config.seed)
    state = AdamState.for_params(params)
    model = RiskModel(modality=config.modality, arch=arch, params=params, norm_stats=norm_stats)

    val_examples = [
        _pooled_example(p, config.max_tiles, [config.seed, i], use_image)
        for i, p in enumerate(val_split)
    ]
    val_times = np.array([p.outcome.time for p in val_split])
    val_events = np.array([p.outcome.event for p in val_split])

    multi_slide = use_image and any(len(p.slide_bags) > config.slides_per_epoch for p in train_split)
    static_examples = None
    if not multi_slide:
        static_examples = _epoch_examples(train_split, config, 0, use_image)

    best_cindex = -np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    since_best = 0
    step = 0
    history: list[EpochRecord] = []
    for epoch in range(1, config.max_epochs + 1):
        examples = (
            static_examples
            if static_examples is not None
            else _epoch_examples(train_split, config, epoch, use_image)
        )
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(perm), config.batch_size):
            batch = [examples[i] for i in perm[start : start + config.batch_size]]
            if not any(ex.event for ex in batch):
                continue
            loss, grads = loss_and_gradients(model, batch)
            losses.append(loss)
            step += 1
            model.params, state = adam_step(
                model.params, grads, state, config.learning_rate, step
            )
        val_scores = batch_scores(model, val_examples)
        val_c = c_index(
            SurvivalData(times=val_times, events=val_events, scores=val_scores)
        )
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)) if losses else float("nan"),
                val_cindex=float(val_c),
            )
        )
        if val_c > best_cindex:
            best_cindex = val_c
            best_params = {k: v.copy() for k, v in model.params.items()}
            since_best = 0
        else:
            since_best += 1
        if epoch >= config.min_epochs and since_best >= config.patience:
            break
    model.params = best_params
    return model, history


def save_checkpoint(model: RiskModel, path: str | Path) -> None:
    """Versioned JSON checkpoint; floats round-trip exactly via repr."""
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "modality": model.modality,
        "arch": {
            "modality": model.arch.modality,
            "embed_dim": model.arch.embed_dim,
            "attention_dim": model.arch.attention_dim,
            "head_dim": model.arch.head_dim,
        },
        "params": {
            k: {"shape": list(v.shape), "data": v.ravel().tolist()}
            for k, v in model.params.items()
        },
        "norm_stats": None
        if model.norm_stats is None
        else {"means": list(model.norm_stats.means), "stds": list(model.norm_stats.stds)},
    }
    Path(path).write_bytes(json.dumps(payload, sort_keys=True, indent=1).encode("utf-8"))


def load_checkpoint(path: str | Path) -> RiskModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid checkpoint JSON: {exc}") from None
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise FormatError(f"{path}: unknown checkpoint schema {payload.get('schema')!r}")
    arch = Architecture(**payload["arch"])
    params = {
        k: np.asarray(spec["data"], dtype=float).reshape(spec["shape"])
        for k, spec in payload["params"].items()
    }
    stats = payload["norm_stats"]
    norm_stats = (
        None
        if stats is None
        else NormalizationStats(means=tuple(stats["means"]), stds=tuple(stats["stds"]))
    )
    return RiskModel(
        modality=payload["modality"], arch=arch, params=params, norm_stats=norm_stats
    )
