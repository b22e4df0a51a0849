"""Risk-score networks, the Cox partial-likelihood loss and its gradients.

Three modalities share one design: a two-layer ReLU head maps a patient
representation to a scalar risk score. The representation is, by modality,

* ``image``      - tanh-attention pooling over tile embeddings,
* ``clinical``   - a fixed 3 -> 256 -> 128 ReLU encoder of (age, psa, isup),
* ``multimodal`` - the two concatenated.

Everything is plain float64 numpy with hand-derived backprop; gradients are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import NormalizationStats, SurvivalOutcome
from .errors import ContractError, EstimationError, NumericalError, ValidationError
from .tiling import EmbeddingBag

MODALITIES = ("clinical", "image", "multimodal")
CLINICAL_WIDTHS = (3, 256, 128)


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor for one risk model."""

    modality: str
    embed_dim: int | None = None
    attention_dim: int = 128
    head_dim: int = 128

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.modality != "clinical" and not self.embed_dim:
            raise ValidationError(f"{self.modality} models need embed_dim")
        if self.attention_dim < 1 or self.head_dim < 1:
            raise ValidationError("attention_dim and head_dim must be >= 1")

    @property
    def uses_image(self) -> bool:
        return self.modality in ("image", "multimodal")

    @property
    def uses_clinical(self) -> bool:
        return self.modality in ("clinical", "multimodal")

    @property
    def head_input_dim(self) -> int:
        dim = 0
        if self.uses_image:
            dim += int(self.embed_dim)
        if self.uses_clinical:
            dim += CLINICAL_WIDTHS[2]
        return dim


@dataclass(frozen=True)
class PatientExample:
    """One patient's model inputs plus (for training) the outcome."""

    bag: EmbeddingBag | None = None
    clinical: np.ndarray | None = None  # standardized (age, psa, isup)
    time: float | None = None
    event: bool | None = None
    patient_id: str | None = None


@dataclass
class RiskModel:
    modality: str
    arch: Architecture
    params: dict[str, np.ndarray]
    norm_stats: NormalizationStats | None = None


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: Architecture, seed: int) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    if arch.uses_image:
        d = int(arch.embed_dim)
        params["attn_V"] = _uniform_fan_in(rng, (arch.attention_dim, d), d)
        params["attn_w"] = _uniform_fan_in(rng, (arch.attention_dim,), arch.attention_dim)
    if arch.uses_clinical:
        d0, d1, d2 = CLINICAL_WIDTHS
        params["enc_W1"] = _uniform_fan_in(rng, (d1, d0), d0)
        params["enc_b1"] = np.zeros(d1)
        params["enc_W2"] = _uniform_fan_in(rng, (d2, d1), d1)
        params["enc_b2"] = np.zeros(d2)
    h_in = arch.head_input_dim
    params["head_W1"] = _uniform_fan_in(rng, (arch.head_dim, h_in), h_in)
    params["head_b1"] = np.zeros(arch.head_dim)
    params["head_w2"] = _uniform_fan_in(rng, (arch.head_dim,), arch.head_dim)
    params["head_b2"] = np.zeros(())
    return params


def attention_pool(bag: EmbeddingBag, params: dict[str, np.ndarray]):
    """Softmax-attention pooling over tiles.

    Per-tile logits are w . tanh(V h_k); the pooled vector is the
    attention-weighted sum of the tiles. Weights sum to 1 and the pooled
    vector is invariant to tile order.
    """
    h = bag.tiles.astype(float)
    pre = h @ params["attn_V"].T
    act = np.tanh(pre)
    logits = act @ params["attn_w"]
    logits = logits - logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    return weights @ h, weights


def _forward(params, arch: Architecture, example: PatientExample):
    """Score one patient, keeping every intermediate needed by backprop."""
    cache: dict[str, np.ndarray] = {}
    pieces = []
    if arch.uses_image:
        if example.bag is None:
            raise ContractError(f"{arch.modality} model needs an embedding bag")
        h = example.bag.tiles.astype(float)
        pre = h @ params["attn_V"].T
        act = np.tanh(pre)
        logits = act @ params["attn_w"]
        shifted = logits - logits.max()
        attn = np.exp(shifted)
        attn /= attn.sum()
        pooled = attn @ h
        cache.update(tiles=h, attn_act=act, attn=attn)
        pieces.append(pooled)
    if arch.uses_clinical:
        if example.clinical is None:
            raise ContractError(f"{arch.modality} model needs clinical features")
        c = np.asarray(example.clinical, dtype=float)
        if c.shape != (CLINICAL_WIDTHS[0],):
            raise ContractError(f"clinical input must be a 3-vector, got shape {c.shape}")
        u1_pre = params["enc_W1"] @ c + params["enc_b1"]
        u1 = np.maximum(u1_pre, 0.0)
        u2_pre = params["enc_W2"] @ u1 + params["enc_b2"]
        u2 = np.maximum(u2_pre, 0.0)
        cache.update(clin=c, u1_pre=u1_pre, u1=u1, u2_pre=u2_pre, u2=u2)
        pieces.append(u2)
    x = np.concatenate(pieces) if len(pieces) > 1 else pieces[0]
    h1_pre = params["head_W1"] @ x + params["head_b1"]
    h1 = np.maximum(h1_pre, 0.0)
    score = float(params["head_w2"] @ h1 + params["head_b2"])
    cache.update(x=x, h1_pre=h1_pre, h1=h1)
    return score, cache


def _backward(params, arch: Architecture, cache, dscore: float, grads) -> None:
    """Accumulate d(loss)/d(params) for one patient into ``grads``."""
    dh1 = dscore * params["head_w2"]
    grads["head_w2"] += dscore * cache["h1"]
    grads["head_b2"] += dscore
    dh1_pre = dh1 * (cache["h1_pre"] > 0)
    grads["head_W1"] += np.outer(dh1_pre, cache["x"])
    grads["head_b1"] += dh1_pre
    dx = params["head_W1"].T @ dh1_pre

    offset = 0
    if arch.uses_image:
        d = int(arch.embed_dim)
        dz = dx[:d]
        offset = d
        h, act, attn = cache["tiles"], cache["attn_act"], cache["attn"]
        dattn = h @ dz
        dlogits = attn * (dattn - attn @ dattn)
        grads["attn_w"] += act.T @ dlogits
        dact = np.outer(dlogits, params["attn_w"])
        dpre = dact * (1.0 - act * act)
        grads["attn_V"] += dpre.T @ h
    if arch.uses_clinical:
        du2 = dx[offset:]
        du2_pre = du2 * (cache["u2_pre"] > 0)
        grads["enc_W2"] += np.outer(du2_pre, cache["u1"])
        grads["enc_b2"] += du2_pre
        du1 = params["enc_W2"].T @ du2_pre
        du1_pre = du1 * (cache["u1_pre"] > 0)
        grads["enc_W1"] += np.outer(du1_pre, cache["clin"])
        grads["enc_b1"] += du1_pre


def predict(model: RiskModel, bag=None, clinical=None) -> float:
    """Deterministic risk score; inputs not used by the modality are ignored."""
    example = PatientExample(bag=bag, clinical=clinical)
    score, _ = _forward(model.params, model.arch, example)
    return score


def ensemble_predict(models: Sequence[RiskModel], examples: Sequence[PatientExample]):
    """Arithmetic mean of member scores, one value per example."""
    if not models:
        raise ContractError("ensemble needs at least one model")
    modality = models[0].modality
    if any(m.modality != modality for m in models):
        raise ContractError("ensemble members must share a modality")
    out = np.zeros(len(examples))
    for m in models:
        out += np.array([_forward(m.params, m.arch, ex)[0] for ex in examples])
    return out / len(models)


def _cox_loss_grad(scores: np.ndarray, times: np.ndarray, events: np.ndarray):
    """Breslow negative mean partial log-likelihood and d(loss)/d(scores)."""
    scores = np.asarray(scores, dtype=float)
    n_events = int(events.sum())
    if n_events == 0:
        raise EstimationError("Cox loss is undefined on a batch with zero events")
    order = np.argsort(times, kind="stable")
    s = scores[order]
    e = events[order]
    t = times[order]
    shift = s.max()
    exps = np.exp(s - shift)
    suffix = np.cumsum(exps[::-1])[::-1]

    n = len(s)
    risk = np.empty(n)  # risk-set sum for each subject's tie group
    cum_inv = np.empty(n)  # sum of delta_i / risk_i over events with t_i <= t_m
    loglik = 0.0
    running = 0.0
    i = 0
    while i < n:
        j = i
        while j < n and t[j] == t[i]:
            j += 1
        group_risk = suffix[i]
        risk[i:j] = group_risk
        d = int(e[i:j].sum())
        if d > 0:
            loglik += s[i:j][e[i:j]].sum() - d * (np.log(group_risk) + shift)
            running += d / group_risk
        cum_inv[i:j] = running
        i = j

    loss = -loglik / n_events
    grad_sorted = -(e.astype(float) - exps * cum_inv) / n_events
    grad = np.empty(n)
    grad[order] = grad_sorted
    return loss, grad


def cox_loss(scores: np.ndarray, outcomes: Sequence[SurvivalOutcome]) -> float:
    """Negative mean-over-events Cox partial log-likelihood of a batch.

    Risk sets are formed within the batch; simultaneous events share a
    Breslow risk set. Raises EstimationError when the batch has no events
    (the caller must resample such batches).
    """
    times = np.array([o.time for o in outcomes])
    events = np.array([o.event for o in outcomes])
    loss, _ = _cox_loss_grad(np.asarray(scores, dtype=float), times, events)
    return loss


def batch_scores(model: RiskModel, batch: Sequence[PatientExample]) -> np.ndarray:
    return np.array([_forward(model.params, model.arch, ex)[0] for ex in batch])


def batch_loss(model: RiskModel, batch: Sequence[PatientExample]) -> float:
    times = np.array([ex.time for ex in batch], dtype=float)
    events = np.array([ex.event for ex in batch], dtype=bool)
    loss, _ = _cox_loss_grad(batch_scores(model, batch), times, events)
    return loss


def loss_and_gradients(
    model: RiskModel, batch: Sequence[PatientExample]
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch Cox loss together with its exact parameter gradients."""
    times = np.array([ex.time for ex in batch], dtype=float)
    events = np.array([ex.event for ex in batch], dtype=bool)
    scores = np.empty(len(batch))
    caches = []
    for i, ex in enumerate(batch):
        scores[i], cache = _forward(model.params, model.arch, ex)
        caches.append(cache)
    loss, dscores = _cox_loss_grad(scores, times, events)
    if not np.isfinite(loss):
        raise NumericalError("non-finite Cox loss")
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for cache, ds in zip(caches, dscores):
        _backward(model.params, model.arch, cache, float(ds), grads)
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {key!r}")
    return loss, grads


def gradients(model: RiskModel, batch: Sequence[PatientExample]) -> dict[str, np.ndarray]:
    """Exact gradients of cox_loss(predict(...)) for every parameter."""
    return loss_and_gradients(model, batch)[1]


@dataclass
class AdamState:
    """First/second moment accumulators, zero-initialized to match params."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; pure function of its inputs."""
    if t < 1:
        raise ContractError(f"Adam step index must be >= 1, got {t}")
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ContractError("parameter, gradient and state keys must match")
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractError(f"shape mismatch for parameter {k!r}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(m=new_m, v=new_v)
