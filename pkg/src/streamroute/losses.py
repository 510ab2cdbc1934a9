"""Training objective kernels with analytic gradients.

Two components make up the scorer's objective:

* a cross-modal contrastive term that pulls each text window embedding
  toward its own visual/audio embeddings and away from other batch rows
  (in-batch negatives, cosine similarity, temperature tau);
* an IoU-weighted cross-entropy that scales each window's supervised term
  by the temporal overlap between the window extent and its ground-truth
  segment, raised to the power beta.

Every gradient here is derived by hand and checked against central finite
differences (see finite_difference_check); the kernels are pure functions
over numpy arrays and safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Probabilities are clamped here before log() so a confident-but-wrong row
#: yields a large finite penalty instead of -inf.
LOG_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Objective weights: alpha scales the cross-modal term, beta the IoU
    exponent, tau the contrastive temperature."""

    alpha: float = 0.25
    beta: float = 1.0
    tau: float = 0.07

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class BatchEmbeddings:
    """Window-level embeddings per modality, each (B, E)."""

    text: np.ndarray
    visual: np.ndarray
    audio: np.ndarray

    def __post_init__(self) -> None:
        t, v, a = (np.asarray(m, dtype=np.float64) for m in (self.text, self.visual, self.audio))
        if t.ndim != 2 or t.shape[0] < 1:
            raise ValueError(f"embeddings must be (B, E) with B >= 1, got {t.shape}")
        if v.shape != t.shape or a.shape != t.shape:
            raise ValueError(
                f"modality shapes differ: text {t.shape}, visual {v.shape}, "
                f"audio {a.shape}"
            )
        for name, m in (("text", t), ("visual", v), ("audio", a)):
            if not np.isfinite(m).all():
                raise ValueError(f"{name} embeddings contain non-finite entries")
        object.__setattr__(self, "text", t)
        object.__setattr__(self, "visual", v)
        object.__setattr__(self, "audio", a)

    @property
    def batch_size(self) -> int:
        return self.text.shape[0]


@dataclass(frozen=True)
class SupervisedBatch:
    """Per-window class distributions, true labels, and IoU weights."""

    probs: np.ndarray
    labels: np.ndarray
    iou: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        iou = np.asarray(self.iou, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] < 1:
            raise ValueError(f"probs must be (B, C) with B >= 1, got {probs.shape}")
        b, c = probs.shape
        if labels.shape != (b,) or iou.shape != (b,):
            raise ValueError(
                f"labels {labels.shape} and iou {iou.shape} must both be ({b},)"
            )
        if (probs < 0).any() or not np.isfinite(probs).all():
            raise ValueError("probs must be finite and non-negative")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("each probability row must sum to 1 within 1e-6")
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError(f"labels must lie in [0, {c})")
        if iou.min() < 0 or iou.max() > 1:
            raise ValueError("iou weights must lie in [0, 1]")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "iou", iou)

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """x.y / (|x||y|); undefined (and rejected) for zero vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {x.shape} and {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(x @ y / (nx * ny))


def _normalized_rows(m: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError(f"{name} must be (B, E) with B >= 1, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    norms = np.linalg.norm(m, axis=1)
    if (norms == 0.0).any():
        raise ValueError(f"{name} row {int(np.argmin(norms))} is a zero vector")
    return m / norms[:, None], norms


def contrastive_loss(x: np.ndarray, y: np.ndarray, tau: float) -> float:
    """In-batch contrastive loss with cosine similarities.

    With s_ij = cos(x_i, y_j):

        L = -(1/B) sum_i log( exp(s_ii/tau) / sum_j exp(s_ij/tau) )

    The denominator runs over the full row including the positive, so a
    batch of one is a perfect ratio and contributes exactly 0.
    """
    loss, _, _ = contrastive_loss_grad(x, y, tau)
    return loss


def contrastive_loss_grad(
    x: np.ndarray, y: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Contrastive loss plus its gradients w.r.t. both embedding matrices."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    xn, x_norms = _normalized_rows(x, "x")
    yn, y_norms = _normalized_rows(y, "y")
    if xn.shape != yn.shape:
        raise ValueError(f"shape mismatch: x {xn.shape} vs y {yn.shape}")
    b = xn.shape[0]
    sims = xn @ yn.T
    z = sims / tau
    z_max = z.max(axis=1, keepdims=True)
    log_norm = z_max[:, 0] + np.log(np.exp(z - z_max).sum(axis=1))
    loss = float((log_norm - np.diag(z)).mean())

    # dL/ds_ij = (softmax_j(z_i) - delta_ij) / (B * tau), then chain through
    # the cosine: ds_ij/dx_i = (yn_j - s_ij * xn_i) / |x_i|.
    p = np.exp(z - log_norm[:, None])
    g = (p - np.eye(b)) / (b * tau)
    dx = (g @ yn - (g * sims).sum(axis=1)[:, None] * xn) / x_norms[:, None]
    dy = (g.T @ xn - (g * sims).sum(axis=0)[:, None] * yn) / y_norms[:, None]
    return loss, dx, dy


def cross_modal_loss(
    text: np.ndarray,
    visual: np.ndarray,
    audio: np.ndarray,
    alpha: float,
    tau: float,
) -> float:
    """(alpha/2) * [contrastive(text, visual) + contrastive(text, audio)].

    Text is always the anchor. alpha = 0 removes the term entirely.
    """
    loss, _, _, _ = cross_modal_loss_grad(text, visual, audio, alpha, tau)
    return loss


def cross_modal_loss_grad(
    text: np.ndarray,
    visual: np.ndarray,
    audio: np.ndarray,
    alpha: float,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Cross-modal loss with gradients w.r.t. all three modalities."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    loss_tv, dt_tv, dv = contrastive_loss_grad(text, visual, tau)
    loss_ta, dt_ta, da = contrastive_loss_grad(text, audio, tau)
    half = 0.5 * alpha
    loss = half * (loss_tv + loss_ta)
    return loss, half * (dt_tv + dt_ta), half * dv, half * da


def iou_weighted_ce(
    batch: SupervisedBatch, beta: float, floor: float = LOG_PROB_FLOOR
) -> float:
    """Mean cross-entropy with each row scaled by IoU^beta.

    Uses the 0^0 = 1 convention so beta = 0 is exactly the unweighted
    mean cross-entropy regardless of the IoU values.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    b = batch.batch_size
    p_true = batch.probs[np.arange(b), batch.labels]
    log_p = np.log(np.maximum(p_true, floor))
    weights = np.power(batch.iou, beta)
    return float(-(weights * log_p).mean())


def cross_entropy_from_logits(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Plain mean softmax cross-entropy and its gradient w.r.t. the logits."""
    b = np.asarray(logits).shape[0]
    return iou_weighted_ce_from_logits(logits, labels, np.ones(b), beta=0.0)


def iou_weighted_ce_from_logits(
    logits: np.ndarray,
    labels: np.ndarray,
    iou: np.ndarray,
    beta: float,
) -> tuple[float, np.ndarray]:
    """IoU-weighted cross-entropy on logits, with d(loss)/d(logits).

    The softmax is folded in so the gradient is the familiar
    (p - onehot) * IoU^beta / B per row; computing from logits keeps the
    log numerically exact for confident rows.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    iou = np.asarray(iou, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (B, C), got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,) or iou.shape != (b,):
        raise ValueError("labels and iou must both have one entry per row")
    if not np.isfinite(logits).all():
        raise ValueError("logits contain non-finite entries")
    z_max = logits.max(axis=1, keepdims=True)
    log_norm = z_max[:, 0] + np.log(np.exp(logits - z_max).sum(axis=1))
    log_p_true = logits[np.arange(b), labels] - log_norm
    weights = np.power(iou, beta)
    loss = float(-(weights * log_p_true).mean())
    probs = np.exp(logits - log_norm[:, None])
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    grad *= weights[:, None] / b
    return loss, grad


def total_loss(
    embeddings: BatchEmbeddings, batch: SupervisedBatch, config: LossConfig
) -> float:
    """Combined objective: cross-modal term plus IoU-weighted cross-entropy."""
    if embeddings.batch_size != batch.batch_size:
        raise ValueError(
            f"embedding batch {embeddings.batch_size} != supervised batch "
            f"{batch.batch_size}"
        )
    return cross_modal_loss(
        embeddings.text, embeddings.visual, embeddings.audio, config.alpha, config.tau
    ) + iou_weighted_ce(batch, config.beta)


def total_loss_grad(
    text: np.ndarray,
    visual: np.ndarray,
    audio: np.ndarray,
    logits: np.ndarray,
    labels: np.ndarray,
    iou: np.ndarray,
    config: LossConfig,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Combined objective on the trainer's differentiable surface.

    Returns (loss, d_text, d_visual, d_audio, d_logits). This is the form
    the scorer backpropagates through; the probability-space total_loss
    above is the reporting form.
    """
    cm_loss, dt, dv, da = cross_modal_loss_grad(
        text, visual, audio, config.alpha, config.tau
    )
    ce_loss, dlogits = iou_weighted_ce_from_logits(logits, labels, iou, config.beta)
    return cm_loss + ce_loss, dt, dv, da, dlogits


def gradient(
    value_and_grad, params: np.ndarray, *inputs
) -> np.ndarray:
    """Evaluate a (value, grad) function and return its analytic gradient.

    The callable must return the scalar loss and the gradient w.r.t.
    `params` as a same-shaped array. Non-finite gradient entries are
    rejected with the offending flat index.
    """
    params = np.asarray(params, dtype=np.float64)
    value, grad = value_and_grad(params, *inputs)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != params {params.shape}")
    if not np.isfinite(value):
        raise ValueError(f"loss value is non-finite: {value}")
    finite = np.isfinite(grad.ravel())
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValueError(f"gradient is non-finite at flat index {bad}")
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of one analytic-vs-finite-difference comparison."""

    passed: bool
    max_rel_err: float
    worst_index: int
    analytic_at_worst: float
    numeric_at_worst: float
    n_params: int
    h: float
    tol: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_err:.3e} at "
            f"index {self.worst_index} (analytic {self.analytic_at_worst:.6e}, "
            f"numeric {self.numeric_at_worst:.6e}; n={self.n_params}, "
            f"h={self.h:g}, tol={self.tol:g})"
        )


def finite_difference_check(
    value_and_grad,
    params: np.ndarray,
    *inputs,
    h: float = 1e-4,
    tol: float = 1e-4,
    rel_floor: float = 1e-2,
) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    Per coordinate k the numeric estimate is (f(p + h e_k) - f(p - h e_k)) / 2h
    and the relative error uses |a| + |n| with an absolute floor in the
    denominator, so coordinates whose true gradient is ~0 are compared on
    an absolute scale instead of amplifying rounding noise.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    params = np.asarray(params, dtype=np.float64)
    analytic = gradient(value_and_grad, params, *inputs)
    flat = params.ravel()
    numeric = np.zeros_like(flat)
    for k in range(flat.size):
        bumped = flat.copy()
        bumped[k] = flat[k] + h
        up, _ = value_and_grad(bumped.reshape(params.shape), *inputs)
        bumped[k] = flat[k] - h
        down, _ = value_and_grad(bumped.reshape(params.shape), *inputs)
        numeric[k] = (up - down) / (2.0 * h)
    a = analytic.ravel()
    denom = np.maximum(np.abs(a) + np.abs(numeric), rel_floor)
    rel = np.abs(a - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(
        passed=max_rel < tol,
        max_rel_err=max_rel,
        worst_index=worst,
        analytic_at_worst=float(a[worst]) if rel.size else 0.0,
        numeric_at_worst=float(numeric[worst]) if rel.size else 0.0,
        n_params=flat.size,
        h=h,
        tol=tol,
    )
