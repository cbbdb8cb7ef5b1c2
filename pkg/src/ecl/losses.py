"""Losses and logit adjustments for balanced collaborative learning.

Every loss comes as a value function plus a ``*_grad`` companion returning
``(value, gradient)``. Inputs that act as stop-gradient (teacher
distributions, contrastive keys, queue rows, re-weighting factors) never
receive a gradient. Batched losses average over rows.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .ltdata import ClassPrior


@dataclass(frozen=True)
class KDConfig:
    tau_kd: float = 1.0
    alpha: float = 0.6
    beta: float = 1.0
    tau_con: float = 1.0
    prob_floor: float = 1e-6

    def __post_init__(self):
        if not self.tau_kd > 0 or not self.tau_con > 0:
            raise ValueError("temperatures must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0 < self.prob_floor < 0.5:
            raise ValueError("prob_floor must lie in (0, 0.5)")


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    kd_logit: float
    kd_feature: float
    con: float
    total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def as_row(self) -> list:
        return [self.sup, self.kd_logit, self.kd_feature, self.con, self.total]


def _as_batch(z, y):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    y2 = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if y2.shape[0] != z2.shape[0]:
        raise ValueError("logits and labels disagree on batch size")
    if np.any(y2 < 0) or np.any(y2 >= z2.shape[1]):
        raise ValueError(f"label out of range [0, {z2.shape[1]})")
    return z2, y2, single


# ---------------------------------------------------------------------------
# cross-entropy and prior compensation
# ---------------------------------------------------------------------------


def ce_loss_grad(z, y):
    z2, y2, single = _as_batch(z, y)
    loss, grad = _kernels.xent_rows(z2, y2)
    n = z2.shape[0]
    grad /= n
    return loss.sum() / n, grad[0] if single else grad


def ce_loss(z, y) -> float:
    return ce_loss_grad(z, y)[0]


def _as_prior(prior) -> ClassPrior:
    return prior if isinstance(prior, ClassPrior) else ClassPrior(*prior)


def _bias(prior: ClassPrior, tau: float, num_classes: int) -> np.ndarray:
    prior = _as_prior(prior)
    if prior.num_classes != num_classes:
        raise ValueError("prior length does not match the number of classes")
    return tau * prior.log_gap


def bc_adjust(z, prior: ClassPrior):
    """Training-time shift z + tau_bc * (log p_s - log p_t)."""
    z = np.asarray(z, dtype=np.float64)
    prior = _as_prior(prior)
    return z + _bias(prior, prior.tau_bc, z.shape[-1])


def bc_loss_grad(z, y, prior: ClassPrior):
    return ce_loss_grad(bc_adjust(z, prior), y)


def bc_loss(z, y, prior: ClassPrior) -> float:
    return bc_loss_grad(z, y, prior)[0]


def softmax(z):
    return np.exp(_kernels.log_softmax_numpy(np.asarray(z, dtype=np.float64)))


def posthoc_adjust(z, prior: ClassPrior, tau: float):
    """softmax(z - tau * (log p_s - log p_t)) along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    return softmax(z - _bias(prior, tau, z.shape[-1]))


# ---------------------------------------------------------------------------
# balanced knowledge transfer
# ---------------------------------------------------------------------------


def head_probs(z, prob_floor: float = 1e-6):
    """Softmax of z / std(z) per row, uniform for constant rows, then clamped."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least 2 classes")
    out = _kernels.head_probs_rows(np.atleast_2d(z), float(prob_floor))
    return out[0] if z.ndim == 1 else out


def bkt_weight(p_ref, p_cls, y, floor: float = 1e-6):
    """log p_cls[y] / log p_ref[y]; large when the cls head trails the ref head.

    Returned as a plain array, so it is a constant to any downstream gradient.
    """
    p_ref = np.asarray(p_ref, dtype=np.float64)
    p_cls = np.asarray(p_cls, dtype=np.float64)
    if p_ref.shape != p_cls.shape:
        raise ValueError("p_ref and p_cls shapes differ")
    pr, yy, single = _as_batch(p_ref, y)
    pc = np.atleast_2d(p_cls)
    rows = np.arange(pr.shape[0])
    a = np.clip(pc[rows, yy], floor, 1.0 - floor)
    b = np.clip(pr[rows, yy], floor, 1.0 - floor)
    w = np.log(a) / np.log(b)
    return float(w[0]) if single else w


# ---------------------------------------------------------------------------
# online distillation
# ---------------------------------------------------------------------------


def _pairwise_kl_grad(stack, tau, weights, teacher=None):
    """Mean weighted tau^2 KL over ordered expert pairs (teacher k, student q).

    ``weights`` is None, shape (N,), or (K, N) indexed by the student.
    ``teacher`` defaults to ``stack``; it only enters as a constant.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError("expected a (K, N, D) stack")
    teacher = stack if teacher is None else np.asarray(teacher, dtype=np.float64)
    if teacher.shape != stack.shape:
        raise ValueError("teacher and student stacks differ in shape")
    k_count, n, _ = stack.shape
    if k_count < 2:
        raise ValueError("need at least 2 experts to distill")
    if weights is None:
        w = np.ones((k_count, n))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = np.broadcast_to(w, (k_count, n)) if w.ndim == 1 else w
        if w.shape != (k_count, n):
            raise ValueError("weights must have shape (N,) or (K, N)")
    scale = tau * tau / (n * k_count * (k_count - 1))
    total = 0.0
    grad = np.zeros_like(stack)
    for k in range(k_count):
        for q in range(k_count):
            if q == k:
                continue
            kl, g = _kernels.kl_rows(teacher[k], stack[q], float(tau))
            total += float((w[q] * kl).sum())
            grad[q] += g * w[q][:, None]
    return total * scale, grad * scale


def kd_logit_loss_grad(z_cls, weights, tau_kd: float = 1.0, teacher=None):
    """Re-weighted mutual KD over cls logits of shape (K, N, C).

    The gradient is w.r.t. the student side only; pass ``teacher`` to feed
    different (detached) values into the teacher side.
    """
    if weights is not None and np.any(np.asarray(weights) <= 0):
        raise ValueError("distillation weights must be positive")
    return _pairwise_kl_grad(z_cls, tau_kd, weights, teacher)


def kd_logit_loss(z_cls, weights, tau_kd: float = 1.0, teacher=None) -> float:
    return kd_logit_loss_grad(z_cls, weights, tau_kd, teacher)[0]


def kd_feature_loss_grad(features, tau_kd: float = 1.0, weights=None, teacher=None):
    """Mutual KD between softmax-normalized features of shape (K, N, d)."""
    if isinstance(features, (list, tuple)):
        dims = {np.shape(f)[-1] for f in features}
        if len(dims) > 1:
            raise ValueError("feature dimensions differ across experts")
    return _pairwise_kl_grad(features, tau_kd, weights, teacher)


def kd_feature_loss(features, tau_kd: float = 1.0, weights=None, teacher=None) -> float:
    return kd_feature_loss_grad(features, tau_kd, weights, teacher)[0]


# ---------------------------------------------------------------------------
# contrastive proxy task
# ---------------------------------------------------------------------------


def _check_unit(name, x):
    if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} must be unit-norm")


def _info_nce(q2, k2, buf, tau_con):
    n = q2.shape[0]
    logits = np.empty((n, buf.shape[0] + 1))
    logits[:, 0] = (q2 * k2).sum(axis=1)
    logits[:, 1:] = q2 @ buf.T
    logits /= tau_con
    loss, dlogits = _kernels.xent_rows(logits, np.zeros(n, dtype=np.int64))
    dlogits /= n * tau_con
    grad = dlogits[:, :1] * k2 + dlogits[:, 1:] @ buf
    return loss.sum() / n, grad


def info_nce_loss_grad(e_query, e_key, queue, tau_con: float = 1.0):
    """InfoNCE with the key as positive and queue rows as negatives.

    ``queue`` may be a QueueState or a (Q, d') matrix. Gradient is w.r.t.
    the query only.
    """
    buf = np.asarray(getattr(queue, "buffer", queue), dtype=np.float64)
    q = np.asarray(e_query, dtype=np.float64)
    k = np.asarray(e_key, dtype=np.float64)
    single = q.ndim == 1
    q2, k2 = np.atleast_2d(q), np.atleast_2d(k)
    if q2.shape != k2.shape or buf.ndim != 2 or buf.shape[1] != q2.shape[1]:
        raise ValueError("query, key and queue dimensions disagree")
    _check_unit("query", q2)
    _check_unit("key", k2)
    _check_unit("queue rows", buf)
    loss, grad = _info_nce(q2, k2, buf, tau_con)
    return loss, grad[0] if single else grad


def info_nce_loss(e_query, e_key, queue, tau_con: float = 1.0) -> float:
    return info_nce_loss_grad(e_query, e_key, queue, tau_con)[0]


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


def sup_loss_grad(outputs, labels, prior: ClassPrior):
    """Mean over experts of (BC on ref head + BC on cls head).

    ``outputs`` is a sequence of objects with ``z_ref`` and ``z_cls``.
    Returns (value, [(dz_ref, dz_cls) per expert]).
    """
    k_count = len(outputs)
    if k_count < 1:
        raise ValueError("need at least one expert")
    total = 0.0
    grads = []
    for out in outputs:
        l_ref, g_ref = bc_loss_grad(out.z_ref, labels, prior)
        l_cls, g_cls = bc_loss_grad(out.z_cls, labels, prior)
        total += l_ref + l_cls
        grads.append((g_ref / k_count, g_cls / k_count))
    return total / k_count, grads


def sup_loss(outputs, labels, prior: ClassPrior) -> float:
    return sup_loss_grad(outputs, labels, prior)[0]


def total_loss(sup, kd_logit, kd_feature, con, config: KDConfig) -> LossBreakdown:
    total = sup + config.alpha * (kd_logit + kd_feature) + config.beta * con
    return LossBreakdown(float(sup), float(kd_logit), float(kd_feature), float(con), float(total))
