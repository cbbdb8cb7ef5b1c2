"""Multi-expert collaborative training loop and inference."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import expertnet as xn
from .losses import (
    KDConfig,
    LossBreakdown,
    bkt_weight,
    head_probs,
    info_nce_loss_grad,
    kd_feature_loss_grad,
    kd_logit_loss_grad,
    posthoc_adjust,
    sup_loss_grad,
    total_loss,
)
from .ltdata import ClassPrior, LTDataset, two_view_batch

log = logging.getLogger(__name__)

# stream tags kept far from expert indices so seeds never collide
_SHUFFLE_TAG = 1 << 20
_VIEW_TAG = (1 << 20) + 1


class NumericalAbort(FloatingPointError):
    """Non-finite objective; training stops instead of skipping the step."""


@dataclass(frozen=True)
class TrainConfig:
    prior: ClassPrior
    K: int = 3
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.05
    optimizer: str = "momentum"  # "sgd" or "momentum"
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    kd: KDConfig = field(default_factory=KDConfig)
    seed: int = 0
    jitter_sigma: float = 0.1
    bkt_scope: str = "student"  # or "mean-over-experts"
    kd_feature_weighted: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.bkt_scope not in ("student", "mean-over-experts"):
            raise ValueError(f"unknown bkt_scope {self.bkt_scope!r}")
        if self.weight_decay < 0 or self.jitter_sigma < 0:
            raise ValueError("weight_decay and jitter_sigma must be >= 0")


@dataclass
class TrainState:
    model: xn.ModelConfig
    experts: list
    twins: list
    queues: list
    velocity: list
    step: int = 0
    loss_history: list = field(default_factory=list)
    epoch_history: list = field(default_factory=list)
    epochs_done: int = 0


def init_state(model: xn.ModelConfig, config: TrainConfig) -> TrainState:
    experts = [xn.init_expert(model, config.seed, k) for k in range(config.K)]
    twins = [xn.make_twin(e) for e in experts]
    queues = [
        xn.init_queue(model.queue_size, model.d_prime, config.seed, k) for k in range(config.K)
    ]
    velocity = [{} for _ in range(config.K)]
    return TrainState(model, experts, twins, queues, velocity)


def sgd_step(params: dict, grads: dict, velocity: dict, config: TrainConfig) -> None:
    """SGD with optional heavy-ball momentum and L2 weight decay, in place."""
    lr = config.learning_rate
    for name, p in params.items():
        g = grads[name]
        if config.weight_decay:
            g = g + config.weight_decay * p
        if config.optimizer == "momentum":
            buf = velocity.get(name)
            if buf is None:
                buf = velocity[name] = g.copy()
            else:
                buf *= config.sgd_momentum
                buf += g
            g = buf
        p -= lr * g


def _bkt_weights(outs, labels, config: TrainConfig) -> np.ndarray:
    floor = config.kd.prob_floor
    w = np.stack(
        [
            bkt_weight(head_probs(o.z_ref, floor), head_probs(o.z_cls, floor), labels, floor)
            for o in outs
        ]
    )
    if config.bkt_scope == "mean-over-experts":
        w = np.broadcast_to(w.mean(axis=0), w.shape)
    return w


def train_step(state: TrainState, batch, config: TrainConfig):
    """One optimizer step on all experts. Mutates and returns ``state``."""
    kd = config.kd
    k_count = len(state.experts)
    labels = batch.labels
    with np.errstate(over="ignore", invalid="ignore"):
        outs = [xn.forward_expert(e, batch.view_a, keep_cache=True) for e in state.experts]
    for k, o in enumerate(outs):
        if not (np.isfinite(o.z_cls).all() and np.isfinite(o.z_ref).all() and np.isfinite(o.e).all()):
            raise NumericalAbort(f"non-finite activations in expert {k} at step {state.step}")

    sup, sup_grads = sup_loss_grad(outs, labels, config.prior)

    kd_logit = kd_feature = 0.0
    g_logit = g_feat = None
    if k_count >= 2:
        w = _bkt_weights(outs, labels, config)
        kd_logit, g_logit = kd_logit_loss_grad(
            np.stack([o.z_cls for o in outs]), w, kd.tau_kd
        )
        kd_feature, g_feat = kd_feature_loss_grad(
            np.stack([o.v for o in outs]), kd.tau_kd, w if config.kd_feature_weighted else None
        )

    con = 0.0
    keys, g_query = [], []
    for k, out in enumerate(outs):
        key = xn.twin_keys(state.twins[k], state.model, batch.view_b)
        l_con, g = info_nce_loss_grad(out.e, key, state.queues[k], kd.tau_con)
        con += l_con
        keys.append(key)
        g_query.append(g)

    breakdown = total_loss(sup, kd_logit, kd_feature, con, kd)
    if not math.isfinite(breakdown.total):
        raise NumericalAbort(f"non-finite loss at step {state.step}: {breakdown}")

    use_kd = kd.alpha > 0 and k_count >= 2
    use_con = kd.beta > 0
    for k, (expert, out) in enumerate(zip(state.experts, outs)):
        dz_ref, dz_cls = sup_grads[k]
        dv = de = None
        if use_kd:
            dz_cls = dz_cls + kd.alpha * g_logit[k]
            dv = kd.alpha * g_feat[k]
        if use_con:
            de = kd.beta * g_query[k]
        grads = xn.backward_expert(expert, out, dv=dv, dz_cls=dz_cls, dz_ref=dz_ref, de=de)
        sgd_step(expert.params, grads, state.velocity[k], config)

    for k, expert in enumerate(state.experts):
        xn.momentum_update(state.twins[k], expert.params)
        xn.queue_push(state.queues[k], keys[k])

    state.step += 1
    state.loss_history.append(breakdown)
    return state, breakdown


def _mean_breakdown(rows, kd: KDConfig) -> LossBreakdown:
    arr = np.array([r.as_row() for r in rows])
    sup, kd_logit, kd_feature, con = arr[:, :4].mean(axis=0)
    return total_loss(sup, kd_logit, kd_feature, con, kd)


def model_config_for(dataset: LTDataset, **kwargs) -> xn.ModelConfig:
    return xn.ModelConfig(in_dim=dataset.feature_dim, num_classes=dataset.num_classes, **kwargs)


def fit(dataset: LTDataset, config: TrainConfig, model: xn.ModelConfig | None = None,
        state: TrainState | None = None) -> TrainState:
    """Seeded epoch loop over ``train_step``; records per-epoch mean breakdowns."""
    n = dataset.x_train.shape[0]
    if n == 0:
        raise ValueError("empty train split")
    if model is None:
        model = model_config_for(dataset)
    if config.batch_size > model.queue_size:
        raise ValueError("batch_size must not exceed the queue size")
    if state is None:
        state = init_state(model, config)
    shuffle_rng = np.random.default_rng([config.seed, _SHUFFLE_TAG])
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        rows = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            batch = two_view_batch(
                dataset, idx, config.jitter_sigma, [config.seed, _VIEW_TAG, epoch, b]
            )
            _, bd = train_step(state, batch, config)
            rows.append(bd)
        mean = _mean_breakdown(rows, config.kd)
        state.epoch_history.append(mean)
        state.epochs_done += 1
        log.debug("epoch %d %s", epoch, mean)
    return state


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _experts(state) -> list:
    return state.experts if hasattr(state, "experts") else list(state)


def predict_single(state, expert_index: int, x, prior: ClassPrior, posthoc_tau: float = 0.0):
    experts = _experts(state)
    if not 0 <= expert_index < len(experts):
        raise IndexError(f"expert index {expert_index} out of range (K={len(experts)})")
    return posthoc_adjust(xn.cls_logits(experts[expert_index], x), prior, posthoc_tau)


def ensemble_logits(state, x) -> np.ndarray:
    experts = _experts(state)
    if not experts:
        raise ValueError("no experts")
    stack = np.stack([xn.cls_logits(e, x) for e in experts])
    return stack.sum(axis=0) / len(experts)


def predict_ensemble(state, x, prior: ClassPrior, posthoc_tau: float = 0.0):
    """Average cls logits over experts, then apply the post-hoc adjustment."""
    return posthoc_adjust(ensemble_logits(state, x), prior, posthoc_tau)


def predictor_logits(state, x, expert=None) -> np.ndarray:
    """Logits of one expert (``expert`` index) or of the ensemble (``None``)."""
    if expert is None:
        return ensemble_logits(state, x)
    experts = _experts(state)
    if not 0 <= expert < len(experts):
        raise IndexError(f"expert index {expert} out of range (K={len(experts)})")
    return xn.cls_logits(experts[expert], x)


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    """Copy of ``config`` with TrainConfig or KDConfig fields replaced."""
    kd_fields = {"tau_kd", "alpha", "beta", "tau_con", "prob_floor"}
    kd_kw = {k: kwargs.pop(k) for k in list(kwargs) if k in kd_fields}
    if kd_kw:
        kwargs["kd"] = replace(config.kd, **kd_kw)
    return replace(config, **kwargs)

