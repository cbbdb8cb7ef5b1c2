"""Evaluation: top-1/group accuracy, confusion, calibration, feature distance, landscapes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .collab import predictor_logits
from .losses import bc_loss, posthoc_adjust
from .ltdata import ClassPrior, GroupAssignment


@dataclass
class MetricsReport:
    top1: float
    acc_many: float | None
    acc_medium: float | None
    acc_few: float | None
    confusion: np.ndarray
    pred_histogram: np.ndarray
    ece: float | None = None
    ece_binned: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["pred_histogram"] = self.pred_histogram.tolist()
        return d


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray  # NaN where a bin is empty
    accuracy: np.ndarray

    @property
    def M(self) -> int:
        return self.counts.size

    def to_dict(self) -> dict:
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in a]

        return {
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "mean_confidence": clean(self.mean_confidence),
            "accuracy": clean(self.accuracy),
        }

    def to_csv(self) -> str:
        lines = ["bin,lower,upper,count,mean_confidence,accuracy"]
        for m in range(self.M):
            conf, acc = self.mean_confidence[m], self.accuracy[m]
            lines.append(
                f"{m},{self.edges[m]!r},{self.edges[m + 1]!r},{int(self.counts[m])},"
                f"{'' if np.isnan(conf) else repr(float(conf))},"
                f"{'' if np.isnan(acc) else repr(float(acc))}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class LandscapeScan:
    noise_levels: np.ndarray
    mean_loss: np.ndarray
    mean_acc: np.ndarray
    repeats: int
    seed: int

    def to_csv(self) -> str:
        lines = ["level,mean_loss,mean_acc"]
        for lv, lo, ac in zip(self.noise_levels, self.mean_loss, self.mean_acc):
            lines.append(f"{float(lv)!r},{float(lo)!r},{float(ac)!r}")
        return "\n".join(lines) + "\n"


def _check_probs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("probabilities must be (N, C) with N labels")
    if probs.shape[0] == 0:
        raise ValueError("empty input")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError("label out of range")
    return probs, labels


def evaluate(probs, labels, groups: GroupAssignment | None = None) -> MetricsReport:
    probs, labels = _check_probs(probs, labels)
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    c = probs.shape[1]
    pred = probs.argmax(axis=1)  # first maximum wins ties
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    correct = pred == labels

    def group_acc(members):
        if not members:
            return None
        mask = np.isin(labels, sorted(members))
        return float(correct[mask].mean()) if mask.any() else None

    if groups is None:
        many = medium = few = None
    else:
        many, medium, few = (group_acc(g) for g in (groups.many, groups.medium, groups.few))
    return MetricsReport(
        top1=float(np.trace(confusion) / labels.size),
        acc_many=many,
        acc_medium=medium,
        acc_few=few,
        confusion=confusion,
        pred_histogram=confusion.sum(axis=0),
    )


def ece(probs, labels, M: int = 15):
    """Per-sample ECE mean|1(correct) - confidence| plus equal-width reliability bins.

    Returns ``(ece, bins, ece_binned)`` where ``ece_binned`` is the usual
    sum_m |B_m|/N * |acc(B_m) - conf(B_m)|.
    """
    if M < 1:
        raise ValueError("need at least one bin")
    probs, labels = _check_probs(probs, labels)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    n = conf.size
    per_sample = float(np.abs(correct - conf).sum() / n)
    counts, conf_sum, acc_sum = _kernels.bin_stats(conf, correct, int(M))
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / counts, np.nan)
        acc = np.where(counts > 0, acc_sum / counts, np.nan)
    nonempty = counts > 0
    binned = float((np.abs(acc_sum[nonempty] - conf_sum[nonempty])).sum() / n)
    bins = ReliabilityBins(np.linspace(0.0, 1.0, M + 1), counts, mean_conf, acc)
    return per_sample, bins, binned


def class_feature_distance(features_m, features_n, labels, num_classes: int | None = None):
    """Per-class mean L2 distance between two experts' features; NaN for absent classes."""
    fm = np.asarray(features_m, dtype=np.float64)
    fn = np.asarray(features_n, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if fm.shape != fn.shape or fm.ndim != 2 or labels.shape != (fm.shape[0],):
        raise ValueError("feature matrices and labels must have matching shapes")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    dist = np.sqrt(((fm - fn) ** 2).sum(axis=1))
    sums, counts = _kernels.class_mean(dist, labels, num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / counts, np.nan)


def pairwise_feature_distance(features: list, labels, num_classes: int) -> dict:
    """class_feature_distance for every expert pair (m < n), keyed ``"m-n"``."""
    out = {}
    for m in range(len(features)):
        for n in range(m + 1, len(features)):
            out[f"{m}-{n}"] = class_feature_distance(features[m], features[n], labels, num_classes)
    return out


# ---------------------------------------------------------------------------
# loss / accuracy landscape
# ---------------------------------------------------------------------------


def _perturb_inplace(params: dict, layers, level: float, rng) -> None:
    for layer in layers:
        w = params[f"{layer}.weight"]
        g = rng.standard_normal(w.shape)
        gnorm = np.linalg.norm(g, axis=1, keepdims=True)
        w += level * np.linalg.norm(w, axis=1, keepdims=True) * g / gnorm
        b = params[f"{layer}.bias"]
        gb = rng.standard_normal(b.shape)
        b += level * np.linalg.norm(b) * gb / np.linalg.norm(gb)


def landscape_scan(experts, evaluate_fn, noise_levels, repeats: int = 5, seed: int = 0) -> LandscapeScan:
    """Filter-normalized Gaussian weight perturbation scan.

    ``evaluate_fn(experts) -> (loss, accuracy)`` is called on the perturbed
    experts. Only inference-path layers (encoder and cls head) are
    perturbed; every draw starts from the original weights, which are
    restored bitwise at the end.
    """
    levels = np.asarray(noise_levels, dtype=np.float64)
    if levels.ndim != 1 or levels.size == 0:
        raise ValueError("noise_levels must be a non-empty 1-D sequence")
    if np.any(levels < 0):
        raise ValueError("noise levels must be non-negative")
    if np.any(np.diff(levels) < 0):
        raise ValueError("noise levels must be ascending")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    experts = list(experts)
    originals = [{n: a.copy() for n, a in e.params.items()} for e in experts]
    layers = [e.encoder_layers + ["cls"] for e in experts]
    rng = np.random.default_rng(seed)
    base = None
    mean_loss, mean_acc = [], []
    try:
        for level in levels:
            if level == 0:
                if base is None:
                    base = evaluate_fn(experts)
                mean_loss.append(float(base[0]))
                mean_acc.append(float(base[1]))
                continue
            losses, accs = [], []
            for _ in range(repeats):
                for e, layer_list in zip(experts, layers):
                    _perturb_inplace(e.params, layer_list, float(level), rng)
                lo, ac = evaluate_fn(experts)
                losses.append(lo)
                accs.append(ac)
                _restore(experts, originals)
            mean_loss.append(float(np.mean(losses)))
            mean_acc.append(float(np.mean(accs)))
    finally:
        _restore(experts, originals)
    return LandscapeScan(levels, np.array(mean_loss), np.array(mean_acc), repeats, seed)


def _restore(experts, originals):
    for e, orig in zip(experts, originals):
        for n, a in orig.items():
            e.params[n][...] = a


def predictor_loss_acc(experts, x, labels, prior: ClassPrior, expert=None, posthoc_tau=0.0):
    """Mean BC loss of the predictor's cls logits and top-1 of its adjusted probabilities."""
    z = predictor_logits(experts, x, expert)
    probs = posthoc_adjust(z, prior, posthoc_tau)
    acc = float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))
    return float(bc_loss(z, labels, prior)), acc


def scan_predictor(experts, x, labels, prior: ClassPrior, noise_levels, repeats=5, seed=0,
                   expert=None, posthoc_tau=0.0) -> LandscapeScan:
    """landscape_scan of one expert (``expert`` index) or the logit-averaged ensemble."""
    experts = list(getattr(experts, "experts", experts))
    targets = experts if expert is None else [experts[expert]]

    def fn(_):
        return predictor_loss_acc(experts, x, labels, prior, expert, posthoc_tau)

    return landscape_scan(targets, fn, noise_levels, repeats, seed)


def report_json(report: MetricsReport, bins: ReliabilityBins | None = None, **extra) -> str:
    payload = report.to_dict()
    if bins is not None:
        payload["reliability"] = bins.to_dict()
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


__all__ = [
    "MetricsReport",
    "ReliabilityBins",
    "LandscapeScan",
    "evaluate",
    "ece",
    "class_feature_distance",
    "pairwise_feature_distance",
    "landscape_scan",
    "predictor_loss_acc",
    "scan_predictor",
    "report_json",
]
