"""Row-wise numeric kernels with a numba path and a pure-numpy fallback.

Set ``ECL_DISABLE_NUMBA=1`` to force the numpy implementations. Both paths
are exposed under ``*_numpy`` / ``*_numba`` names so they can be compared.
"""
import os

import numpy as np

try:
    import numba as nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("ECL_DISABLE_NUMBA", "0").lower() not in (
    "1",
    "true",
    "yes",
)

# fastmath stays off: reductions must be reproducible run to run
_JIT = dict(cache=True, fastmath=False)


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def log_softmax_numpy(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def xent_rows_numpy(z, y):
    """Per-row cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax_numpy(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, grad


def kl_rows_numpy(zt, zs, tau):
    """KL(softmax(zt/tau) || softmax(zs/tau)) per row, and d/dzs."""
    lt = log_softmax_numpy(zt / tau)
    ls = log_softmax_numpy(zs / tau)
    pt = np.exp(lt)
    kl = (pt * (lt - ls)).sum(axis=1)
    grad = (np.exp(ls) - pt) / tau
    return kl, grad


def head_probs_numpy(z, floor):
    n, c = z.shape
    sigma = z.std(axis=1)
    out = np.full((n, c), 1.0 / c)
    ok = sigma >= 1e-8
    if ok.any():
        out[ok] = np.exp(log_softmax_numpy(z[ok] / sigma[ok, None]))
    out = np.clip(out, floor, 1.0 - floor)
    return out / out.sum(axis=1, keepdims=True)


def bin_stats_numpy(conf, correct, n_bins):
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    return counts, conf_sum, acc_sum


def class_mean_numpy(values, labels, n_classes):
    counts = np.bincount(labels, minlength=n_classes).astype(np.int64)
    sums = np.bincount(labels, weights=values, minlength=n_classes)
    return sums, counts


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @nb.njit(**_JIT)
    def _row_log_softmax(row, out):
        m = row[0]
        for j in range(1, row.shape[0]):
            if row[j] > m:
                m = row[j]
        s = 0.0
        for j in range(row.shape[0]):
            s += np.exp(row[j] - m)
        lse = np.log(s)
        for j in range(row.shape[0]):
            out[j] = row[j] - m - lse

    @nb.njit(**_JIT)
    def xent_rows_numba(z, y):
        n, c = z.shape
        loss = np.empty(n)
        grad = np.empty((n, c))
        buf = np.empty(c)
        for i in range(n):
            _row_log_softmax(z[i], buf)
            loss[i] = -buf[y[i]]
            for j in range(c):
                grad[i, j] = np.exp(buf[j])
            grad[i, y[i]] -= 1.0
        return loss, grad

    @nb.njit(**_JIT)
    def kl_rows_numba(zt, zs, tau):
        n, c = zt.shape
        kl = np.empty(n)
        grad = np.empty((n, c))
        lt = np.empty(c)
        ls = np.empty(c)
        for i in range(n):
            _row_log_softmax(zt[i] / tau, lt)
            _row_log_softmax(zs[i] / tau, ls)
            acc = 0.0
            for j in range(c):
                pt = np.exp(lt[j])
                acc += pt * (lt[j] - ls[j])
                grad[i, j] = (np.exp(ls[j]) - pt) / tau
            kl[i] = acc
        return kl, grad

    @nb.njit(**_JIT)
    def head_probs_numba(z, floor):
        n, c = z.shape
        out = np.empty((n, c))
        buf = np.empty(c)
        for i in range(n):
            mu = 0.0
            for j in range(c):
                mu += z[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                var += (z[i, j] - mu) ** 2
            sigma = np.sqrt(var / c)
            if sigma < 1e-8:
                for j in range(c):
                    buf[j] = 1.0 / c
            else:
                _row_log_softmax(z[i] / sigma, buf)
                for j in range(c):
                    buf[j] = np.exp(buf[j])
            s = 0.0
            for j in range(c):
                v = min(max(buf[j], floor), 1.0 - floor)
                buf[j] = v
                s += v
            for j in range(c):
                out[i, j] = buf[j] / s
        return out

    @nb.njit(**_JIT)
    def bin_stats_numba(conf, correct, n_bins):
        counts = np.zeros(n_bins, dtype=np.int64)
        conf_sum = np.zeros(n_bins)
        acc_sum = np.zeros(n_bins)
        for i in range(conf.shape[0]):
            b = int(np.ceil(conf[i] * n_bins)) - 1
            if b < 0:
                b = 0
            elif b > n_bins - 1:
                b = n_bins - 1
            counts[b] += 1
            conf_sum[b] += conf[i]
            acc_sum[b] += correct[i]
        return counts, conf_sum, acc_sum

    @nb.njit(**_JIT)
    def class_mean_numba(values, labels, n_classes):
        counts = np.zeros(n_classes, dtype=np.int64)
        sums = np.zeros(n_classes)
        for i in range(values.shape[0]):
            counts[labels[i]] += 1
            sums[labels[i]] += values[i]
        return sums, counts


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_numba"]
    return globals()[name + "_numpy"]


xent_rows = _pick("xent_rows")
kl_rows = _pick("kl_rows")
head_probs_rows = _pick("head_probs")
bin_stats = _pick("bin_stats")
class_mean = _pick("class_mean")

BACKEND = "numba" if USE_NUMBA else "numpy"
