"""Expert networks: encoder + cls/ref heads + contrastive projection.

Parameters are plain numpy arrays in a flat ``{name: array}`` dict. Linear
weights are stored ``(out, in)`` so each row is one output unit's filter.
Backprop is written out by hand.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_FORMAT = "ecl-ckpt v1"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class DegenerateEmbeddingError(ValueError):
    """Raised when an embedding with zero norm is normalized."""


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    num_classes: int
    hidden: tuple = (64, 64)
    d_prime: int = 32
    queue_size: int = 1024
    momentum: float = 0.999

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 1 or self.num_classes < 2 or not self.hidden:
            raise ValueError("invalid model configuration")
        if self.d_prime < 1 or self.queue_size < 1:
            raise ValueError("d_prime and queue_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def layer_shapes(self) -> dict:
        """Linear layer name -> (out, in). Order is the forward order."""
        shapes = {}
        prev = self.in_dim
        for i, h in enumerate(self.hidden):
            shapes[f"enc{i}"] = (h, prev)
            prev = h
        d = self.feature_dim
        shapes["cls"] = (self.num_classes, d)
        shapes["ref"] = (self.num_classes, d)
        shapes["con0"] = (d, d)
        shapes["con1"] = (self.d_prime, d)
        return shapes


def _is_twin_layer(layer: str) -> bool:
    return layer.startswith("enc") or layer.startswith("con")


@dataclass
class Expert:
    config: ModelConfig
    params: dict
    expert_id: int = 0

    @property
    def encoder_layers(self) -> list:
        return [f"enc{i}" for i in range(len(self.config.hidden))]

    def has(self, layer: str) -> bool:
        return f"{layer}.weight" in self.params


@dataclass
class MomentumTwin:
    """Gradient-free EMA copy of the encoder and contrastive head."""

    params: dict
    m: float


@dataclass
class QueueState:
    buffer: np.ndarray
    cursor: int = 0

    @property
    def size(self) -> int:
        return self.buffer.shape[0]


@dataclass
class ExpertOutputs:
    v: np.ndarray
    z_cls: np.ndarray
    z_ref: np.ndarray | None = None
    e: np.ndarray | None = None
    cache: dict = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def expert_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(k)])


def init_expert(config: ModelConfig, seed: int, k: int) -> Expert:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init from an expert-specific stream."""
    rng = np.random.default_rng(expert_seed(seed, k).spawn(2)[0])
    params = {}
    for layer, (out, fan_in) in config.layer_shapes().items():
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{layer}.weight"] = rng.uniform(-bound, bound, (out, fan_in))
        params[f"{layer}.bias"] = rng.uniform(-bound, bound, out)
    return Expert(config, params, k)


def make_twin(expert: Expert, m: float | None = None) -> MomentumTwin:
    m = expert.config.momentum if m is None else m
    shadow = {
        name: arr.copy()
        for name, arr in expert.params.items()
        if _is_twin_layer(name.split(".")[0])
    }
    return MomentumTwin(shadow, m)


def init_queue(size: int, d_prime: int, seed: int, k: int) -> QueueState:
    rng = np.random.default_rng(expert_seed(seed, k).spawn(2)[1])
    return QueueState(normalize_embed(rng.standard_normal((size, d_prime))), 0)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def normalize_embed(e):
    """L2-normalize a vector or each row of a matrix."""
    e = np.asarray(e, dtype=np.float64)
    with np.errstate(over="ignore"):
        norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateEmbeddingError("cannot normalize a zero-norm embedding")
    if np.isinf(norm).any() and np.isfinite(e).all():
        # finite rows whose squared sum overflows: rescale before normalizing
        e = e / np.abs(e).max(axis=-1, keepdims=True)
        norm = np.linalg.norm(e, axis=-1, keepdims=True)
    return e / norm


def _linear(params, layer, x):
    return x @ params[f"{layer}.weight"].T + params[f"{layer}.bias"]


def _encode(params, layers, x, cache=None):
    h = x
    for layer in layers:
        pre = _linear(params, layer, h)
        if cache is not None:
            cache[layer] = h
        h = np.maximum(pre, 0.0)
        if cache is not None:
            cache[layer + ".act"] = h
    return h


def _project(params, v, cache=None):
    pre0 = _linear(params, "con0", v)
    g = np.maximum(pre0, 0.0)
    u = _linear(params, "con1", g)
    if cache is not None:
        cache["con0"] = v
        cache["con0.act"] = g
        cache["con1"] = g
        cache["u"] = u
    return u


def _check_input(config: ModelConfig, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.in_dim:
        raise ValueError(f"expected input of shape (N, {config.in_dim}), got {x.shape}")
    return x


def forward_expert(expert: Expert, x, keep_cache: bool = False) -> ExpertOutputs:
    """Run encoder and every head present on ``expert``.

    Heads missing from the parameter dict (stripped checkpoints) yield None.
    """
    x = _check_input(expert.config, x)
    p = expert.params
    cache = {} if keep_cache else None
    v = _encode(p, expert.encoder_layers, x, cache)
    z_cls = _linear(p, "cls", v)
    z_ref = _linear(p, "ref", v) if expert.has("ref") else None
    e = normalize_embed(_project(p, v, cache)) if expert.has("con1") else None
    if cache is not None:
        cache["cls"] = cache["ref"] = v
        cache["e"] = e
    return ExpertOutputs(v, z_cls, z_ref, e, cache)


def encode(expert: Expert, x) -> np.ndarray:
    x = _check_input(expert.config, x)
    return _encode(expert.params, expert.encoder_layers, x)


def cls_logits(expert: Expert, x) -> np.ndarray:
    """Inference path: encoder + cls head only."""
    return _linear(expert.params, "cls", encode(expert, x))


def twin_keys(twin: MomentumTwin, config: ModelConfig, x) -> np.ndarray:
    x = _check_input(config, x)
    layers = [f"enc{i}" for i in range(len(config.hidden))]
    v = _encode(twin.params, layers, x)
    return normalize_embed(_project(twin.params, v))


def _linear_backward(params, grads, layer, x_in, dout):
    grads[f"{layer}.weight"] = grads.get(f"{layer}.weight", 0.0) + dout.T @ x_in
    grads[f"{layer}.bias"] = grads.get(f"{layer}.bias", 0.0) + dout.sum(axis=0)
    return dout @ params[f"{layer}.weight"]


def backward_expert(
    expert: Expert, out: ExpertOutputs, dv=None, dz_cls=None, dz_ref=None, de=None
) -> dict:
    """Gradients of sum(dv*v + dz_cls*z_cls + dz_ref*z_ref + de*e) w.r.t. every parameter.

    Parameters that receive no upstream signal get zero arrays, so the
    returned dict always covers ``expert.params``.
    """
    c = out.cache
    if c is None:
        raise ValueError("forward_expert must be called with keep_cache=True")
    p = expert.params
    grads = {}
    dv_total = np.zeros_like(out.v) if dv is None else np.array(dv, dtype=np.float64)
    if dz_cls is not None:
        dv_total += _linear_backward(p, grads, "cls", c["cls"], dz_cls)
    if dz_ref is not None:
        dv_total += _linear_backward(p, grads, "ref", c["ref"], dz_ref)
    if de is not None:
        e = c["e"]
        norm = np.linalg.norm(c["u"], axis=1, keepdims=True)
        du = (de - e * (e * de).sum(axis=1, keepdims=True)) / norm
        dg = _linear_backward(p, grads, "con1", c["con1"], du)
        dg = dg * (c["con0.act"] > 0)
        dv_total += _linear_backward(p, grads, "con0", c["con0"], dg)
    dh = dv_total
    for layer in reversed(expert.encoder_layers):
        dh = dh * (c[layer + ".act"] > 0)
        dh = _linear_backward(p, grads, layer, c[layer], dh)
    for name, arr in p.items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return grads


# ---------------------------------------------------------------------------
# momentum twin and queue
# ---------------------------------------------------------------------------


def momentum_update(twin: MomentumTwin, online: dict, m: float | None = None) -> MomentumTwin:
    """shadow <- m * shadow + (1 - m) * online, in place; online is only read."""
    m = twin.m if m is None else m
    if not 0 <= m < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for name, shadow in twin.params.items():
        src = online[name]
        if src.shape != shadow.shape:
            raise ValueError(f"shape mismatch for {name}: {src.shape} vs {shadow.shape}")
        shadow *= m
        shadow += (1.0 - m) * src
    return twin


def queue_push(queue: QueueState, embeddings) -> QueueState:
    """Write rows FIFO at the cursor with wraparound (in place)."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = emb.shape[0]
    if n > queue.size:
        raise ValueError(f"batch of {n} exceeds queue capacity {queue.size}")
    if emb.shape[1] != queue.buffer.shape[1]:
        raise ValueError("embedding dimension does not match the queue")
    if np.any(np.abs(np.linalg.norm(emb, axis=1) - 1.0) > 1e-6):
        raise ValueError("queue rows must be unit-norm")
    rows = (queue.cursor + np.arange(n)) % queue.size
    queue.buffer[rows] = emb
    queue.cursor = int((queue.cursor + n) % queue.size)
    return queue


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, experts, twins=None, queues=None, extra=None) -> None:
    """Write a deterministic zip archive of npy tensors plus ``manifest.json``."""
    cfg = experts[0].config
    tensors = {}
    for k, ex in enumerate(experts):
        for name, arr in ex.params.items():
            tensors[f"expert{k}/{name}"] = arr
    for k, tw in enumerate(twins or []):
        for name, arr in tw.params.items():
            tensors[f"twin{k}/{name}"] = arr
    for k, q in enumerate(queues or []):
        tensors[f"queue{k}/buffer"] = q.buffer
        tensors[f"queue{k}/cursor"] = np.array(q.cursor, dtype=np.int64)
    manifest = {
        "K": len(experts),
        "d": cfg.feature_dim,
        "C": cfg.num_classes,
        "d_prime": cfg.d_prime,
        "format": CKPT_FORMAT,
        "in_dim": cfg.in_dim,
        "hidden": list(cfg.hidden),
        "queue_size": cfg.queue_size,
        "momentum": twins[0].m if twins else cfg.momentum,
        "tensors": {name: list(np.shape(arr)) for name, arr in tensors.items()},
    }
    if extra:
        manifest.update(extra)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True).encode())
        for name, arr in tensors.items():
            _write_entry(zf, name + ".npy", _npy_bytes(arr))


@dataclass
class Checkpoint:
    manifest: dict
    experts: list
    twins: list
    queues: list


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CKPT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        arrays = {}
        for name in manifest["tensors"]:
            if name + ".npy" in zf.namelist():
                arrays[name] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name + ".npy")), allow_pickle=False
                )
    cfg = ModelConfig(
        in_dim=manifest["in_dim"],
        num_classes=manifest["C"],
        hidden=tuple(manifest["hidden"]),
        d_prime=manifest["d_prime"],
        queue_size=manifest["queue_size"],
        momentum=manifest["momentum"],
    )
    experts, twins, queues = [], [], []
    for k in range(manifest["K"]):
        def group(prefix):
            return {
                n.split("/", 1)[1]: a for n, a in arrays.items() if n.startswith(prefix + "/")
            }

        experts.append(Expert(cfg, group(f"expert{k}"), k))
        tw = group(f"twin{k}")
        if tw:
            twins.append(MomentumTwin(tw, manifest["momentum"]))
        if f"queue{k}/buffer" in arrays:
            cursor = int(np.asarray(arrays[f"queue{k}/cursor"]).reshape(-1)[0])
            queues.append(QueueState(arrays[f"queue{k}/buffer"], cursor))
    return Checkpoint(manifest, experts, twins, queues)


def strip_checkpoint(src, dst) -> None:
    """Copy a checkpoint keeping only what inference needs: encoders and cls heads."""
    ck = load_checkpoint(src)
    kept = []
    for ex in ck.experts:
        params = {
            n: a for n, a in ex.params.items() if n.startswith("enc") or n.startswith("cls.")
        }
        kept.append(Expert(ex.config, params, ex.expert_id))
    extra = {k: v for k, v in ck.manifest.items() if k not in _MANIFEST_CORE}
    save_checkpoint(dst, kept, extra=extra)


_MANIFEST_CORE = {
    "K", "d", "C", "d_prime", "format", "in_dim", "hidden", "queue_size", "momentum", "tensors",
}
