"""Frame MLP encoder with mean pooling, a linear region head, and its backward pass.

Per frame: ``e_t = relu(relu(x_t W1 + b1) W2 + b2)``; per utterance the
pooled embedding is the mean of its frame embeddings and
``logits = e W_head + b_head``.

Utterances in a batch are processed together by stacking their frames into
one (sum T, F) matrix; pooling and its gradient are segment means over that
stack, so gradient accumulation order is fixed by utterance order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2", "head_W", "head_b")
CHECKPOINT_MAGIC = b"SLVM"
CHECKPOINT_VERSION = 1
NORM_EPS = 1e-12


class EncoderError(ValueError):
    pass


@dataclass
class EncoderParams:
    W1: np.ndarray  # (F, H)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    head_W: np.ndarray  # (H, R)
    head_b: np.ndarray  # (R,)
    version: int = field(default=0, compare=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.head_W.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.arrays().items()}, version=self.version)

    def touch(self) -> None:
        """Mark the weights as changed so caches from earlier forwards are rejected."""
        self.version += 1


def init_params(feature_dim: int, hidden_dim: int, n_regions: int, seed: int,
                dtype=np.float64) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng([seed, 0x5EED])

    def glorot(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    f, h, r = feature_dim, hidden_dim, n_regions
    return EncoderParams(
        W1=glorot(f, h), b1=np.zeros(h, dtype),
        W2=glorot(h, h), b2=np.zeros(h, dtype),
        head_W=glorot(h, r), head_b=np.zeros(r, dtype),
    )


@dataclass
class PooledEmbedding:
    e: np.ndarray
    normalized_e: np.ndarray | None  # None when every unit is dead
    n_frames: int


@dataclass
class ForwardCache:
    params: EncoderParams
    version: int
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    frame_emb: np.ndarray
    lengths: np.ndarray
    starts: np.ndarray
    pooled: np.ndarray


def forward_batch(params: EncoderParams, frames: Sequence[np.ndarray]):
    """Encode a list of (T_i, F) frame matrices.

    Returns ``(frame_embeddings, pooled, logits, cache)`` with frame
    embeddings stacked as (sum T_i, H), pooled (m, H) and logits (m, R).
    """
    f, _, _ = params.dims
    dtype = params.W1.dtype
    lengths = np.array([len(x) for x in frames], dtype=np.int64)
    if len(frames) == 0:
        raise EncoderError("empty batch")
    if np.any(lengths < 1):
        raise EncoderError("utterance with zero frames")
    for x in frames:
        if x.ndim != 2 or x.shape[1] != f:
            raise EncoderError(f"dimension mismatch: expected F={f}, got shape {x.shape}")
    x = np.concatenate([np.asarray(v, dtype=dtype) for v in frames], axis=0)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])

    a1 = x @ params.W1 + params.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params.W2 + params.b2
    frame_emb = np.maximum(a2, 0.0)
    pooled = np.add.reduceat(frame_emb, starts, axis=0) / lengths[:, None].astype(dtype)
    logits = pooled @ params.head_W + params.head_b
    cache = ForwardCache(params, params.version, x, a1, h1, a2, frame_emb, lengths, starts, pooled)
    return frame_emb, pooled, logits, cache


def forward(params: EncoderParams, frames: np.ndarray):
    """Single-utterance forward: ``(frame_embeddings, PooledEmbedding, logits, cache)``."""
    frame_emb, pooled, logits, cache = forward_batch(params, [frames])
    e = pooled[0]
    unit = l2_normalize(e) if np.linalg.norm(e) > NORM_EPS else None
    return frame_emb, PooledEmbedding(e, unit, len(frames)), logits[0], cache


def backward(cache: ForwardCache, grad_pooled: np.ndarray | None,
             grad_logits: np.ndarray | None) -> dict[str, np.ndarray]:
    """Gradients of every parameter given upstream gradients on pooled embeddings and logits.

    Either upstream may be None (treated as zero). Accepts 1-D inputs for a
    single-utterance cache.
    """
    params = cache.params
    if params.version != cache.version:
        raise EncoderError("stale cache: parameters changed since forward")
    m = len(cache.lengths)
    _, h, r = params.dims
    dtype = cache.pooled.dtype
    g_pool = np.zeros((m, h), dtype) if grad_pooled is None else np.asarray(grad_pooled, dtype).reshape(m, h)
    g_log = np.zeros((m, r), dtype) if grad_logits is None else np.asarray(grad_logits, dtype).reshape(m, r)

    grads = {
        "head_W": cache.pooled.T @ g_log,
        "head_b": g_log.sum(axis=0),
    }
    g_e = g_pool + g_log @ params.head_W.T
    g_frame = np.repeat(g_e / cache.lengths[:, None].astype(dtype), cache.lengths, axis=0)
    g_a2 = g_frame * (cache.a2 > 0)
    grads["W2"] = cache.h1.T @ g_a2
    grads["b2"] = g_a2.sum(axis=0)
    g_a1 = (g_a2 @ params.W2.T) * (cache.a1 > 0)
    grads["W1"] = cache.x.T @ g_a1
    grads["b1"] = g_a1.sum(axis=0)
    return {name: grads[name] for name in PARAM_NAMES}


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of one logit vector; returns (loss, d loss / d logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise EncoderError("non-finite logits")
    if not 0 <= label < len(logits):
        raise EncoderError(f"label {label} out of range for {len(logits)} classes")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return float(loss), grad


def cross_entropy_batch(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows, with the matching (m, R) gradient."""
    if not np.all(np.isfinite(logits)):
        raise EncoderError("non-finite logits")
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    losses = log_z - shifted[np.arange(m), labels]
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(m), labels] -= 1.0
    return float(losses.mean()), grad / m


def l2_normalize(e: np.ndarray) -> np.ndarray:
    """Scale rows (or a single vector) to unit L2 norm."""
    e = np.asarray(e)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise EncoderError("degenerate embedding: norm too close to zero")
    return e / norm


def l2_normalize_jacobian(e: np.ndarray) -> np.ndarray:
    """d(e/|e|)/de = I/|e| - e e^T/|e|^3 for a single vector."""
    e = np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(e)
    if norm <= NORM_EPS:
        raise EncoderError("degenerate embedding: norm too close to zero")
    return np.eye(len(e)) / norm - np.outer(e, e) / norm**3


def l2_normalize_backward(e: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pull a gradient on normalized rows back to the raw rows (Jacobian is symmetric)."""
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise EncoderError("degenerate embedding: norm too close to zero")
    u = e / norm
    return (grad_out - u * np.sum(u * grad_out, axis=-1, keepdims=True)) / norm


def predict(params: EncoderParams, frames: Sequence[np.ndarray], batch_size: int = 256):
    """Pooled embeddings and logits for many utterances, in input order."""
    pooled, logits = [], []
    for i in range(0, len(frames), batch_size):
        _, p, lg, _ = forward_batch(params, frames[i:i + batch_size])
        pooled.append(p)
        logits.append(lg)
    return np.concatenate(pooled), np.concatenate(logits)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: EncoderParams, opt_state=None) -> None:
    """Write weights, optimizer moments and step counter as little-endian float32.

    ``opt_state`` needs ``m``/``v`` dicts keyed by parameter name and a
    ``step`` attribute; missing state is written as zeros.
    """
    f, h, r = params.dims
    arrays = params.arrays()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IIII", CHECKPOINT_VERSION, f, h, r)]
    for name in PARAM_NAMES:
        parts.append(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    for moment in ("m", "v"):
        for name in PARAM_NAMES:
            if opt_state is None:
                buf = np.zeros(arrays[name].shape, dtype="<f4")
            else:
                buf = np.ascontiguousarray(getattr(opt_state, moment)[name], dtype="<f4")
            parts.append(buf.tobytes())
    parts.append(struct.pack("<Q", 0 if opt_state is None else opt_state.step))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, dtype=np.float64):
    """Returns ``(params, m, v, step)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise EncoderError(f"not a checkpoint: {path}")
    version, f, h, r = struct.unpack("<IIII", raw[4:20])
    if version != CHECKPOINT_VERSION:
        raise EncoderError(f"unsupported checkpoint version {version}")
    shapes = {"W1": (f, h), "b1": (h,), "W2": (h, h), "b2": (h,), "head_W": (h, r), "head_b": (r,)}
    offset = 20

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).astype(dtype)
        offset += 4 * n
        return arr

    params = EncoderParams(**{name: take(shapes[name]) for name in PARAM_NAMES})
    m = {name: take(shapes[name]) for name in PARAM_NAMES}
    v = {name: take(shapes[name]) for name in PARAM_NAMES}
    (step,) = struct.unpack("<Q", raw[offset:offset + 8])
    if offset + 8 != len(raw):
        raise EncoderError(f"trailing bytes in checkpoint {path}")
    return params, m, v, step
