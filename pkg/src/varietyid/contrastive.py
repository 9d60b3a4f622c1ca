"""In-batch mining and the supervised contrastive (SC), triplet margin (TM) and
multi-similarity (MS) objectives, each returning its value and the gradient
with respect to the batch embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .encoder import NORM_EPS, l2_normalize, l2_normalize_backward


class LossKind(str, Enum):
    SC = "sc"
    TM = "tm"
    MS = "ms"


@dataclass(frozen=True)
class ContrastiveParams:
    tau: float = 0.1
    margin: float = 0.05
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0
    epsilon: float = 0.1
    similarity: str = "cosine"  # MS similarity: "cosine" or "dot"
    supcon_denominator: str = "negatives_only"  # or "all"

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.margin >= 0:
            raise ValueError("margin must be >= 0")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be > 0")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"similarity must be 'cosine' or 'dot', got {self.similarity!r}")
        if self.supcon_denominator not in ("negatives_only", "all"):
            raise ValueError(f"supcon_denominator must be 'negatives_only' or 'all', got {self.supcon_denominator!r}")


@dataclass
class MinedPairs:
    labels: np.ndarray
    positives: list[np.ndarray]
    negatives: list[np.ndarray]
    triplets: np.ndarray  # (K, 3) rows of (anchor, positive, negative)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    n_active: int


def mine(labels: Sequence) -> MinedPairs:
    """Every same-label pair is a positive, every cross-label pair a negative,
    and every (anchor, positive, negative) combination a triplet."""
    labels = np.asarray(labels)
    m = len(labels)
    idx = np.arange(m)
    positives, negatives, triplets = [], [], []
    for i in range(m):
        same = labels == labels[i]
        pos = idx[same & (idx != i)]
        neg = idx[~same]
        positives.append(pos)
        negatives.append(neg)
        if len(pos) and len(neg):
            pp, nn = np.meshgrid(pos, neg, indexing="ij")
            triplets.append(np.stack([np.full(pp.size, i), pp.ravel(), nn.ravel()], axis=1))
    trip = np.concatenate(triplets) if triplets else np.zeros((0, 3), dtype=np.int64)
    return MinedPairs(labels, positives, negatives, trip.astype(np.int64))


def _check_finite(z: np.ndarray) -> None:
    if not np.all(np.isfinite(z)):
        raise ValueError("NaN or inf in embeddings")


def _logsumexp(x: np.ndarray) -> tuple[float, np.ndarray]:
    """log(sum(exp(x))) and softmax(x)."""
    mx = x.max()
    w = np.exp(x - mx)
    s = w.sum()
    return mx + math.log(s), w / s


def sc_loss(z: np.ndarray, pairs: MinedPairs, params: ContrastiveParams = ContrastiveParams()) -> LossOutput:
    """Supervised contrastive loss summed over anchors.

    With the default ``negatives_only`` denominator each anchor contributes
    ``logsumexp_n(z_i.z_n/tau) - mean_p(z_i.z_p/tau)``, which can be
    negative. ``all`` puts every other sample in the denominator.
    Anchors without positives (or, for ``negatives_only``, without
    negatives) are skipped.
    """
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    if m < 2:
        raise ValueError("sc_loss needs at least 2 embeddings")
    _check_finite(z)
    tau = params.tau
    sim = z @ z.T / tau
    coeff = np.zeros((m, m))
    value = 0.0
    n_active = 0
    for i in range(m):
        pos, neg = pairs.positives[i], pairs.negatives[i]
        if len(pos) == 0:
            continue
        if params.supcon_denominator == "all":
            denom = np.concatenate([pos, neg])
            denom.sort()
        else:
            if len(neg) == 0:
                continue
            denom = neg
        lse, soft = _logsumexp(sim[i, denom])
        value += lse - sim[i, pos].mean()
        coeff[i, denom] += soft / tau
        coeff[i, pos] -= 1.0 / (tau * len(pos))
        n_active += 1
    grad = coeff @ z + coeff.T @ z
    return LossOutput(float(value), grad, n_active)


def tm_loss(z: np.ndarray, pairs: MinedPairs, params: ContrastiveParams = ContrastiveParams()) -> LossOutput:
    """Mean over all mined triplets of max(0, |z_a - z_p| - |z_a - z_n| + margin)."""
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    grad = np.zeros_like(z)
    trip = pairs.triplets
    k = len(trip)
    if k == 0:
        return LossOutput(0.0, grad, 0)
    a, p, n = trip[:, 0], trip[:, 1], trip[:, 2]
    diff_ap = z[a] - z[p]
    diff_an = z[a] - z[n]
    d_ap = np.sqrt(np.sum(diff_ap**2, axis=1))
    d_an = np.sqrt(np.sum(diff_an**2, axis=1))
    hinge = d_ap - d_an + params.margin
    active = hinge > 0
    value = float(hinge[active].sum() / k)

    # Subgradient 0 at the kink and at zero distance.
    with np.errstate(invalid="ignore", divide="ignore"):
        u_ap = np.where(d_ap[:, None] > 0, diff_ap / d_ap[:, None], 0.0)
        u_an = np.where(d_an[:, None] > 0, diff_an / d_an[:, None], 0.0)
    w = active[:, None] / k
    g_a = w * (u_ap - u_an)
    np.add.at(grad, a, g_a)
    np.add.at(grad, p, -w * u_ap)
    np.add.at(grad, n, w * u_an)
    return LossOutput(value, grad, int(active.sum()))


def ms_similarity(z: np.ndarray, similarity: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    u = l2_normalize(z) if similarity == "cosine" else z
    return u @ u.T


def ms_mine(sim: np.ndarray, labels: Sequence, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (m, m) masks of kept positive and negative pairs.

    A positive is kept if it is less similar than the hardest negative plus
    epsilon; a negative is kept if it is more similar than the hardest
    positive minus epsilon. Anchors lacking either set keep nothing.
    """
    labels = np.asarray(labels)
    m = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(m, dtype=bool)
    neg_mask = ~same
    keep_pos = np.zeros((m, m), dtype=bool)
    keep_neg = np.zeros((m, m), dtype=bool)
    for i in range(m):
        if not pos_mask[i].any() or not neg_mask[i].any():
            continue
        hardest_neg = sim[i, neg_mask[i]].max()
        hardest_pos = sim[i, pos_mask[i]].min()
        keep_pos[i] = pos_mask[i] & (sim[i] < hardest_neg + epsilon)
        keep_neg[i] = neg_mask[i] & (sim[i] > hardest_pos - epsilon)
    return keep_pos, keep_neg


def ms_anchor_loss(s_pos: np.ndarray, s_neg: np.ndarray,
                   params: ContrastiveParams = ContrastiveParams()) -> tuple[float, np.ndarray, np.ndarray]:
    """One anchor's MS term and its derivatives w.r.t. the kept similarities.

    ``(1/alpha) log(1 + sum_p exp(-alpha (S_p - lam)))
    + (1/beta) log(1 + sum_n exp(beta (S_n - lam)))``
    """
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg = np.asarray(s_neg, dtype=np.float64)
    alpha, beta, lam = params.alpha, params.beta, params.lam
    value = 0.0
    d_pos = np.zeros_like(s_pos)
    d_neg = np.zeros_like(s_neg)
    if len(s_pos):
        lse, soft = _logsumexp(np.concatenate([[0.0], -alpha * (s_pos - lam)]))
        value += lse / alpha
        d_pos = -soft[1:]
    if len(s_neg):
        lse, soft = _logsumexp(np.concatenate([[0.0], beta * (s_neg - lam)]))
        value += lse / beta
        d_neg = soft[1:]
    return value, d_pos, d_neg


def ms_loss(z: np.ndarray, labels: Sequence, params: ContrastiveParams = ContrastiveParams(),
            kept: tuple[np.ndarray, np.ndarray] | None = None) -> LossOutput:
    """Multi-similarity loss averaged over the batch size.

    Pairs are mined first (see ``ms_mine``); the selection is not
    differentiated. ``kept`` overrides the mining with precomputed masks.
    """
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    m = z.shape[0]
    sim = ms_similarity(z, params.similarity)
    keep_pos, keep_neg = kept if kept is not None else ms_mine(sim, labels, params.epsilon)

    d_sim = np.zeros((m, m))
    value = 0.0
    n_active = 0
    for i in range(m):
        pos = np.flatnonzero(keep_pos[i])
        neg = np.flatnonzero(keep_neg[i])
        if len(pos) == 0 and len(neg) == 0:
            continue
        n_active += 1
        term, d_pos, d_neg = ms_anchor_loss(sim[i, pos], sim[i, neg], params)
        value += term
        d_sim[i, pos] += d_pos
        d_sim[i, neg] += d_neg
    value /= m
    d_sim /= m

    if params.similarity == "cosine":
        u = l2_normalize(z)
        g_u = d_sim @ u + d_sim.T @ u
        grad = l2_normalize_backward(z, g_u)
    else:
        grad = d_sim @ z + d_sim.T @ z
    return LossOutput(float(value), grad, n_active)


def contrastive_objective(kind: LossKind | str, pooled: np.ndarray, labels: Sequence,
                          params: ContrastiveParams = ContrastiveParams()) -> LossOutput:
    """Loss on raw pooled embeddings, with the gradient w.r.t. those raw embeddings.

    SC and MS see L2-normalized embeddings; TM uses raw embeddings and L2
    distance. For SC and MS, all-zero embeddings (every ReLU unit dead) have
    no direction; they are left out of the term and get zero gradient.
    """
    kind = LossKind(kind)
    pooled = np.asarray(pooled, dtype=np.float64)
    labels = np.asarray(labels)
    if kind is LossKind.TM:
        return tm_loss(pooled, mine(labels), params)
    keep = np.linalg.norm(pooled, axis=1) > NORM_EPS
    grad = np.zeros_like(pooled)
    if keep.sum() < 2:
        return LossOutput(0.0, grad, 0)
    raw = pooled[keep]
    unit = l2_normalize(raw)
    if kind is LossKind.MS:
        out = ms_loss(unit, labels[keep], params)
    else:
        out = sc_loss(unit, mine(labels[keep]), params)
    grad[keep] = l2_normalize_backward(raw, out.grad)
    return LossOutput(out.value, grad, out.n_active)
