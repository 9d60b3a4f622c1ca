"""Exact t-SNE, k-NN cluster purity, and deterministic SVG rendering of
projections and confusion matrices."""

from __future__ import annotations

import html
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .evaluation import ConfusionMatrix

P_FLOOR = 1e-12
Q_FLOOR = 1e-12

# Matplotlib's tab20, indexed by the lexicographic rank of the region name.
PALETTE = (
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c", "#98df8a", "#d62728",
    "#ff9896", "#9467bd", "#c5b0d5", "#8c564b", "#c49c94", "#e377c2", "#f7b6d2",
    "#7f7f7f", "#c7c7c7", "#bcbd22", "#dbdb8d", "#17becf", "#9edae5",
)


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    n_iter: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    seed: int = 0

    def validate(self, n_points: int) -> None:
        if not 1 < self.perplexity < n_points:
            raise AnalysisError(f"perplexity must lie in (1, {n_points}), got {self.perplexity}")
        if self.n_iter < self.exaggeration_iters:
            raise AnalysisError(f"n_iter must be >= {self.exaggeration_iters}")


@dataclass
class Projection:
    Y: np.ndarray
    kl_trace: np.ndarray  # kl_trace[0] at the initial layout, kl_trace[k] after k updates
    labels: list[str]
    P: np.ndarray | None = None
    log_perplexity: np.ndarray | None = None
    n_search_capped: int = 0


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _entropy_and_probs(dist: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # Shift by the minimum distance so exp() cannot underflow to an all-zero row.
    shifted = dist - dist.min()
    p = np.exp(-beta * shifted)
    s = p.sum()
    p /= s
    h = math.log(s) + beta * float(np.dot(shifted, p))
    return h, p


def conditional_probabilities(dists: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_iter: int = 50):
    """Row-wise Gaussian conditionals p_{j|i} calibrated to ``perplexity``.

    Bisection on the precision beta_i = 1/(2 sigma_i^2) until the entropy is
    within ``tol`` of log(perplexity). Returns ``(P_cond, betas,
    achieved_log_perplexity, n_capped)``.
    """
    n = dists.shape[0]
    target = math.log(perplexity)
    p_cond = np.zeros((n, n))
    betas = np.ones(n)
    achieved = np.zeros(n)
    capped = 0
    for i in range(n):
        others = np.r_[0:i, i + 1:n]
        di = dists[i, others]
        spread = di.mean() - di.min()
        beta = 1.0 / spread if spread > 0 else 1.0
        lo, hi = 0.0, math.inf
        h, p = _entropy_and_probs(di, beta)
        it = 0
        while abs(h - target) > tol and it < max_iter:
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == math.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, p = _entropy_and_probs(di, beta)
            it += 1
        if abs(h - target) > tol:
            capped += 1
        p_cond[i, others] = p
        betas[i] = beta
        achieved[i] = h
    return p_cond, betas, achieved, capped


def joint_probabilities(x: np.ndarray, perplexity: float):
    """Symmetrized affinities ``(p_{j|i} + p_{i|j}) / 2n``, floored and renormalized."""
    n = x.shape[0]
    p_cond, _, achieved, capped = conditional_probabilities(pairwise_sq_dists(x), perplexity)
    p = (p_cond + p_cond.T) / (2.0 * n)
    np.maximum(p, P_FLOOR, out=p)
    np.fill_diagonal(p, 0.0)
    p /= p.sum()
    return p, achieved, capped


def student_q(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Low-dimensional affinities Q and the unnormalized kernel 1/(1+|y_i-y_j|^2)."""
    num = 1.0 / (1.0 + pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], Q_FLOOR))))


def tsne_gradient(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dKL/dY = 4 sum_j (p_ij - q_ij)(y_i - y_j)/(1 + |y_i - y_j|^2); also returns Q."""
    q, num = student_q(y)
    w = (p - q) * num
    grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
    return grad, q


def tsne(x: np.ndarray, cfg: TsneConfig = TsneConfig(), labels: Sequence[str] | None = None,
         point_keys: Sequence[int] | None = None) -> Projection:
    """Exact t-SNE to two dimensions.

    The initial coordinate of point i is drawn from its own stream keyed by
    ``point_keys[i]`` (default: the row index). Points are processed in key
    order, so permuting rows together with their keys permutes the output
    exactly, bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 5:
        raise AnalysisError("t-SNE needs at least 5 points")
    if not np.all(np.isfinite(x)):
        raise AnalysisError("non-finite input to t-SNE")
    cfg.validate(n)
    keys = np.arange(n) if point_keys is None else np.asarray(point_keys, dtype=np.int64)
    if keys.shape != (n,) or len(np.unique(keys)) != n:
        raise AnalysisError("point_keys must be one distinct key per point")
    order = np.argsort(keys, kind="stable")
    x = x[order]
    p, achieved, capped = joint_probabilities(x, cfg.perplexity)
    if not np.any(pairwise_sq_dists(x) > 0):
        raise AnalysisError("all input points are identical")

    y = np.stack([np.random.default_rng([cfg.seed, int(k)]).normal(0.0, 1e-2, size=2) for k in keys[order]])
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl = [kl_divergence(p, student_q(y)[0])]
    for it in range(cfg.n_iter):
        early = it < cfg.exaggeration_iters
        p_eff = p * cfg.early_exaggeration if early else p
        momentum = cfg.momentum if early else cfg.final_momentum
        grad, _ = tsne_gradient(p_eff, y)
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        kl.append(kl_divergence(p, student_q(y)[0]))
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    return Projection(
        Y=y[inverse],
        kl_trace=np.array(kl),
        labels=list(labels) if labels is not None else [""] * n,
        P=p[np.ix_(inverse, inverse)],
        log_perplexity=achieved[inverse],
        n_search_capped=capped,
    )


# ---------------------------------------------------------------------------
# Cluster quality
# ---------------------------------------------------------------------------


@dataclass
class ClusterQuality:
    separation: float  # (inter - intra) / max(inter, intra) of mean pairwise distances
    purity: float


def knn_purity(x: np.ndarray, labels: Sequence, k: int = 10) -> float:
    """Fraction of points whose k nearest neighbours (self excluded) vote for their own label.

    Neighbours at equal distance are ordered by index; tied votes go to the
    lowest label.
    """
    x = np.asarray(x, dtype=np.float64)
    _, lab = np.unique(np.asarray(labels), return_inverse=True)
    n = len(lab)
    if n < k + 1:
        raise AnalysisError(f"need at least {k + 1} points for {k}-NN purity, got {n}")
    d = pairwise_sq_dists(x)
    hits = 0
    for i in range(n):
        row = d[i].copy()
        row[i] = np.inf
        nn = np.argsort(row, kind="stable")[:k]
        votes = np.bincount(lab[nn], minlength=lab.max() + 1)
        hits += int(np.argmax(votes) == lab[i])
    return hits / n


def cluster_quality(x: np.ndarray, labels: Sequence, k: int = 10) -> ClusterQuality:
    x = np.asarray(x, dtype=np.float64)
    lab = np.asarray(labels)
    if len(np.unique(lab)) < 2:
        raise AnalysisError("cluster quality needs at least two labels")
    d = np.sqrt(pairwise_sq_dists(x))
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    intra_mask = same & off
    intra = float(d[intra_mask].mean()) if intra_mask.any() else 0.0
    inter = float(d[~same].mean())
    top = max(intra, inter)
    sep = (inter - intra) / top if top > 0 else 0.0
    return ClusterQuality(sep, knn_purity(x, lab, k))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

PLOT_SIZE = 800
MARGIN = 0.05 * PLOT_SIZE
LEGEND_WIDTH = 200


def region_colors(regions: Sequence[str]) -> dict[str, str]:
    return {r: PALETTE[i % len(PALETTE)] for i, r in enumerate(sorted(set(regions)))}


def _scale(values: np.ndarray, flip: bool) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.full(values.shape, PLOT_SIZE / 2.0)
    s = (values - lo) / (hi - lo)
    if flip:
        s = 1.0 - s
    return MARGIN + s * (PLOT_SIZE - 2 * MARGIN)


def render_scatter(proj: Projection, title: str = "") -> str:
    """SVG with one circle per point, coloured by region, and a legend on the right."""
    y = np.asarray(proj.Y, dtype=np.float64)
    if len(y) == 0:
        raise AnalysisError("nothing to render")
    colors = region_colors(proj.labels)
    cx = _scale(y[:, 0], flip=False)
    cy = _scale(y[:, 1], flip=True)
    width = PLOT_SIZE + LEGEND_WIDTH
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{PLOT_SIZE}" '
        f'viewBox="0 0 {width} {PLOT_SIZE}">',
        f'<rect x="0" y="0" width="{width}" height="{PLOT_SIZE}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<title>{html.escape(title)}</title>')
    out.append(f'<svg x="0" y="0" width="{PLOT_SIZE}" height="{PLOT_SIZE}" viewBox="0 0 {PLOT_SIZE} {PLOT_SIZE}">')
    out.append('<g id="points" stroke="none" fill-opacity="0.8">')
    for x_, y_, lab in zip(cx, cy, proj.labels):
        out.append(f'<circle cx="{x_:.3f}" cy="{y_:.3f}" r="3" fill="{colors[lab]}"/>')
    out.append("</g>")
    out.append("</svg>")
    out.append(f'<g id="legend" font-family="sans-serif" font-size="14" transform="translate({PLOT_SIZE + 10},{MARGIN:.0f})">')
    for i, (region, color) in enumerate(colors.items()):
        out.append(f'<rect x="0" y="{i * 20}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="18" y="{i * 20 + 11}">{html.escape(region)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def confusion_shades(cm: ConfusionMatrix, normalize: bool = True) -> np.ndarray:
    """Cell intensities in [0, 1]: row fractions, or counts over the largest count."""
    counts = cm.counts.astype(np.float64)
    if normalize:
        rows = counts.sum(axis=1, keepdims=True)
        return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    top = counts.max() if counts.size else 0.0
    return counts / top if top > 0 else np.zeros_like(counts)


def _shade_color(s: float) -> str:
    # White to dark blue.
    lo, hi = (255, 255, 255), (8, 48, 107)
    r, g, b = (round(a + (z - a) * s) for a, z in zip(lo, hi))
    return f"#{r:02x}{g:02x}{b:02x}"


def render_confusion(cm: ConfusionMatrix, normalize: bool = True, title: str = "") -> str:
    """SVG heatmap; rows are true regions, columns predicted."""
    r = len(cm.regions)
    if r < 1:
        raise AnalysisError("empty confusion matrix")
    shades = confusion_shades(cm, normalize)
    cell, off = 40, 60
    size = off + r * cell + 10
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<title>{html.escape(title)}</title>')
    out.append('<g id="axes" font-family="sans-serif" font-size="12">')
    for i, region in enumerate(cm.regions):
        name = html.escape(region)
        out.append(f'<text x="{off - 6}" y="{off + i * cell + cell / 2 + 4:.0f}" text-anchor="end">{name}</text>')
        out.append(f'<text x="{off + i * cell + cell / 2:.0f}" y="{off - 8}" text-anchor="middle">{name}</text>')
    out.append("</g>")
    out.append('<g id="cells" font-family="sans-serif" font-size="10" text-anchor="middle">')
    for i in range(r):
        for j in range(r):
            s = float(shades[i, j])
            x, y = off + j * cell, off + i * cell
            label = f"{s:.2f}" if normalize else str(int(cm.counts[i, j]))
            text_color = "#ffffff" if s > 0.5 else "#000000"
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_shade_color(s)}" '
                f'stroke="#cccccc" data-row="{i}" data-col="{j}" data-shade="{s:.4f}"/>'
            )
            out.append(f'<text x="{x + cell / 2:.0f}" y="{y + cell / 2 + 4:.0f}" fill="{text_color}">{label}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
