"""Differentiable training objectives on autodiff Values.

Nearest-neighbor assignments, FPS seeds, ball-query membership and region
counts are decided on the forward data and treated as constants; gradients
flow through the continuous distances only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .geometry import fps, knn, patch_rng, squared_distances

PAPER_P_VALUES = (0.004, 0.006, 0.008, 0.010, 0.012)


@dataclass
class UniformConfig:
    M_seeds: int = 50
    p_values: tuple = PAPER_P_VALUES

    def __post_init__(self):
        self.p_values = tuple(float(p) for p in self.p_values)
        if self.M_seeds < 1:
            raise ValueError("M_seeds must be >= 1")
        if not self.p_values or not all(0.0 < p < 1.0 for p in self.p_values):
            raise ValueError(f"every p must lie in (0, 1), got {self.p_values}")


@dataclass
class SelfProjectionConfig:
    k_sp: int = 10

    def __post_init__(self):
        if self.k_sp < 2:
            raise ValueError("k_sp must be >= 2")


@dataclass
class LossWeights:
    alpha: float = 100.0
    beta: float = 10.0
    gamma: float = 0.01

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one loss weight must be positive")


def _points3(x):
    v = ad.const(x)
    if v.ndim < 2 or v.shape[-1] != 3 or v.shape[-2] == 0:
        raise ValueError(f"expected a non-empty (..., n, 3) point set, got shape {v.shape}")
    return v


def point_norm(diff):
    return ad.sqrt(ad.reduce_sum(ad.square(diff), axis=-1))


def chamfer(S, Q):
    """Symmetric mean nearest-neighbor distance (un-squared Euclidean norms).

    Leading batch axes are allowed and must agree; the result has the batch
    shape (a scalar Value for plain ``(n, 3)`` inputs).
    """
    S, Q = _points3(S), _points3(Q)
    if S.shape[:-2] != Q.shape[:-2]:
        raise ValueError(f"chamfer: batch shapes differ: {S.shape} vs {Q.shape}")
    lead = S.shape[:-2]
    n, m = S.shape[-2], Q.shape[-2]
    s_flat = ad.reshape(S, (-1, 3))
    q_flat = ad.reshape(Q, (-1, 3))
    sd = s_flat.data.reshape((-1, n, 3))
    qd = q_flat.data.reshape((-1, m, 3))
    s_to_q = np.empty((len(sd), n), dtype=np.int64)
    q_to_s = np.empty((len(sd), m), dtype=np.int64)
    for b in range(len(sd)):
        d2 = squared_distances(sd[b], qd[b])
        s_to_q[b] = np.argmin(d2, axis=1) + b * m
        q_to_s[b] = np.argmin(d2, axis=0) + b * n
    fwd = point_norm(ad.sub(ad.gather(q_flat, s_to_q), ad.reshape(s_flat, (-1, n, 3))))
    bwd = point_norm(ad.sub(ad.reshape(q_flat, (-1, m, 3)), ad.gather(s_flat, q_to_s)))
    total = ad.add(ad.reduce_mean(fwd, axis=1), ad.reduce_mean(bwd, axis=1))
    return ad.reshape(total, lead)


def expected_count(n_points, p):
    """Expected ball population for area fraction ``p`` (radius ``sqrt(p)``)."""
    return n_points * p


def expected_spacing(radius, count):
    return math.sqrt(2.0 * math.pi * radius * radius / (count * math.sqrt(3.0)))


@dataclass
class UniformPairs:
    """Flattened nearest-neighbor pairs across all ball regions of one point set.

    ``point`` and ``neighbor`` index the point set; ``weight`` is
    ``U_number / d_hat`` of the owning region and ``target`` its ``d_hat``.
    """

    point: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    neighbor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))
    target: np.ndarray = field(default_factory=lambda: np.zeros(0))


def uniform_pairs(points, p, n_seeds, start_index, d2_full=None, seeds=None):
    """Ball regions around FPS seeds with their chi-square weights.

    Membership is strict (``dist < sqrt(p)``); each member is paired with its
    nearest other member. Regions with fewer than two points carry no pairs.
    ``d2_full`` (all squared pairwise distances) and ``seeds`` may be passed
    in to share work across several ``p``.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    radius = math.sqrt(p)
    n_hat = expected_count(n, p)
    if seeds is None:
        seeds = fps(pts, min(n_seeds, n), start_index)
    point, neighbor, weight, target = [], [], [], []
    for s in seeds:
        if d2_full is None:
            d = pts - pts[s]
            row = np.sum(d * d, axis=1)
        else:
            row = d2_full[s]
        members = np.flatnonzero(row < radius * radius)
        count = len(members)
        if count < 2:
            continue
        u_number = (count - n_hat) ** 2 / n_hat
        d_hat = expected_spacing(radius, count)
        if d2_full is None:
            d2 = squared_distances(pts[members], pts[members])
        else:
            d2 = d2_full[np.ix_(members, members)]
        np.fill_diagonal(d2, np.inf)
        point.append(members)
        neighbor.append(members[np.argmin(d2, axis=1)])
        weight.append(np.full(count, u_number / d_hat))
        target.append(np.full(count, d_hat))
    if not point:
        return UniformPairs()
    return UniformPairs(
        np.concatenate(point), np.concatenate(neighbor), np.concatenate(weight), np.concatenate(target)
    )


def uniform_term(T, cfg, seed=0, step=0):
    """Multi-scale chi-square uniformity of a target patch (mean over ``p``).

    ``T`` is ``(n, 3)`` or batched ``(B, n, 3)``; a batch returns the mean over
    patches. FPS seeds start at an index keyed by ``(seed, step, b)``.
    """
    T = _points3(T)
    single = T.ndim == 2
    if single:
        T = ad.reshape(T, (1,) + T.shape)
    B, n = T.shape[:2]
    flat = ad.reshape(T, (B * n, 3))
    point, neighbor, weight, target = [], [], [], []
    for b in range(B):
        start = int(patch_rng(seed, step, b, 0x0F).integers(n))
        pts = T.data[b]
        d2_full = squared_distances(pts, pts)
        seeds = fps(pts, min(cfg.M_seeds, n), start)
        for p in cfg.p_values:
            pr = uniform_pairs(pts, p, cfg.M_seeds, start, d2_full=d2_full, seeds=seeds)
            point.append(pr.point + b * n)
            neighbor.append(pr.neighbor + b * n)
            weight.append(pr.weight)
            target.append(pr.target)
    point = np.concatenate(point)
    if len(point) == 0:
        return ad.mul(ad.reduce_sum(flat, axis=None), 0.0)
    dist = point_norm(ad.sub(ad.gather(flat, point), ad.gather(flat, np.concatenate(neighbor))))
    dev = ad.square(ad.sub(dist, np.concatenate(target)))
    total = ad.reduce_sum(ad.mul(dev, np.concatenate(weight)))
    return ad.mul(total, 1.0 / (B * len(cfg.p_values)))


def self_projection_term(Q, cfg):
    """Distance-field agreement between each point and its neighborhood centroid.

    Per point ``q_i`` with neighbors ``N_i`` and centroid ``c_i`` this sums
    ``|d2(q_i, q_j) - d2(c_i, q_j)| / (1 + d2(q_i, q_j))`` over ``q_j`` in
    ``N_i`` and divides by ``|Q| * k_sp``. Batched input gives one value per
    leading index.
    """
    Q = _points3(Q)
    lead, n = Q.shape[:-2], Q.shape[-2]
    k = cfg.k_sp
    if k >= n:
        raise ValueError(f"k_sp={k} must be smaller than the point count {n}")
    flat = ad.reshape(Q, (-1, 3))
    qd = flat.data.reshape((-1, n, 3))
    idx = np.stack([knn(qd[b], k).indices + b * n for b in range(len(qd))])
    nbr = ad.gather(flat, idx)
    center = ad.reduce_mean(nbr, axis=2)
    q = ad.reshape(flat, (-1, n, 1, 3))
    d_self = ad.reduce_sum(ad.square(ad.sub(q, nbr)), axis=-1)
    d_center = ad.reduce_sum(ad.square(ad.sub(ad.reshape(center, (-1, n, 1, 3)), nbr)), axis=-1)
    contrib = ad.mul(ad.absolute(ad.sub(d_self, d_center)), ad.reciprocal(ad.add(d_self, 1.0)))
    total = ad.mul(ad.reduce_sum(contrib, axis=(1, 2)), 1.0 / (n * k))
    return ad.reshape(total, lead)


@dataclass
class LossBreakdown:
    total: Value
    rec: float
    uni: float
    sp: float


def joint_loss(S, Q, weights, uniform_cfg, sp_cfg, seed=0, step=0):
    """Weighted sum of reconstruction, uniform and self-projection terms.

    ``S`` holds input patches ``(B, N, 3)`` and ``Q`` the fine patches
    ``(B, r, N, 3)``; the target dense patch of element ``b`` is ``Q[b]``
    flattened to ``(r*N, 3)``. Unbatched ``(N, 3)`` / ``(r, N, 3)`` inputs are
    accepted. The total is the batch mean.
    """
    Q = ad.const(Q)
    S = np.asarray(S.data if isinstance(S, Value) else S, dtype=np.float64)
    if S.ndim == 2:
        S = S[None]
        Q = ad.reshape(Q, (1,) + Q.shape)
    B, r, N = Q.shape[:3]
    if S.shape != (B, N, 3):
        raise ValueError(f"input patches {S.shape} do not match fine patches {Q.shape}")
    S_rep = np.broadcast_to(S[:, None], (B, r, N, 3))
    rec_v = ad.reduce_mean(chamfer(S_rep, Q))
    uni_v = uniform_term(ad.reshape(Q, (B, r * N, 3)), uniform_cfg, seed=seed, step=step)
    sp_v = ad.reduce_mean(self_projection_term(Q, sp_cfg))
    # zero-weighted terms stay out of the graph entirely
    parts = [ad.mul(v, w) for v, w in ((rec_v, weights.alpha), (uni_v, weights.beta), (sp_v, weights.gamma)) if w > 0]
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return LossBreakdown(total=total, rec=rec_v.item(), uni=uni_v.item(), sp=sp_v.item())
