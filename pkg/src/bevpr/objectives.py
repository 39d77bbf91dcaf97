"""Training objectives as pure functions: triplet margin, batch-hard mining, yaw KLD, joint loss."""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MARGIN = 0.2
YAW_WEIGHT = 0.001
POSITIVE_RADIUS = 2.0
NEGATIVE_RADIUS = 3.0
EPS = 1e-12


@dataclass(frozen=True, eq=False)
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    margin: float = MARGIN
    skipped: int = 0

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.anchor, dtype=np.float64))
        p = np.atleast_2d(np.asarray(self.positive, dtype=np.float64))
        n = np.atleast_2d(np.asarray(self.negative, dtype=np.float64))
        if not (a.shape == p.shape == n.shape):
            raise ValueError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "positive", p)
        object.__setattr__(self, "negative", n)

    def __len__(self):
        return self.anchor.shape[0] if self.anchor.size else 0


def triplet_terms(b):
    """Per-triplet hinge values ``d(a, p) - d(a, n) + m`` (before clamping)."""
    dp = np.linalg.norm(b.anchor - b.positive, axis=1)
    dn = np.linalg.norm(b.anchor - b.negative, axis=1)
    return dp - dn + b.margin


def triplet_margin_loss(b):
    """Batch mean of ``max(||a - p|| - ||a - n|| + m, 0)``; 0 for an empty batch."""
    if len(b) == 0:
        return 0.0
    return float(np.maximum(triplet_terms(b), 0.0).mean())


def triplet_margin_loss_grad(b):
    """Subgradient of :func:`triplet_margin_loss` w.r.t. anchor, positive and negative rows.

    At the hinge or at a zero distance the zero subgradient is chosen.
    """
    B = len(b)
    ga = np.zeros_like(b.anchor)
    gp = np.zeros_like(b.positive)
    gn = np.zeros_like(b.negative)
    if B == 0:
        return ga, gp, gn
    dap = b.anchor - b.positive
    dan = b.anchor - b.negative
    np_ = np.linalg.norm(dap, axis=1, keepdims=True)
    nn_ = np.linalg.norm(dan, axis=1, keepdims=True)
    active = (triplet_terms(b) > 0)[:, None]
    up = np.divide(dap, np_, out=np.zeros_like(dap), where=np_ > 0)
    un = np.divide(dan, nn_, out=np.zeros_like(dan), where=nn_ > 0)
    ga = np.where(active, up - un, 0.0) / B
    gp = np.where(active, -up, 0.0) / B
    gn = np.where(active, un, 0.0) / B
    return ga, gp, gn


def batch_hard_mine(features, positions, margin=MARGIN, pos_radius=POSITIVE_RADIUS,
                    neg_radius=NEGATIVE_RADIUS, anchors=None):
    """Hardest positive and hardest negative per anchor; zero-loss triplets dropped.

    ``positions`` are planar sample positions in metres. Positives lie within
    ``pos_radius`` of the anchor, negatives at least ``neg_radius`` away.
    Anchors lacking a positive or a negative are skipped and counted in
    ``TripletBatch.skipped``. Ties resolve to the lowest sample index.
    """
    F = np.asarray(features, dtype=np.float64)
    P = np.asarray(positions, dtype=np.float64)
    if F.ndim != 2 or P.shape != (F.shape[0], 2):
        raise ValueError("features must be (n, D) and positions (n, 2)")
    n = F.shape[0]
    fd = np.linalg.norm(F[:, None] - F[None], axis=-1)
    pd = np.linalg.norm(P[:, None] - P[None], axis=-1)
    idx = range(n) if anchors is None else anchors
    A, Pp, Nn = [], [], []
    skipped = 0
    for a in idx:
        pos = (pd[a] <= pos_radius)
        pos[a] = False
        neg = pd[a] >= neg_radius
        if not pos.any() or not neg.any():
            skipped += 1
            continue
        pi = int(np.argmax(np.where(pos, fd[a], -np.inf)))
        ni = int(np.argmin(np.where(neg, fd[a], np.inf)))
        if fd[a, pi] - fd[a, ni] + margin <= 0:
            continue
        A.append(F[a])
        Pp.append(F[pi])
        Nn.append(F[ni])
    if skipped:
        log.warning("batch-hard mining skipped %d anchor(s) without a positive or negative", skipped)
    D = F.shape[1]
    if not A:
        empty = np.zeros((0, D))
        return TripletBatch(empty, empty, empty, margin, skipped)
    return TripletBatch(np.array(A), np.array(Pp), np.array(Nn), margin, skipped)


def kld_yaw_loss(p, target_bin, eps=EPS):
    """``KL(onehot(target) || p) = -log p[target]`` with ``p[target]`` floored at ``eps``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if (p < 0).any() or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("p must be a probability distribution")
    if not 0 <= target_bin < p.shape[0]:
        raise ValueError(f"target bin {target_bin} out of range for {p.shape[0]} bins")
    return float(-np.log(max(p[target_bin], eps)))


def joint_loss(place_loss, yaw_loss, weight=YAW_WEIGHT):
    if weight < 0:
        raise ValueError("yaw loss weight must be non-negative")
    return place_loss + weight * yaw_loss
