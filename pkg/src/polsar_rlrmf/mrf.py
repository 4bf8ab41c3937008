"""Potts-style MRF over the 4-connected grid, refined by damped min-sum BP.

Energy of a labeling y::

    sum_i -log P_i(y_i)  +  alpha * sum_{(i,j)} w_ij * [y_i != y_j]

with w_ij = exp(-||z_i - z_j||^2 / (2 sigma)) and sigma the mean squared
feature distance across all neighbouring pixel pairs. Labels are 1-based in
LabelMap objects and 0-based internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureImage, LabelMap

PROB_FLOOR = 1e-12
BRUTE_FORCE_LIMIT = 1 << 20


@dataclass(frozen=True)
class MrfModel:
    unary: np.ndarray  # (H, W, C)
    w_h: np.ndarray  # (H, W-1): edge (i,j)-(i,j+1)
    w_v: np.ndarray  # (H-1, W): edge (i,j)-(i+1,j)
    alpha: float = 5.0

    def __post_init__(self):
        h, w, _ = self.unary.shape
        if self.w_h.shape != (h, w - 1) or self.w_v.shape != (h - 1, w):
            raise ValueError("edge weight arrays do not match the unary grid")
        if not np.all(np.isfinite(self.unary)):
            raise ValueError("unary terms must be finite")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @property
    def shape(self):
        return self.unary.shape


def edge_sq_distances(z: np.ndarray):
    dh = np.sum((z[:, 1:] - z[:, :-1]) ** 2, axis=-1)
    dv = np.sum((z[1:] - z[:-1]) ** 2, axis=-1)
    return dh, dv


def build_model(probs, z: FeatureImage, alpha: float = 5.0) -> MrfModel:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError("probability map must have shape (H, W, C)")
    if probs.shape[:2] != (z.height, z.width):
        raise ValueError(f"probability map {probs.shape[:2]} and feature image {(z.height, z.width)} differ in size")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("probabilities must be non-negative and sum to one per pixel")
    unary = -np.log(np.maximum(probs, PROB_FLOOR))
    dh, dv = edge_sq_distances(z.data)
    all_d = np.concatenate([dh.ravel(), dv.ravel()])
    sigma = float(all_d.mean()) if all_d.size else 0.0
    if sigma > 0:
        w_h, w_v = np.exp(-dh / (2 * sigma)), np.exp(-dv / (2 * sigma))
    else:
        w_h, w_v = np.ones_like(dh), np.ones_like(dv)
    return MrfModel(unary, w_h, w_v, float(alpha))


def _energy0(m: MrfModel, lab0: np.ndarray) -> float:
    h, w, _ = m.unary.shape
    un = np.take_along_axis(m.unary, lab0[..., None], axis=-1).sum()
    cut = (m.w_h * (lab0[:, 1:] != lab0[:, :-1])).sum() + (m.w_v * (lab0[1:] != lab0[:-1])).sum()
    return float(un + m.alpha * cut)


def energy(m: MrfModel, labels: LabelMap) -> float:
    lab = labels.labels
    if lab.shape != m.unary.shape[:2]:
        raise ValueError("label map does not match the model grid")
    if np.any(lab == 0):
        raise ValueError("energy needs a complete labeling (found unlabeled pixels)")
    if lab.max() > m.unary.shape[2]:
        raise ValueError("label exceeds the number of classes")
    return _energy0(m, lab - 1)


def _potts_message(h: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """min over source label of h(source) + lam * [source != target], O(C)."""
    return np.minimum(h, h.min(axis=-1, keepdims=True) + lam[..., None])


def _normalize(msg):
    return msg - msg.min(axis=-1, keepdims=True)


def min_sum_bp(m: MrfModel, iters: int = 50, damping: float = 0.5, normalize: bool = True):
    """Synchronous damped min-sum BP. Returns the lowest-energy labeling seen and its energy.

    The unary argmax labeling is the first candidate, so the result is never
    worse than it under the model's own energy.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    U = m.unary
    h, w, c = U.shape
    lam_h, lam_v = m.alpha * m.w_h, m.alpha * m.w_v
    right = np.zeros((h, w - 1, c))  # (i,j) -> (i,j+1)
    left = np.zeros((h, w - 1, c))  # (i,j+1) -> (i,j)
    down = np.zeros((h - 1, w, c))  # (i,j) -> (i+1,j)
    up = np.zeros((h - 1, w, c))  # (i+1,j) -> (i,j)

    best = U.argmin(axis=-1)
    best_e = _energy0(m, best)
    for _ in range(iters):
        from_left = np.zeros_like(U)
        from_left[:, 1:] = right
        from_right = np.zeros_like(U)
        from_right[:, :-1] = left
        from_up = np.zeros_like(U)
        from_up[1:] = down
        from_down = np.zeros_like(U)
        from_down[:-1] = up
        belief = U + from_left + from_right + from_up + from_down

        new_right = _potts_message((belief - from_right)[:, :-1], lam_h)
        new_left = _potts_message((belief - from_left)[:, 1:], lam_h)
        new_down = _potts_message((belief - from_down)[:-1], lam_v)
        new_up = _potts_message((belief - from_up)[1:], lam_v)
        msgs = []
        for old, new in ((right, new_right), (left, new_left), (down, new_down), (up, new_up)):
            if normalize:
                new = _normalize(new)
            mixed = (1 - damping) * new + damping * old
            msgs.append(_normalize(mixed) if normalize else mixed)
        right, left, down, up = msgs

        belief = U.copy()
        belief[:, 1:] += right
        belief[:, :-1] += left
        belief[1:] += down
        belief[:-1] += up
        lab = belief.argmin(axis=-1)  # first minimum, i.e. smallest label on ties
        e = _energy0(m, lab)
        if e < best_e:
            best, best_e = lab, e
    return LabelMap(best + 1, c), best_e


def brute_force_min(m: MrfModel):
    """Exhaustive minimum; only for tiny grids (C^(H*W) <= 2^20)."""
    h, w, c = m.unary.shape
    n = h * w
    if n * np.log2(c) > 20 + 1e-12:
        raise ValueError(f"{c}^{n} labelings exceed the brute-force limit of 2^20")
    total = c ** n
    best_e, best = np.inf, None
    step = 1 << 14
    for start in range(0, total, step):
        codes = np.arange(start, min(start + step, total))
        labs = np.empty((codes.size, n), dtype=np.int64)
        rest = codes.copy()
        for k in range(n - 1, -1, -1):
            rest, labs[:, k] = np.divmod(rest, c)
        labs = labs.reshape(-1, h, w)
        un = m.unary[np.arange(h)[:, None], np.arange(w)[None, :], labs].sum(axis=(1, 2))
        cut = (m.w_h * (labs[:, :, 1:] != labs[:, :, :-1])).sum(axis=(1, 2)) \
            + (m.w_v * (labs[:, 1:] != labs[:, :-1])).sum(axis=(1, 2))
        e = un + m.alpha * cut
        k = int(e.argmin())
        if e[k] < best_e:
            best_e, best = float(e[k]), labs[k]
    return LabelMap(best + 1, c), _energy0(m, best)


def discontinuities(labels: LabelMap) -> int:
    lab = labels.labels
    return int((lab[:, 1:] != lab[:, :-1]).sum() + (lab[1:] != lab[:-1]).sum())
