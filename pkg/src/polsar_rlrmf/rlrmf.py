"""Robust low-rank matrix factorization under mixture-of-Gaussians noise.

Model: ``S = U V^T + E`` with every entry of ``E`` drawn i.i.d. from the
zero-mean mixture ``sum_k pi_k N(0, sigma_k^2)``. Parameters are fitted by
EM: responsibilities (E-step), closed-form ``pi``/``sigma^2`` updates, then
a weighted low-rank problem ``min ||W * (S - U V^T)||_F^2`` for the factors
with ``w_ij^2 = sum_k gamma_ijk / (2 sigma_k^2)``. With that weight the
weighted Frobenius objective is exactly the residual part of the EM
Q-function, so every iteration is a generalized EM step and the
log-likelihood never decreases.

All heavy lifting happens in batched kernels (leading batch axis) so that a
whole image worth of patches can be fitted at once; every operation is
slice-wise, so a patch's result does not depend on what else is in the
batch.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
# sigma quantiles of |residual| used to spread the initial components
_INIT_PERCENTILES = (50.0, 70.0, 90.0, 99.0)
_KSELECT_ITERS = 30


class EmError(RuntimeError):
    """Numerical failure inside the EM fit."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class MoGModel:
    """Zero-mean Gaussian mixture: weights ``pi`` and variances ``sigma2``."""

    pi: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64).ravel()
        s2 = np.asarray(self.sigma2, dtype=np.float64).ravel()
        if pi.shape != s2.shape or pi.size == 0:
            raise ValueError("pi and sigma2 must be non-empty and the same length")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixing weights must be non-negative and sum to 1, got {pi}")
        if np.any(s2 <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "sigma2", s2)

    @property
    def K(self) -> int:
        return self.pi.size

    def without(self, drop) -> "MoGModel":
        """Drop the flagged components and renormalize the weights."""
        keep = ~np.asarray(drop, dtype=bool)
        if not keep.any():
            raise ValueError("cannot remove every component")
        pi = self.pi[keep]
        return MoGModel(pi / pi.sum(), self.sigma2[keep])


@dataclass(frozen=True)
class FactorPair:
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
            raise ValueError(f"incompatible factor shapes {U.shape} and {V.shape}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise ValueError("factors must be finite")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.U @ self.V.T


@dataclass(frozen=True)
class EmConfig:
    rank: int = 2
    k_init: int = 4
    max_iter: int = 100
    u_tol: float = 0.01
    inner_als_iters: int = 2
    sigma2_floor: float = 1e-8
    prune_threshold: float = 0.02
    ridge: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.k_init < 1:
            raise ValueError("k_init must be >= 1")
        if self.max_iter < 1 or self.inner_als_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if min(self.u_tol, self.sigma2_floor, self.ridge) <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 <= self.prune_threshold < 1:
            raise ValueError("prune_threshold must lie in [0, 1)")


@dataclass
class EmTrace:
    """Per-iteration record of one fit. ``loglik[0]`` is the initial model."""

    loglik: list = field(default_factory=list)
    k_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loglik", "K"])
        for it, (ll, k) in enumerate(zip(self.loglik, self.k_history)):
            w.writerow([it, repr(float(ll)), k])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# batched kernels. Matrices are S (B, d, n), U (B, d, r), V (B, n, r); the
# mixture side works on flattened squared residuals E2 (B, N) and keeps the
# component axis first, (K, B, N), because K is tiny. Inactive components
# carry pi == 0 and drop out through log(0) = -inf.


def _ksum(a):
    """Sum over the trailing component axis in a fixed left-to-right order."""
    out = a[..., 0].copy()
    for k in range(1, a.shape[-1]):
        out += a[..., k]
    return out[..., None]


def _log_pi(pi):
    with np.errstate(divide="ignore"):
        return np.log(pi)


def _log_joint(E2, pi, sigma2):
    """log pi_k + log N(e | 0, sigma_k^2) as a (K, B, N) array."""
    c = (_log_pi(pi) - 0.5 * (LOG_2PI + np.log(sigma2))).T
    inv = (0.5 / sigma2).T
    return c[:, :, None] - E2[None] * inv[:, :, None]


def _logsumexp(lj):
    m = lj.max(axis=0)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(lj - m).sum(axis=0))


def _responsibilities(lj, pi):
    """Posterior component probabilities (K, B, N) and the per-entry log evidence."""
    m = lj.max(axis=0)
    m = np.where(np.isfinite(m), m, 0.0)
    ex = np.exp(lj - m)
    tot = ex.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = ex / tot
        lse = m + np.log(tot)
    bad = ~(tot > 0) | ~np.isfinite(lse)
    if bad.any():
        # every component underflowed: spread uniformly over the live ones
        active = pi > 0
        uniform = (active / active.sum(axis=-1, keepdims=True)).T
        gamma = np.where(bad[None], uniform[:, :, None], gamma)
    return gamma, lse


def _mog_update(E2, gamma, sigma2_floor):
    """Closed-form MoG update; returns (pi, sigma2, dead), each (B, K)."""
    nk = np.ascontiguousarray(gamma.sum(axis=2).T)
    dead = nk <= 0
    wsq = np.einsum("kbn,bn->bk", gamma, E2)
    sigma2 = np.where(dead, 1.0, wsq / np.where(dead, 1.0, nk))
    sigma2 = np.maximum(sigma2, sigma2_floor)
    pi = np.where(dead, 0.0, nk / E2.shape[1])
    pi = pi / _ksum(pi)
    return pi, sigma2, dead


def _weights_sq(gamma, pi, sigma2):
    inv = np.where(pi > 0, 0.5 / sigma2, 0.0)
    return np.einsum("kbn,bk->bn", gamma, inv)


def _loglik_flat(E2, pi, sigma2):
    return _logsumexp(_log_joint(E2, pi, sigma2)).sum(axis=1)


def _solve_spd(A, rhs, ridge):
    """Solve the stacked damped normal systems (A + ridge I) x = rhs."""
    r = A.shape[-1]
    eye = np.eye(r)
    try:
        return np.ascontiguousarray(np.linalg.solve(A + ridge * eye, rhs[..., None])[..., 0])
    except np.linalg.LinAlgError:
        pass
    # find the offending systems one by one so healthy ones keep their damping
    flat_A = (A + ridge * eye).reshape(-1, r, r)
    flat_b = rhs.reshape(-1, r)
    out = np.empty_like(flat_b)
    for t in range(flat_A.shape[0]):
        lam, M = ridge, flat_A[t]
        for attempt in range(4):
            try:
                out[t] = np.linalg.solve(M, flat_b[t])
                break
            except np.linalg.LinAlgError:
                if attempt == 3:
                    raise EmError("singular normal equations after raising damping 3 times")
                M = M + 9.0 * lam * eye
                lam *= 10.0
    return out.reshape(rhs.shape)


def _solve_rows(W2, S, V, ridge):
    """Row-wise weighted least squares: argmin_u sum_j w2_ij (s_ij - u.v_j)^2 + ridge |u|^2."""
    A = np.einsum("bmn,bnr,bns->bmrs", W2, V, V)
    rhs = np.einsum("bmn,bnr->bmr", W2 * S, V)
    return _solve_spd(A, rhs, ridge)


def _reconstruct(U, V):
    # einsum rather than stacked matmul: matmul may switch between BLAS and
    # its own loop with the batch size, which changes low-order bits
    return np.einsum("bdr,bnr->bdn", U, V)


def _weighted_objective(S, W2, U, V):
    R = S - _reconstruct(U, V)
    return (W2 * R * R).sum(axis=(1, 2))


def _als(S, W2, U, V, ridge, iters):
    St, W2t = np.swapaxes(S, 1, 2), np.swapaxes(W2, 1, 2)
    for _ in range(iters):
        U = _solve_rows(W2, S, V, ridge)
        V = _solve_rows(W2t, St, U, ridge)
    return U, V


def _svd_init(S, r, seeds):
    u, s, vt = np.linalg.svd(S, full_matrices=False)
    root = np.sqrt(s[:, :r])
    U = u[:, :, :r] * root[:, None, :]
    V = np.swapaxes(vt[:, :r, :], 1, 2) * root[:, None, :]
    # rank-deficient patches: give the empty directions a tiny seeded nudge so
    # the alternating solver is not parked on a saddle with identical zeros
    tiny = s[:, :r] <= 1e-12 * np.maximum(s[:, :1], 1e-300)
    for b in np.flatnonzero(tiny.any(axis=1)):
        rng = np.random.default_rng(seeds[b])
        cols = np.flatnonzero(tiny[b])
        V[b][:, cols] = 1e-6 * rng.standard_normal((V.shape[1], cols.size))
        U[b][:, cols] = 0.0
    return U, V


def _init_sigma2(absE, k, floor):
    if k == 1:
        s2 = (absE * absE).mean(axis=1, keepdims=True)
    else:
        if k <= len(_INIT_PERCENTILES):
            picks = np.round(np.linspace(0, len(_INIT_PERCENTILES) - 1, k)).astype(int)
            q = np.array(_INIT_PERCENTILES)[picks]
        else:
            q = np.linspace(50.0, 99.0, k)
        s2 = np.percentile(absE, q, axis=1).T ** 2
    return np.maximum(s2, floor)


def _select_components(E, cfg):
    """Automatic K: fit 1-D zero-mean mixtures with K = 1..k_init to the
    initial residuals (pruning weights under the threshold) and keep the
    model with the smallest BIC. Returns (pi, sigma2) padded to k_init."""
    B = E.shape[0]
    absE = np.abs(E.reshape(B, -1))
    E2 = absE * absE
    n_obs = E2.shape[1]
    best_bic = np.full(B, np.inf)
    best_pi = np.zeros((B, cfg.k_init))
    best_s2 = np.ones((B, cfg.k_init))
    for k in range(1, cfg.k_init + 1):
        s2 = _init_sigma2(absE, k, cfg.sigma2_floor)
        pi = np.full((B, k), 1.0 / k)
        if k > 1:
            for _ in range(_KSELECT_ITERS):
                gamma, _ = _responsibilities(_log_joint(E2, pi, s2), pi)
                pi, s2, _ = _mog_update(E2, gamma, cfg.sigma2_floor)
                pi = _prune(pi, cfg.prune_threshold)
        ll = _loglik_flat(E2, pi, s2)
        n_free = 2 * (pi > 0).sum(axis=1) - 1
        bic = -2.0 * ll + n_free * np.log(n_obs)
        better = bic < best_bic
        best_bic = np.where(better, bic, best_bic)
        best_pi[better] = 0.0
        best_s2[better] = 1.0
        best_pi[better, :k] = pi[better]
        best_s2[better, :k] = s2[better]
    return best_pi, best_s2


def _prune(pi, threshold):
    """Zero out weights below threshold (never the largest) and renormalize."""
    drop = (pi > 0) & (pi < threshold)
    drop[np.arange(pi.shape[0]), np.argmax(pi, axis=1)] = False
    rows = drop.any(axis=1)
    if not rows.any():
        return pi
    pi = pi.copy()
    kept = np.where(drop[rows], 0.0, pi[rows])
    pi[rows] = kept / _ksum(kept)
    return pi


def _aligned_max_diff(U_new, U_old):
    sign = np.sign(np.einsum("bdr,bdr->br", U_new, U_old))
    sign = np.where(sign == 0, 1.0, sign)
    return np.abs(U_new * sign[:, None, :] - U_old).max(axis=(1, 2))


def _sq_residual(S, U, V):
    E = S - _reconstruct(U, V)
    return (E * E).reshape(S.shape[0], -1)


@dataclass
class BatchFit:
    U: np.ndarray
    V: np.ndarray
    pi: np.ndarray
    sigma2: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    fail_iteration: np.ndarray
    loglik: np.ndarray | None = None
    k_history: np.ndarray | None = None


def fit_batch(S, cfg: EmConfig, seeds=None, record_trace=False) -> BatchFit:
    """Run the MoG-robust EM on a stack of matrices ``S`` of shape (B, d, n).

    ``seeds`` gives one RNG seed per matrix (defaults to ``cfg.seed`` for
    all). Failed fits (non-finite log-likelihood) are flagged, not raised.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 3:
        raise ValueError("expected a (B, d, n) stack")
    B, d, n = S.shape
    r = cfg.rank
    if not r < min(d, n):
        raise ValueError(f"rank {r} must be below min(d, n) = {min(d, n)}")
    if seeds is None:
        seeds = [cfg.seed] * B

    U, V = _svd_init(S, r, seeds)
    pi, sigma2 = _select_components(S - _reconstruct(U, V), cfg)

    iterations = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    fail_iteration = np.full(B, -1, dtype=np.int64)
    if record_trace:
        ll_trace = np.full((B, cfg.max_iter + 1), np.nan)
        k_trace = np.zeros((B, cfg.max_iter + 1), dtype=np.int64)

    E2 = _sq_residual(S, U, V)
    lj = _log_joint(E2, pi, sigma2)
    L = _logsumexp(lj).sum(axis=1)
    bad0 = ~np.isfinite(L)
    failed |= bad0
    fail_iteration[bad0] = 0
    if record_trace:
        ll_trace[:, 0] = L
        k_trace[:, 0] = (pi > 0).sum(axis=1)

    run = np.flatnonzero(~failed)
    # working copies restricted to the still-running fits
    Sr, Ur, Vr, E2r = S[run], U[run], V[run], E2[run]
    pr, s2r, ljr = pi[run], sigma2[run], lj[:, run]
    for it in range(1, cfg.max_iter + 1):
        if run.size == 0:
            break
        gamma, _ = _responsibilities(ljr, pr)
        pr, s2r, _ = _mog_update(E2r, gamma, cfg.sigma2_floor)
        W2 = _weights_sq(gamma, pr, s2r).reshape(Sr.shape)
        U_prev = Ur
        Ur, Vr = _als(Sr, W2, Ur, Vr, cfg.ridge, cfg.inner_als_iters)
        E2r = _sq_residual(Sr, Ur, Vr)
        ljr = _log_joint(E2r, pr, s2r)
        Lr = _logsumexp(ljr).sum(axis=1)

        # prune a starving component only when that does not cost likelihood
        pp = _prune(pr, cfg.prune_threshold)
        changed = np.any(pp != pr, axis=1)
        if changed.any():
            lj_p = _log_joint(E2r[changed], pp[changed], s2r[changed])
            L_p = _logsumexp(lj_p).sum(axis=1)
            ok = L_p >= Lr[changed]
            sel = np.flatnonzero(changed)[ok]
            pr[sel] = pp[sel]
            ljr[:, sel] = lj_p[:, ok]
            Lr[sel] = L_p[ok]

        bad = ~np.isfinite(Lr) | ~np.all(np.isfinite(Ur), axis=(1, 2))
        done = _aligned_max_diff(Ur, U_prev) < cfg.u_tol
        iterations[run] = it
        if record_trace:
            ll_trace[run, it] = Lr
            k_trace[run, it] = (pr > 0).sum(axis=1)
        failed[run[bad]] = True
        fail_iteration[run[bad]] = it
        converged[run[done & ~bad]] = True

        stop = bad | done | (it == cfg.max_iter)
        if stop.any():
            idx = run[stop]
            U[idx], V[idx], pi[idx], sigma2[idx] = Ur[stop], Vr[stop], pr[stop], s2r[stop]
            keep = ~stop
            run = run[keep]
            Sr, Ur, Vr, E2r = Sr[keep], Ur[keep], Vr[keep], E2r[keep]
            pr, s2r, ljr = pr[keep], s2r[keep], ljr[:, keep]

    out = BatchFit(U, V, pi, sigma2, iterations, converged, failed, fail_iteration)
    if record_trace:
        out.loglik = ll_trace
        out.k_history = k_trace
    return out


# ---------------------------------------------------------------------------
# single-matrix API


def _one(S):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    return S[None]


def _residual(S, f):
    if f.U.shape[0] != S.shape[0] or f.V.shape[0] != S.shape[1]:
        raise ValueError(f"factor shapes {f.U.shape}, {f.V.shape} do not match S {S.shape}")
    return S - f.U @ f.V.T


def loglik(S, f: FactorPair, m: MoGModel) -> float:
    """Log-likelihood sum_ij log sum_k pi_k N(s_ij - u_i.v_j | 0, sigma_k^2)."""
    S = np.asarray(S, dtype=np.float64)
    E = _residual(S, f)
    val = float(_loglik_flat((E * E).reshape(1, -1), m.pi[None], m.sigma2[None])[0])
    if not np.isfinite(val):
        raise EmError("non-finite log-likelihood")
    return val


def e_step(S, f: FactorPair, m: MoGModel) -> np.ndarray:
    """Responsibilities gamma[i, j, k]; each (i, j) slice sums to one."""
    S = np.asarray(S, dtype=np.float64)
    E = _residual(S, f)
    E2 = (E * E).reshape(1, -1)
    gamma, _ = _responsibilities(_log_joint(E2, m.pi[None], m.sigma2[None]), m.pi[None])
    return np.moveaxis(gamma[:, 0, :], 0, -1).reshape(*S.shape, m.K)


def m_step_mog(S, f: FactorPair, gamma, sigma2_floor=1e-8) -> MoGModel:
    """Closed-form mixture update from responsibilities.

    A component that received no responsibility mass comes back with weight
    zero; :meth:`MoGModel.without` removes it.
    """
    S = np.asarray(S, dtype=np.float64)
    E = _residual(S, f)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[:2] != S.shape:
        raise ValueError("responsibilities do not match S")
    g = np.moveaxis(gamma.reshape(-1, gamma.shape[-1]), -1, 0)[:, None, :]
    pi, s2, _ = _mog_update((E * E).reshape(1, -1), g, sigma2_floor)
    return MoGModel(pi[0], s2[0])


def weights_from(gamma, m: MoGModel) -> np.ndarray:
    """Entry weights w_ij = sqrt(sum_k gamma_ijk / (2 sigma_k^2))."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[-1] != m.K:
        raise ValueError("responsibilities and model disagree on K")
    g = np.moveaxis(gamma.reshape(-1, m.K), -1, 0)[:, None, :]
    return np.sqrt(_weights_sq(g, m.pi[None], m.sigma2[None])[0]).reshape(gamma.shape[:-1])


def weighted_objective(S, W, f: FactorPair) -> float:
    S = np.asarray(S, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    R = W * (S - f.U @ f.V.T)
    return float((R * R).sum())


def weighted_lrmf(S, W, r, init: FactorPair, iters, ridge=1e-8, tol=0.0) -> FactorPair:
    """Alternating weighted least squares for min ||W * (S - U V^T)||_F^2.

    Each half-step solves every row's damped normal equations exactly, so the
    damped objective never increases. Stops after ``iters`` sweeps or once
    the relative objective change drops below ``tol``.
    """
    S = np.asarray(S, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape != S.shape:
        raise ValueError("weight matrix must match S")
    if np.any(W < 0):
        raise ValueError("weights must be non-negative")
    if not r < min(S.shape):
        raise ValueError(f"rank {r} must be below min{S.shape}")
    if init.rank != r:
        raise ValueError("initial factors have the wrong rank")
    W2 = (W * W)[None]
    Sb = S[None]
    U, V = init.U[None], init.V[None]
    prev = _weighted_objective(Sb, W2, U, V)[0]
    for _ in range(iters):
        U, V = _als(Sb, W2, U, V, ridge, 1)
        obj = _weighted_objective(Sb, W2, U, V)[0]
        if tol > 0 and abs(prev - obj) <= tol * max(abs(prev), 1e-300):
            break
        prev = obj
    return FactorPair(U[0], V[0])


def trace_of(res: BatchFit, b: int) -> EmTrace:
    """EmTrace of matrix ``b`` from a batch fitted with ``record_trace=True``."""
    n_it = int(res.iterations[b])
    return EmTrace(loglik=[float(x) for x in res.loglik[b, : n_it + 1]],
                   k_history=[int(k) for k in res.k_history[b, : n_it + 1]],
                   iterations=n_it, converged=bool(res.converged[b]))


def mog_em_fit(S, cfg: EmConfig = EmConfig()):
    """Fit S ~ U V^T under MoG noise; returns (FactorPair, MoGModel, EmTrace).

    Raises :class:`EmError` naming the iteration if the log-likelihood goes
    non-finite.
    """
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise ValueError("S must be finite")
    res = fit_batch(_one(S), cfg, seeds=[cfg.seed], record_trace=True)
    if res.failed[0]:
        raise EmError("non-finite log-likelihood", int(res.fail_iteration[0]))
    trace = trace_of(res, 0)
    live = res.pi[0] > 0
    model = MoGModel(res.pi[0][live] / res.pi[0][live].sum(), res.sigma2[0][live])
    return FactorPair(res.U[0], res.V[0]), model, trace
