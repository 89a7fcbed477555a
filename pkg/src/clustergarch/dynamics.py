"""Score-driven VAR(1) recursions for dynamic correlation matrices.

The state is ``gamma_t = vecl(log C_t)`` for an unrestricted correlation
matrix, or the free coordinates of ``eta_t`` for a block correlation matrix.
The update is

    state_{t+1} = (1 - beta) * mu + beta * state_t + alpha * score_t / info_t

with diagonal ``alpha`` and ``beta`` and the information diagonal as scaling.
Block models run through a compiled kernel; unrestricted models use the
reference score functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _blockkernel as bk
from . import corrparam as cp
from . import distributions as dk
from . import matrixkit as mk
from . import scores as sc
from .errors import (ClusterGarchError, ConvergenceFailure, FilterFailure, InvalidInput, InvalidSpec,
                     SingularMatrix)

STATE_BOUND = 50.0
KERNEL_CODES = {dk.GAUSSIAN: bk.GAUSS, dk.MVT: bk.MVT, dk.CLUSTER: bk.CLUSTER, dk.HETERO: bk.HETERO,
                dk.CANONICAL: bk.CANON}


@dataclass(frozen=True)
class VarParams:
    mu: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        arrays = [np.atleast_1d(np.asarray(getattr(self, k), dtype=float)).copy() for k in ("mu", "beta", "alpha")]
        d = arrays[0].size
        for name, arr in zip(("mu", "beta", "alpha"), arrays):
            if arr.ndim != 1:
                raise InvalidInput(f"{name} must be a vector")
            if arr.size == 1 and d > 1:
                arr = np.full(d, arr[0])
            if arr.size != d:
                raise InvalidInput(f"{name} has length {arr.size}, expected {d}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.mu.size

    @classmethod
    def scalar(cls, mu, beta: float, alpha: float) -> "VarParams":
        """Common persistence and loading across coordinates."""
        mu = np.asarray(mu, dtype=float)
        return cls(mu, np.full(mu.size, float(beta)), np.full(mu.size, float(alpha)))

    def stationary(self) -> bool:
        return bool(np.all(np.abs(self.beta) < 1.0))


@dataclass(frozen=True)
class FilterOutput:
    """Filtered states (``path[t]`` is the state used for observation t)."""

    path: np.ndarray
    per_t: np.ndarray
    final_state: np.ndarray
    block_rho: np.ndarray | None = None

    @property
    def loglik_total(self) -> float:
        return float(np.sum(self.per_t))

    @property
    def T(self) -> int:
        return self.per_t.size


def _full_eta(state: np.ndarray, spec: cp.BlockSpec) -> np.ndarray:
    eta = np.zeros(spec.eta_dim)
    eta[spec.free_mask] = state
    return eta


def state_correlation(state: np.ndarray, kind: sc.ModelKind):
    """Correlation object for a state: dense matrix or ``CanonicalFactors``."""
    if kind.is_block:
        return cp.A_of_eta(_full_eta(state, kind.block), kind.block)
    return cp.corr_of_gamma(state)


def correlation_path(out: FilterOutput, kind: sc.ModelKind) -> np.ndarray:
    """``T x n x n`` array of filtered correlation matrices."""
    mats = []
    for state in out.path:
        c = state_correlation(state, kind)
        mats.append(cp.canonical_compose(c) if kind.is_block else c)
    return np.stack(mats)


def block_inputs(z: np.ndarray, spec: cp.BlockSpec):
    """Rotated data for the compiled filter: block averages, within sums of
    squares and within-block deviations."""
    z = np.asarray(z, dtype=float)
    y = z @ cp.build_Q(spec)
    wl = cp.within_labels(spec)
    yw = y[:, spec.K:]
    ss = np.zeros((z.shape[0], spec.K))
    for k in range(spec.K):
        ss[:, k] = np.sum(yw[:, wl == k] ** 2, axis=1)
    lab = spec.labels
    means = np.stack([z[:, lab == k].mean(axis=1) for k in range(spec.K)], axis=1)
    return np.ascontiguousarray(y[:, : spec.K]), ss, np.ascontiguousarray(z - means[:, lab])


def kernel_dofs(kind: sc.ModelKind) -> np.ndarray:
    dist = kind.distribution
    need = dk.n_dofs(dist.tag, kind.block.n, kind.block, dist.partition)
    if len(dist.dofs) != need:
        raise InvalidSpec(f"{dist.tag} needs {need} degrees of freedom, got {len(dist.dofs)}")
    return np.asarray(dist.dofs if dist.dofs else (0.0,), dtype=float)


def _check_inputs(z, kind: sc.ModelKind, params: VarParams) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[0] < 1:
        raise InvalidInput("expected a T x n panel with T >= 1")
    if not np.all(np.isfinite(z)):
        raise InvalidInput("panel has non-finite entries")
    n = z.shape[1]
    if kind.block is not None and kind.block.n != n:
        raise InvalidSpec(f"block spec covers {kind.block.n} series, panel has {n}")
    d = kind.state_dim(n)
    if params.d != d:
        raise InvalidSpec(f"parameters have dimension {params.d}, model state has {d}")
    return z


_STATUS = {bk.SOLVE_FAIL: "eta recursion did not converge", bk.EXPLODED: "state left the explosion bound"}


def _block_filter(z, kind: sc.ModelKind, params: VarParams, tol: float, max_iter: int) -> FilterOutput:
    spec = kind.block
    y0, ss, dev = block_inputs(z, spec)
    per_t, path, rho, final, t_stop, status = bk.block_filter(
        y0, ss, dev, spec.sizes_array.astype(float), spec.labels.astype(np.int64),
        np.flatnonzero(spec.free_mask), params.mu, params.beta, params.alpha,
        KERNEL_CODES[kind.distribution.tag], kernel_dofs(kind), tol, max_iter, STATE_BOUND, spec.eta_dim)
    if status != bk.OK:
        raise FilterFailure(f"{_STATUS.get(status, 'filter failure')} at t={t_stop}", t=int(t_stop), state=final)
    return FilterOutput(path, per_t, final, rho)


def _general_filter(z, kind: sc.ModelKind, params: VarParams) -> FilterOutput:
    t_len = z.shape[0]
    dist = kind.distribution
    state = params.mu.copy()
    path = np.empty((t_len, params.d))
    per_t = np.empty(t_len)
    x = None
    prev_scale = np.ones(params.d)
    for t in range(t_len):
        path[t] = state
        try:
            sol = cp.solve_gamma(state, x0=x)
        except (ConvergenceFailure, SingularMatrix) as exc:
            raise FilterFailure(f"correlation map failed at t={t}: {exc}", t=t, state=state) from exc
        x = sol.log_corr.diagonal().copy()
        c = sol.corr
        per_t[t] = float(dk.loglik(z[t], c, dist, kind.block))
        r = sc.score(z[t], c, kind)
        scale = r.scale
        bad = ~(scale >= sc.DEGENERATE_SCALE)
        scale[bad] = prev_scale[bad]
        prev_scale = scale
        state = (1.0 - params.beta) * params.mu + params.beta * state + params.alpha * r.score / scale
        if not np.all(np.abs(state) <= STATE_BOUND):
            raise FilterFailure(f"state left the explosion bound at t={t}", t=t, state=state)
    return FilterOutput(path, per_t, state)


def run_filter(z, kind: sc.ModelKind, params: VarParams, tol: float = cp.ETA_TOL,
               max_iter: int = 100) -> FilterOutput:
    """Filter a ``T x n`` panel of standardized returns.

    The state starts at ``mu``. Raises ``FilterFailure`` carrying ``t`` and
    the offending state if the correlation map fails or the state explodes.
    """
    z = _check_inputs(z, kind, params)
    if kind.is_block:
        return _block_filter(z, kind, params, tol, max_iter)
    return _general_filter(z, kind, params)


# ------------------------------------------------------------------ targeting


def sample_correlation(z) -> np.ndarray:
    """Uncentred second-moment matrix rescaled to unit diagonal."""
    z = np.asarray(z, dtype=float)
    s = z.T @ z / z.shape[0]
    d = np.sqrt(np.diag(s))
    if np.any(d <= 0):
        raise SingularMatrix("a series has zero sample variance")
    out = s / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return out


def block_average(c: np.ndarray, spec: cp.BlockSpec) -> cp.CanonicalFactors:
    """Canonical factors of the block-averaged correlation matrix.

    ``A = Q0' C Q0`` and ``lam_k = (n_k - A_kk) / (n_k - 1)``, which equals one
    minus the average within-block correlation.
    """
    q0 = cp.build_Q(spec)[:, : spec.K]
    a = mk.symmetrize(q0.T @ c @ q0)
    sizes = spec.sizes_array
    lam = np.where(spec.singleton, 1.0, (sizes - np.diag(a)) / np.maximum(sizes - 1.0, 1.0))
    if np.any(lam <= 0) or np.linalg.eigvalsh(a)[0] <= 0:
        raise SingularMatrix("sample block correlation matrix is not positive definite")
    return cp.CanonicalFactors(a, lam, spec)


def target_mu(z, spec: cp.BlockSpec | None = None) -> np.ndarray:
    """Correlation-targeting estimate of the unconditional state mean."""
    z = np.asarray(z, dtype=float)
    t_len, n = z.shape
    if t_len <= (spec.K if spec is not None else n):
        raise InvalidInput("not enough observations for a sample correlation")
    c = sample_correlation(z)
    if spec is None:
        if np.linalg.eigvalsh(c)[0] <= 1e-12:
            raise SingularMatrix("sample correlation is rank deficient")
        return cp.gamma_of_corr(c)
    return cp.eta_of_block(block_average(c, spec))[spec.free_mask]


# ----------------------------------------------------------------- simulation


@dataclass(frozen=True)
class Simulation:
    z: np.ndarray
    path: np.ndarray


def simulate(kind: sc.ModelKind, params: VarParams, T: int, seed=None, n: int | None = None) -> Simulation:
    """Draw ``T`` observations from the model, advancing the state with the
    realized scaled score. Deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    dist = kind.distribution
    if kind.is_block:
        n = kind.block.n
    elif n is None:
        n = int(round((1 + np.sqrt(1 + 8 * params.d)) / 2))
    if kind.state_dim(n) != params.d:
        raise InvalidSpec(f"parameters have dimension {params.d}, model state has {kind.state_dim(n)}")
    state = params.mu.copy()
    path = np.empty((T, params.d))
    zs = np.empty((T, n))
    prev_scale = np.ones(params.d)
    if kind.is_block:
        spec = kind.block
        free = np.flatnonzero(spec.free_mask)
        sizes = spec.sizes_array.astype(float)
        lab = spec.labels.astype(np.int64)
        code = KERNEL_CODES[dist.tag]
        dofs = kernel_dofs(kind)
        y = np.zeros(spec.K)
    for t in range(T):
        path[t] = state
        c = state_correlation(state, kind)
        zt = dk.sample(dist, c, 1, seed=rng, block=kind.block)
        zs[t] = zt[0]
        if kind.is_block:
            y0, ss, dev = block_inputs(zt, spec)
            _, grad, scale, y, _, status = bk.step_eval(_full_eta(state, spec), y, sizes, lab, free, y0[0], ss[0],
                                                        dev[0], code, dofs, cp.ETA_TOL, 100)
            if status != bk.OK:
                raise FilterFailure(f"eta recursion failed at t={t}", t=t, state=state)
        else:
            r = sc.score(zt[0], c, kind)
            grad, scale = r.score, r.scale
        scale = np.where(scale >= sc.DEGENERATE_SCALE, scale, prev_scale)
        prev_scale = scale
        state = (1.0 - params.beta) * params.mu + params.beta * state + params.alpha * grad / scale
        if not np.all(np.abs(state) <= STATE_BOUND):
            raise FilterFailure(f"simulated state left the explosion bound at t={t}", t=t, state=state)
    return Simulation(zs, path)


def static_loglik(z, kind: sc.ModelKind, state: np.ndarray) -> float:
    """Log-likelihood of the panel with the correlation fixed at one state."""
    c = state_correlation(np.asarray(state, dtype=float), kind)
    return float(np.sum(dk.loglik(np.asarray(z, dtype=float), c, kind.distribution, kind.block)))


__all__ = ["VarParams", "FilterOutput", "run_filter", "target_mu", "simulate", "Simulation", "correlation_path",
           "state_correlation", "sample_correlation", "block_average", "static_loglik", "block_inputs",
           "ClusterGarchError"]
