"""Correlation parametrizations.

Two coordinate systems for correlation matrices are provided:

* ``gamma = vecl(log C)`` for an unrestricted ``n x n`` correlation matrix.
* ``eta = vech(C_tilde)`` for a block correlation matrix, where ``C_tilde`` is
  the ``K x K`` condensed log-correlation matrix holding the distinct values of
  ``log C``.

Block matrices are handled through their canonical form ``C = Q D Q'`` with a
``K x K`` core ``A`` and within-block eigenvalues ``lam``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

from . import matrixkit as mk
from .errors import (
    ConvergenceFailure,
    InvalidBlockCorrelation,
    InvalidInput,
    NotBlockStructured,
    SingularMatrix,
)

DIAG_TOL = 1e-12
GAMMA_MAX_ITER = 200
ETA_TOL = 1e-12
ETA_MAX_ITER = 500
ETA_DIVERGENCE_RUN = 10
BLOCK_TOL = 1e-10


def check_correlation(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidInput(f"correlation matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidInput("correlation matrix has non-finite entries")
    if np.max(np.abs(c - c.T)) > 1e-10:
        raise InvalidInput("correlation matrix is not symmetric")
    if np.max(np.abs(np.diag(c) - 1.0)) > 1e-10:
        raise InvalidInput("correlation matrix must have a unit diagonal")
    low = np.linalg.eigvalsh(c)[0]
    if low <= 1e-12:
        raise SingularMatrix(f"correlation matrix is not positive definite (min eig {low:.3e})", eigenvalue=low)
    return mk.symmetrize(c)


# ------------------------------------------------------------- unrestricted C


def gamma_of_corr(c: np.ndarray) -> np.ndarray:
    return mk.vecl(mk.logm(check_correlation(c)))


@dataclass(frozen=True)
class GammaSolution:
    corr: np.ndarray
    log_corr: np.ndarray
    log_spec: mk.Spectral
    iterations: int


def _exp_diag_jacobian(spec: mk.Spectral) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal of ``exp(L)`` and its derivative with respect to ``diag(L)``."""
    v = spec.vectors
    delta = mk.unvec(mk.divided_differences(spec.values), v.shape[0])
    outer = v[:, :, None] * v[:, None, :]
    jac = np.einsum("kab,ab,jab->kj", outer, delta, outer)
    return np.einsum("ij,j,ij->i", v, np.exp(spec.values), v), jac


def _newton_diagonal(base: np.ndarray, residual, start: np.ndarray, tol: float, max_iter: int,
                     method: str, what: str):
    """Solve ``residual(y) = 0`` for a diagonal shift ``y`` of the symmetric matrix ``base``.

    ``residual(y, spec)`` returns ``(F, J)`` where the plain fixed-point update is
    ``y - F`` and ``J`` the Jacobian of F. ``method='newton'`` takes the
    Jacobian-preconditioned step with a fallback to the plain step whenever the
    residual fails to shrink; ``method='picard'`` iterates the plain update only.
    Returns ``(y, spectral of base + diag(y), iterations)``.
    """
    if method not in ("newton", "picard"):
        raise InvalidInput(f"unknown solver method {method!r}")
    m = base.copy()
    di = np.diag_indices(base.shape[0])
    d0 = base.diagonal().copy()

    def evaluate(y):
        m[di] = d0 + y
        spec = mk.spectral(m)
        f, jac = residual(y, spec)
        return spec, f, jac

    y = np.array(start, dtype=float)
    spec, f, jac = evaluate(y)
    size = float(np.max(np.abs(f))) if f.size else 0.0
    prev, rising = size, 0
    for it in range(1, max_iter + 1):
        if size < tol:
            return y, spec, it
        step = -f
        if method == "newton":
            try:
                step = -np.linalg.solve(jac, f)
            except np.linalg.LinAlgError:
                step = -f
        cand = y + step
        c_spec, c_f, c_jac = evaluate(cand)
        c_size = float(np.max(np.abs(c_f)))
        if method == "newton" and not c_size < size:
            cand = y - f
            c_spec, c_f, c_jac = evaluate(cand)
            c_size = float(np.max(np.abs(c_f)))
        if not np.isfinite(c_size):
            raise ConvergenceFailure(f"{what} produced non-finite values", residual=c_size, iterations=it)
        rising = rising + 1 if c_size > prev else 0
        if rising >= ETA_DIVERGENCE_RUN:
            raise ConvergenceFailure(f"{what} diverging", residual=c_size, iterations=it)
        prev = c_size
        y, spec, f, jac, size = cand, c_spec, c_f, c_jac, c_size
    if size < tol:
        return y, spec, max_iter
    raise ConvergenceFailure(f"{what} did not converge (residual {size:.3e})",
                             residual=size, iterations=max_iter)


def solve_gamma(g: np.ndarray, x0: np.ndarray | None = None, tol: float = DIAG_TOL,
                max_iter: int = GAMMA_MAX_ITER, method: str = "newton") -> GammaSolution:
    """Find the diagonal of ``log C`` such that ``exp`` of it has a unit diagonal.

    The plain update is ``x <- x - log diag(exp S(x))``.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise InvalidInput("gamma has non-finite entries")
    n = mk.dim_from_vecl(g.size)

    def residual(x, spec):
        diag, jac = _exp_diag_jacobian(spec)
        if np.any(diag <= 0):
            return np.full(n, np.inf), jac
        return np.log(diag), jac / diag[:, None]

    x, spec, it = _newton_diagonal(mk.unvecl(g), residual, np.zeros(n) if x0 is None else x0,
                                   np.log1p(tol), max_iter, method, "corr_of_gamma")
    c = spec.apply(np.exp)
    np.fill_diagonal(c, 1.0)
    return GammaSolution(c, mk.unvecl(g, diagonal=x), spec, it)


def corr_of_gamma(g: np.ndarray) -> np.ndarray:
    return solve_gamma(g).corr


# ------------------------------------------------------------------ BlockSpec


@dataclass(frozen=True)
class BlockSpec:
    """Ordered cluster sizes; assets of cluster k occupy a contiguous range."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise InvalidInput(f"cluster sizes must be positive, got {self.sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @cached_property
    def sizes_array(self) -> np.ndarray:
        return np.array(self.sizes, dtype=float)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @cached_property
    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.K), self.sizes)

    @cached_property
    def singleton(self) -> np.ndarray:
        return np.array(self.sizes) == 1

    @cached_property
    def eta_dim(self) -> int:
        return self.K * (self.K + 1) // 2

    @cached_property
    def free_mask(self) -> np.ndarray:
        """Coordinates of eta that carry correlation content."""
        r, c = mk.lower_indices(self.K, strict=False)
        return ~((r == c) & self.singleton[r])

    @property
    def n_free(self) -> int:
        return int(self.free_mask.sum())

    def block(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    @classmethod
    def from_labels(cls, labels) -> "BlockSpec":
        """Build from per-asset cluster labels that are already contiguous."""
        labels = list(labels)
        sizes, seen = [], []
        for lab in labels:
            if seen and seen[-1] == lab:
                sizes[-1] += 1
            else:
                if lab in seen:
                    raise InvalidInput(f"cluster {lab!r} is not contiguous; sort assets by cluster first")
                seen.append(lab)
                sizes.append(1)
        return cls(tuple(sizes))


def _gram_schmidt(columns: np.ndarray) -> np.ndarray:
    out = np.zeros_like(columns)
    for j in range(columns.shape[1]):
        v = columns[:, j].copy()
        for i in range(j):
            v -= (out[:, i] @ v) * out[:, i]
        for i in range(j):
            v -= (out[:, i] @ v) * out[:, i]
        out[:, j] = v / np.linalg.norm(v)
    return out


@lru_cache(maxsize=None)
def _within_basis(m: int) -> np.ndarray:
    """Orthonormal ``m x m`` basis whose first column is ``1/sqrt(m)``."""
    start = np.concatenate([np.ones((m, 1)), np.eye(m)[:, : m - 1]], axis=1)
    basis = _gram_schmidt(start)
    basis.setflags(write=False)
    return basis


@lru_cache(maxsize=None)
def build_Q(spec: BlockSpec) -> np.ndarray:
    """Rotation whose first K columns are block averages, followed by each
    block's orthogonal complement."""
    q = np.zeros((spec.n, spec.n))
    col = spec.K
    for k, m in enumerate(spec.sizes):
        rows = spec.block(k)
        basis = _within_basis(m)
        q[rows, k] = basis[:, 0]
        q[rows, col : col + m - 1] = basis[:, 1:]
        col += m - 1
    q.setflags(write=False)
    return q


# ------------------------------------------------------------ canonical factors


@dataclass(frozen=True)
class CanonicalFactors:
    """Core ``A`` and within-block eigenvalues ``lam`` of ``C = Q D Q'``."""

    A: np.ndarray
    lam: np.ndarray
    spec: BlockSpec
    log_spec: mk.Spectral | None = field(default=None, compare=False, repr=False)

    @cached_property
    def A_spectral(self) -> mk.Spectral:
        """Spectral factorization of ``log A``; eigenvectors shared with ``A``."""
        if self.log_spec is not None:
            return self.log_spec
        s = mk.spectral(self.A)
        if np.any(s.values <= 0):
            raise InvalidBlockCorrelation("core matrix A is not positive definite")
        return mk.Spectral(s.vectors, np.log(s.values))

    def A_power(self, p: float) -> np.ndarray:
        return self.A_spectral.apply(lambda w: np.exp(p * w))

    def logdet(self) -> float:
        sizes = np.array(self.spec.sizes)
        return float(np.sum(self.A_spectral.values) + np.sum((sizes - 1) * np.log(self.lam)))


def block_corr(rho: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """Block correlation matrix from the ``K x K`` matrix of block correlations."""
    rho = np.asarray(rho, dtype=float)
    lab = spec.labels
    c = rho[np.ix_(lab, lab)].copy()
    np.fill_diagonal(c, 1.0)
    return c


def block_values(c: np.ndarray, spec: BlockSpec, tol: float = BLOCK_TOL) -> np.ndarray:
    """Distinct block correlations; raises if ``c`` is not block constant."""
    c = np.asarray(c, dtype=float)
    if c.shape != (spec.n, spec.n):
        raise InvalidInput(f"matrix shape {c.shape} does not match block spec n={spec.n}")
    rho = np.eye(spec.K)
    for k in range(spec.K):
        for l in range(k + 1):
            blk = c[spec.block(k), spec.block(l)]
            if k == l:
                if spec.sizes[k] == 1:
                    continue
                vals = blk[~np.eye(spec.sizes[k], dtype=bool)]
            else:
                vals = blk.ravel()
            if np.max(vals) - np.min(vals) > tol:
                raise NotBlockStructured(f"block ({k}, {l}) is not constant", block=(k, l))
            rho[k, l] = rho[l, k] = float(np.mean(vals))
        if np.max(np.abs(np.diag(c)[spec.block(k)] - 1.0)) > tol:
            raise NotBlockStructured(f"block ({k}, {k}) diagonal is not 1", block=(k, k))
    return rho


def factors_from_rho(rho: np.ndarray, spec: BlockSpec) -> CanonicalFactors:
    sizes = spec.sizes_array
    root = np.sqrt(sizes)
    a = rho * np.outer(root, root)
    a[np.diag_indices(spec.K)] = 1.0 + (sizes - 1.0) * np.diag(rho)
    lam = np.where(spec.singleton, 1.0, 1.0 - np.diag(rho))
    if np.any(lam <= 0):
        raise InvalidBlockCorrelation(f"within-block eigenvalue not positive: {lam}")
    return CanonicalFactors(a, lam, spec)


def canonical_decompose(c: np.ndarray, spec: BlockSpec) -> CanonicalFactors:
    return factors_from_rho(block_values(c, spec), spec)


def rotated_correlation(f: CanonicalFactors) -> np.ndarray:
    spec = f.spec
    d = np.zeros((spec.n, spec.n))
    d[: spec.K, : spec.K] = f.A
    within = np.repeat(f.lam, np.array(spec.sizes) - 1)
    d[np.arange(spec.K, spec.n), np.arange(spec.K, spec.n)] = within
    return d


def canonical_compose(f: CanonicalFactors) -> np.ndarray:
    q = build_Q(f.spec)
    c = q @ rotated_correlation(f) @ q.T
    c = mk.symmetrize(c)
    np.fill_diagonal(c, 1.0)
    return c


def block_sqrt(f: CanonicalFactors, power: float = 0.5) -> np.ndarray:
    """``C^p = Q D^p Q'`` computed from the canonical factors."""
    spec = f.spec
    q = build_Q(spec)
    d = np.zeros((spec.n, spec.n))
    d[: spec.K, : spec.K] = f.A_power(power)
    within = np.repeat(f.lam ** power, np.array(spec.sizes) - 1)
    d[np.arange(spec.K, spec.n), np.arange(spec.K, spec.n)] = within
    return mk.symmetrize(q @ d @ q.T)


# --------------------------------------------------------------- rotation of Z


@dataclass(frozen=True)
class Rotation:
    """Canonical coordinates of one or many observations.

    ``y0``/``x0`` have trailing dimension K; ``y_within`` and ``x_within`` hold
    the within-block coordinates, concatenated in block order.
    """

    y0: np.ndarray
    y_within: np.ndarray
    x0: np.ndarray
    x_within: np.ndarray
    spec: BlockSpec

    def within(self, k: int, scaled: bool = True) -> np.ndarray:
        arr = self.x_within if scaled else self.y_within
        off = int(np.sum(np.array(self.spec.sizes[:k]) - 1))
        return arr[..., off : off + self.spec.sizes[k] - 1]

    def within_sumsq(self, scaled: bool = True) -> np.ndarray:
        return np.stack([np.sum(self.within(k, scaled) ** 2, axis=-1) for k in range(self.spec.K)], axis=-1)


@lru_cache(maxsize=None)
def within_labels(spec: BlockSpec) -> np.ndarray:
    return np.repeat(np.arange(spec.K), np.array(spec.sizes) - 1)


def rotate_canonical(z: np.ndarray, f: CanonicalFactors) -> Rotation:
    z = np.asarray(z, dtype=float)
    spec = f.spec
    if z.shape[-1] != spec.n:
        raise InvalidInput(f"observation length {z.shape[-1]} does not match n={spec.n}")
    y = z @ build_Q(spec)
    y0, yw = y[..., : spec.K], y[..., spec.K :]
    x0 = y0 @ f.A_power(-0.5)
    xw = yw / np.sqrt(np.repeat(f.lam, np.array(spec.sizes) - 1))
    return Rotation(y0, yw, x0, xw, spec)


def block_quadform(z: np.ndarray, f: CanonicalFactors) -> np.ndarray:
    """``Z' C^{-1} Z`` through the canonical identity."""
    r = rotate_canonical(z, f)
    return np.sum(r.x0**2, axis=-1) + np.sum(r.x_within**2, axis=-1)


# ------------------------------------------------------------------ eta <-> A


def eta_of_block(f: CanonicalFactors) -> np.ndarray:
    spec = f.spec
    root = np.sqrt(spec.sizes_array)
    s = f.A_spectral
    w = s.apply(lambda v: v) - np.diag(np.log(f.lam))
    condensed = w / np.outer(root, root)
    eta = mk.vech(condensed)
    eta[~spec.free_mask] = 0.0
    return eta


@dataclass(frozen=True)
class EtaSolution:
    factors: CanonicalFactors
    y: np.ndarray
    iterations: int


def _scaled_log_core(eta: np.ndarray, spec: BlockSpec) -> np.ndarray:
    sizes = spec.sizes_array
    condensed = mk.unvech(eta)
    root = np.sqrt(sizes)
    a = condensed * np.outer(root, root)
    a[np.diag_indices(spec.K)] = np.diag(condensed) * (sizes - 1.0)
    return a


def solve_eta(eta: np.ndarray, spec: BlockSpec, y0: np.ndarray | None = None,
              tol: float = ETA_TOL, max_iter: int = ETA_MAX_ITER, method: str = "newton") -> EtaSolution:
    """Recover ``(A, lam)`` from ``eta`` by the diagonal fixed-point recursion

    ``y_k <- y_k + log n_k - log([exp(A_tilde + diag y)]_kk + (n_k - 1) exp(y_k - c_kk))``.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.size != spec.eta_dim:
        raise InvalidInput(f"eta has length {eta.size}, expected {spec.eta_dim}")
    if not np.all(np.isfinite(eta)):
        raise InvalidInput("eta has non-finite entries")
    sizes = spec.sizes_array
    c_diag = mk.unvech(eta).diagonal().copy()
    log_n = np.log(sizes)

    def residual(y, s):
        diag, jac = _exp_diag_jacobian(s)
        within = (sizes - 1.0) * np.exp(y - c_diag)
        total = diag + within
        return np.log(total) - log_n, (jac + np.diag(within)) / total[:, None]

    y, s, it = _newton_diagonal(_scaled_log_core(eta, spec), residual, np.zeros(spec.K) if y0 is None else y0,
                                tol, max_iter, method, "eta recursion")
    a = s.apply(np.exp)
    # equals (n_k - A_kk) / (n_k - 1) at the fixed point without the cancellation
    lam = np.where(spec.singleton, 1.0, np.exp(y - c_diag))
    if np.any(lam <= 0):
        raise InvalidBlockCorrelation(f"within-block eigenvalue not positive: {lam}")
    return EtaSolution(CanonicalFactors(a, lam, spec, log_spec=s), y, it)


def A_of_eta(eta: np.ndarray, spec: BlockSpec) -> CanonicalFactors:
    return solve_eta(eta, spec).factors


def corr_of_eta(eta: np.ndarray, spec: BlockSpec) -> np.ndarray:
    return canonical_compose(A_of_eta(eta, spec))


@lru_cache(maxsize=None)
def expansion_matrix(spec: BlockSpec) -> sp.csr_matrix:
    """0/1 matrix B with ``gamma = B eta``; one nonzero per row."""
    r, c = mk.lower_indices(spec.n, strict=True)
    lab = spec.labels
    hi = np.maximum(lab[r], lab[c])
    lo = np.minimum(lab[r], lab[c])
    index = np.zeros((spec.K, spec.K), dtype=int)
    vr, vc = mk.lower_indices(spec.K, strict=False)
    index[vr, vc] = np.arange(vr.size)
    cols = index[hi, lo]
    return sp.csr_matrix((np.ones(r.size), (np.arange(r.size), cols)), shape=(r.size, spec.eta_dim))


def expand_gamma(eta: np.ndarray, spec: BlockSpec) -> np.ndarray:
    return expansion_matrix(spec) @ np.asarray(eta, dtype=float)


def pi_A(f: CanonicalFactors) -> np.ndarray:
    """``d vec(A) / d eta'`` (``K^2 x K(K+1)/2``); singleton diagonal columns are zero."""
    spec = f.spec
    k = spec.K
    sizes = spec.sizes_array
    gam = mk.exp_frechet_from_log(f.A_spectral)
    diag_pos = np.arange(k) * (k + 1)
    phi = np.diag(f.lam * (sizes - 1.0))
    g_d = gam[diag_pos, :]
    correction = gam[:, diag_pos] @ np.linalg.solve(phi + g_d[:, diag_pos], g_d)
    root = np.sqrt(sizes)
    scale = mk.vec(np.outer(root, root))
    dup = mk.duplication_matrix(k).toarray() * scale[:, None]
    dup[:, ~spec.free_mask] = 0.0
    return (gam - correction) @ dup
