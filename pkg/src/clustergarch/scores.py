"""Closed-form scores and Fisher information for correlation parameters.

Scores are derivatives of the log density with respect to ``gamma`` (an
unrestricted correlation matrix) or the free coordinates of ``eta`` (a block
correlation matrix). Every function accepts a single observation of shape
``(n,)`` or a batch of shape ``(N, n)``; the information matrix depends on the
state only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corrparam as cp
from . import distributions as dk
from . import matrixkit as mk
from .errors import DegenerateInformation, InvalidSpec

DEGENERATE_SCALE = 1e-12


@dataclass(frozen=True)
class ScoreResult:
    score: np.ndarray
    information: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.diag(self.information).copy()


@dataclass(frozen=True)
class ModelKind:
    """Correlation structure plus distribution.

    ``structure`` is ``"general"`` (state gamma) or ``"block"`` (state eta).
    ``block`` holds the clusters; it is required for block structures and for
    ClusterT/CanonicalBlockT groupings on a general structure.
    """

    distribution: dk.ModelDistribution
    block: cp.BlockSpec | None = None
    structure: str = "block"

    def __post_init__(self):
        if self.structure not in ("general", "block"):
            raise InvalidSpec(f"unknown structure {self.structure!r}")
        if self.structure == "block" and self.block is None:
            raise InvalidSpec("block structure needs a BlockSpec")
        if self.distribution.tag == dk.CANONICAL and self.block is None:
            raise InvalidSpec("CanonicalBlockT needs a BlockSpec")

    @property
    def is_block(self) -> bool:
        return self.structure == "block"

    def state_dim(self, n: int | None = None) -> int:
        if self.is_block:
            return self.block.n_free
        n = self.block.n if n is None else n
        return n * (n - 1) // 2


def scaled_innovation(r: ScoreResult) -> np.ndarray:
    """Score divided elementwise by the diagonal of the information."""
    scale = r.scale
    if np.any(scale < DEGENERATE_SCALE):
        raise DegenerateInformation(f"information diagonal not positive: {scale.min():.3e}")
    return r.score / scale


def _outer_vec(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rows of ``vec(a b')`` for row-batched vectors (column-major vec)."""
    return (b[..., :, None] * a[..., None, :]).reshape(a.shape[:-1] + (a.shape[-1] * b.shape[-1],))


def _t_weights(quad, nu, m):
    if nu is None or np.isinf(nu):
        return np.ones_like(quad), 1.0, 1.0
    w = (nu + m) / (nu - 2.0 + quad)
    phi = (nu + m) / (nu + m + 2.0)
    return w, phi, phi * nu / (nu - 2.0)


# --------------------------------------------------------------- general C


def score_general_t(z, c: np.ndarray, nu: float | None = None) -> ScoreResult:
    """Multivariate t (``nu``) or Gaussian (``nu=None``) score w.r.t. gamma."""
    z = np.asarray(z, dtype=float)
    n = c.shape[0]
    s = mk.spectral(c)
    c_inv = s.apply(lambda w: 1.0 / w)
    m = mk.m_matrix(c)
    u = z @ c_inv
    w, phi, _ = _t_weights(np.sum(u * z, axis=-1), nu, n)
    vec_cinv = mk.vec(c_inv)
    grad = 0.5 * (np.asarray(w)[..., None] * _outer_vec(u, u) - vec_cinv) @ m
    h_n = np.eye(n * n) + mk.commutation_matrix(n).toarray()
    core = phi * np.kron(c_inv, c_inv) @ h_n + (phi - 1.0) * np.outer(vec_cinv, vec_cinv)
    info = 0.25 * m.T @ core @ m
    return ScoreResult(grad, mk.symmetrize(info))


def _group_moments(spec: dk.ConvolutionSpec):
    for sl, nu, mg in zip(spec.slices(), spec.dofs, spec.partition):
        if mg == 0:
            continue
        phi = (nu + mg) / (nu + mg + 2.0)
        yield sl, nu, mg, phi, phi * nu / (nu - 2.0)


def convt_fourth_moment_operator(spec: dk.ConvolutionSpec) -> np.ndarray:
    """Fourth-moment operator of the convolution-t: the commutation matrix plus one
    Kronecker term per group of the rotation."""
    n = spec.n
    p = spec.P
    k_n = mk.commutation_matrix(n).toarray()
    eye = np.eye(n)
    out = k_n.copy()
    for sl, _, _, phi, psi in _group_moments(spec):
        j = p[:, sl] @ p[:, sl].T
        jj = np.kron(j, j)
        vj = mk.vec(j)
        out += psi * np.kron(eye, j) + (phi - psi) * jj + (phi - 1.0) * (jj @ k_n + np.outer(vj, vj))
    return out


def score_general_convt(z, c: np.ndarray, spec: dk.ConvolutionSpec) -> ScoreResult:
    """Convolution-t score w.r.t. gamma."""
    z = np.asarray(z, dtype=float)
    n = c.shape[0]
    if spec.n != n:
        raise InvalidSpec(f"partition sums to {spec.n}, matrix is {n}")
    s = mk.spectral(c)
    inv_root = s.apply(lambda w: w**-0.5)
    omega = mk.omega_matrix(c)
    m = mk.m_matrix(c)
    u = z @ inv_root
    v = u @ spec.P
    weighted = np.zeros_like(u)
    for sl, nu, mg in zip(spec.slices(), spec.dofs, spec.partition):
        if mg == 0:
            continue
        vg = v[..., sl]
        wg = (nu + mg) / (nu - 2.0 + np.sum(vg**2, axis=-1))
        weighted = weighted + (wg[..., None] * vg) @ spec.P[:, sl].T
    om = omega @ m
    grad = (_outer_vec(weighted, u) - mk.vec(np.eye(n))) @ om
    info = om.T @ convt_fourth_moment_operator(spec) @ om
    return ScoreResult(grad, mk.symmetrize(info))


# ----------------------------------------------------------------- block C


@dataclass(frozen=True)
class BlockPieces:
    """State-dependent matrices shared by the block scores."""

    factors: cp.CanonicalFactors
    a_inv: np.ndarray
    a_inv_half_kron: np.ndarray
    omega: np.ndarray
    pi: np.ndarray

    @classmethod
    def of(cls, f: cp.CanonicalFactors) -> "BlockPieces":
        s = f.A_spectral
        a_inv = s.apply(lambda l: np.exp(-l))
        a_inv_half = s.apply(lambda l: np.exp(-0.5 * l))
        root = np.exp(0.5 * s.values)
        qq = mk.kron_basis(s.vectors)
        diag = mk.vec((1.0 / root)[:, None] / (root[:, None] + root[None, :]))
        omega = (qq * diag) @ qq.T
        pi = cp.pi_A(f)[:, f.spec.free_mask]
        return cls(f, a_inv, np.kron(a_inv_half, a_inv_half), omega, pi)

    @property
    def K(self) -> int:
        return self.factors.spec.K


def _diag_embed(s: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(s.shape[:-1] + (k * k,))
    out[..., np.arange(k) * (k + 1)] = s
    return out


def _within_terms(f: cp.CanonicalFactors):
    sizes = f.spec.sizes_array
    multi = ~f.spec.singleton
    m = np.where(multi, sizes - 1.0, 1.0)
    inv_lam = np.where(multi, 1.0 / f.lam, 0.0)
    return m, inv_lam, multi


def _finish(pieces: BlockPieces, grad_a: np.ndarray, info_a: np.ndarray) -> ScoreResult:
    pi = pieces.pi
    return ScoreResult(grad_a @ pi, mk.symmetrize(pi.T @ info_a @ pi))


def _h(k: int) -> np.ndarray:
    return np.eye(k * k) + mk.commutation_matrix(k).toarray()


def score_block_t(z, f: cp.CanonicalFactors, nu: float | None = None,
                  pieces: BlockPieces | None = None) -> ScoreResult:
    """Multivariate t (``nu``) or Gaussian (``nu=None``) score w.r.t. free eta."""
    pieces = BlockPieces.of(f) if pieces is None else pieces
    k = pieces.K
    r = cp.rotate_canonical(z, f)
    within = r.within_sumsq()
    m, inv_lam, multi = _within_terms(f)
    quad = np.sum(r.x0**2, axis=-1) + np.sum(within, axis=-1)
    w, phi, _ = _t_weights(quad, nu, f.spec.n)
    w = np.asarray(w)
    s_vec = inv_lam * (1.0 - w[..., None] * within / m)
    vec_i = mk.vec(np.eye(k))
    grad_a = 0.5 * (w[..., None] * _outer_vec(r.x0, r.x0) - vec_i) @ pieces.a_inv_half_kron + 0.5 * _diag_embed(s_vec, k)
    vec_ainv = mk.vec(pieces.a_inv)
    xi = inv_lam
    big_xi = np.where(multi, inv_lam**2 / m, 0.0)
    e_xi = _diag_embed(xi, k)
    info_a = (0.25 * (phi * np.kron(pieces.a_inv, pieces.a_inv) @ _h(k) + (phi - 1.0) * np.outer(vec_ainv, vec_ainv))
              + 0.5 * phi * np.diag(_diag_embed(big_xi, k))
              + 0.25 * (1.0 - phi) * (np.outer(vec_ainv, e_xi) + np.outer(e_xi, vec_ainv) - np.outer(e_xi, e_xi)))
    return _finish(pieces, grad_a, info_a)


def _unit_upsilon(k: int, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """``K_K + sum_k Psi_k`` with ``J_k = e_k e_k'``."""
    k_k = mk.commutation_matrix(k).toarray()
    eye = np.eye(k)
    out = k_k.copy()
    for j in range(k):
        jk = np.zeros((k, k))
        jk[j, j] = 1.0
        jj = np.kron(jk, jk)
        vj = mk.vec(jk)
        out += psi[j] * np.kron(eye, jk) + (phi[j] - psi[j]) * jj + (phi[j] - 1.0) * (jj @ k_k + np.outer(vj, vj))
    return out


def _coupled_info(pieces: BlockPieces, upsilon: np.ndarray, big_xi: np.ndarray, theta_coef: np.ndarray) -> np.ndarray:
    k = pieces.K
    om = pieces.omega
    theta = np.zeros((k, k * k))
    theta[np.arange(k), np.arange(k) * (k + 1)] = theta_coef
    e_d = np.zeros((k, k * k))
    e_d[np.arange(k), np.arange(k) * (k + 1)] = 1.0
    cross = 0.5 * e_d.T @ theta @ om
    return om @ upsilon @ om + 0.25 * np.diag(_diag_embed(big_xi, k)) + cross + cross.T


def score_block_cluster(z, f: cp.CanonicalFactors, dofs, pieces: BlockPieces | None = None) -> ScoreResult:
    """Cluster-t score w.r.t. free eta; one degree of freedom per cluster."""
    pieces = BlockPieces.of(f) if pieces is None else pieces
    k = pieces.K
    dofs = np.asarray(dofs, dtype=float)
    sizes = f.spec.sizes_array
    r = cp.rotate_canonical(z, f)
    within = r.within_sumsq()
    m, inv_lam, multi = _within_terms(f)
    wk = (dofs + sizes) / (dofs - 2.0 + r.x0**2 + within)
    s_vec = inv_lam * (1.0 - wk * within / m)
    inner = _outer_vec(wk * r.x0, r.x0) - mk.vec(np.eye(k))
    grad_a = inner @ pieces.omega + 0.5 * _diag_embed(s_vec, k)
    phi = (dofs + sizes) / (dofs + sizes + 2.0)
    psi = phi * dofs / (dofs - 2.0)
    big_xi = np.where(multi, (phi - 1.0) * inv_lam**2 + 2.0 * phi * inv_lam**2 / m, 0.0)
    info_a = _coupled_info(pieces, _unit_upsilon(k, phi, psi), big_xi, inv_lam * (1.0 - phi))
    return _finish(pieces, grad_a, info_a)


def score_block_hetero(z, f: cp.CanonicalFactors, dofs, pieces: BlockPieces | None = None) -> ScoreResult:
    """Hetero-t score w.r.t. free eta; one degree of freedom per asset."""
    pieces = BlockPieces.of(f) if pieces is None else pieces
    spec = f.spec
    k = pieces.K
    dofs = np.asarray(dofs, dtype=float)
    sizes = spec.sizes_array
    r = cp.rotate_canonical(z, f)
    u = dk.hetero_components(r, f)
    w = (dofs + 1.0) / (dofs - 2.0 + u**2)
    wu = w * u
    lab = spec.labels
    root = np.sqrt(sizes)
    m, inv_lam, multi = _within_terms(f)
    coef = np.stack([np.sum(wu[..., lab == j], axis=-1) for j in range(k)], axis=-1) / root
    centred = u - r.x0[..., lab] / root[lab]
    proj = np.stack([np.sum((wu * centred)[..., lab == j], axis=-1) for j in range(k)], axis=-1)
    s_vec = inv_lam * (1.0 - proj / m)
    inner = _outer_vec(coef, r.x0) - mk.vec(np.eye(k))
    grad_a = inner @ pieces.omega + 0.5 * _diag_embed(s_vec, k)
    phi_i = (dofs + 1.0) / (dofs + 3.0)
    psi_i = phi_i * dofs / (dofs - 2.0)
    phi_bar = np.array([phi_i[lab == j].mean() for j in range(k)])
    psi_bar = np.array([psi_i[lab == j].mean() for j in range(k)])
    upsilon = mk.commutation_matrix(k).toarray()
    eye = np.eye(k)
    for j in range(k):
        jk = np.zeros((k, k))
        jk[j, j] = 1.0
        upsilon = upsilon + (3.0 * phi_bar[j] - 2.0 - psi_bar[j]) / sizes[j] * np.kron(jk, jk) + psi_bar[j] * np.kron(eye, jk)
    big_xi = np.where(multi, inv_lam**2 / sizes * (3.0 * phi_bar - 1.0 + (psi_bar + 1.0) / m), 0.0)
    theta_coef = inv_lam / sizes * (psi_bar + 2.0 - 3.0 * phi_bar)
    info_a = _coupled_info(pieces, upsilon, big_xi, theta_coef)
    return _finish(pieces, grad_a, info_a)


def score_block_canon(z, f: cp.CanonicalFactors, dofs, pieces: BlockPieces | None = None) -> ScoreResult:
    """Canonical-block-t score; ``dofs = (nu_0, nu_1, ..., nu_K)``."""
    pieces = BlockPieces.of(f) if pieces is None else pieces
    k = pieces.K
    dofs = np.asarray(dofs, dtype=float)
    nu0, nuk = dofs[0], dofs[1:]
    r = cp.rotate_canonical(z, f)
    within = r.within_sumsq()
    m, inv_lam, multi = _within_terms(f)
    w0 = (nu0 + k) / (nu0 - 2.0 + np.sum(r.x0**2, axis=-1))
    wk = (nuk + m) / (nuk - 2.0 + within)
    s_vec = inv_lam * (1.0 - wk * within / m)
    vec_i = mk.vec(np.eye(k))
    grad_a = 0.5 * (np.asarray(w0)[..., None] * _outer_vec(r.x0, r.x0) - vec_i) @ pieces.a_inv_half_kron + 0.5 * _diag_embed(s_vec, k)
    phi0 = (nu0 + k) / (nu0 + k + 2.0)
    phik = (nuk + m) / (nuk + m + 2.0)
    big_xi = np.where(multi, (phik - 1.0) * inv_lam**2 + 2.0 * phik * inv_lam**2 / m, 0.0)
    vec_ainv = mk.vec(pieces.a_inv)
    info_a = 0.25 * (phi0 * np.kron(pieces.a_inv, pieces.a_inv) @ _h(k) + (phi0 - 1.0) * np.outer(vec_ainv, vec_ainv)
                     + np.diag(_diag_embed(big_xi, k)))
    return _finish(pieces, grad_a, info_a)


# --------------------------------------------------------------- dispatcher


def score(z, state, kind: ModelKind, pieces: BlockPieces | None = None) -> ScoreResult:
    """Score for any supported (structure, distribution) pair.

    ``state`` is a dense correlation matrix for general structures and
    ``CanonicalFactors`` for block structures.
    """
    dist = kind.distribution
    if kind.is_block:
        f = state
        if dist.tag == dk.GAUSSIAN:
            return score_block_t(z, f, None, pieces)
        if dist.tag == dk.MVT:
            return score_block_t(z, f, dist.dofs[0], pieces)
        if dist.tag == dk.CLUSTER:
            return score_block_cluster(z, f, dist.dofs, pieces)
        if dist.tag == dk.HETERO:
            return score_block_hetero(z, f, dist.dofs, pieces)
        return score_block_canon(z, f, dist.dofs, pieces)
    c = state
    if dist.tag == dk.GAUSSIAN:
        return score_general_t(z, c, None)
    if dist.tag == dk.MVT:
        return score_general_t(z, c, dist.dofs[0])
    return score_general_convt(z, c, dk.convolution_spec(dist, c.shape[0], kind.block))
