"""Scaled Student-t and convolution-t distributions.

A convolution-t vector is ``Z = C^{1/2} P V`` where ``V`` stacks independent
standardized multivariate t blocks ``V_g`` of size ``m_g`` with ``nu_g`` degrees
of freedom, and ``P`` is orthonormal. ``var(Z) = C`` for every choice of P.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, special

from . import corrparam as cp
from . import matrixkit as mk
from .errors import InvalidInput, InvalidSpec, QuadratureFailure, SingularMatrix

GAUSSIAN = "Gaussian"
MVT = "MultivariateT"
CLUSTER = "ClusterT"
HETERO = "HeteroT"
CANONICAL = "CanonicalBlockT"
TAGS = (GAUSSIAN, MVT, CLUSTER, HETERO, CANONICAL)

NU_MIN = 2.1
NU_MAX = 100.0


def log_t_const(nu, m):
    """Log normalizing constant of the standardized ``m``-variate t density."""
    nu = np.asarray(nu, dtype=float)
    return special.gammaln(0.5 * (nu + m)) - special.gammaln(0.5 * nu) - 0.5 * m * np.log((nu - 2.0) * np.pi)


def log_t_kernel(quad, nu, m):
    """Log density of the standardized ``m``-variate t given ``u'u``."""
    return log_t_const(nu, m) - 0.5 * (nu + m) * np.log1p(quad / (nu - 2.0))


def log_gauss_kernel(quad, m):
    return -0.5 * m * np.log(2.0 * np.pi) - 0.5 * quad


# --------------------------------------------------------------------- specs


@dataclass(frozen=True)
class ConvolutionSpec:
    """Partition ``m``, degrees of freedom ``nu`` and orthonormal rotation ``P``.

    ``rotation`` is ``None`` for the identity.
    """

    partition: tuple[int, ...]
    dofs: tuple[float, ...]
    rotation: np.ndarray | None = None

    def __post_init__(self):
        part = tuple(int(m) for m in self.partition)
        dofs = tuple(float(v) for v in self.dofs)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "dofs", dofs)
        if len(part) != len(dofs):
            raise InvalidSpec(f"{len(part)} groups but {len(dofs)} degrees of freedom")
        if any(m < 0 for m in part):
            raise InvalidSpec("group sizes must be non-negative")
        if any(not v > 2 for v in dofs):
            raise InvalidSpec(f"degrees of freedom must exceed 2, got {dofs}")
        if self.rotation is not None:
            p = np.asarray(self.rotation, dtype=float)
            if p.shape != (self.n, self.n) or np.linalg.norm(p.T @ p - np.eye(self.n)) > 1e-12 * self.n:
                raise InvalidSpec("rotation must be an n x n orthonormal matrix")

    @property
    def n(self) -> int:
        return sum(self.partition)

    @property
    def G(self) -> int:
        return len(self.partition)

    @property
    def P(self) -> np.ndarray:
        return np.eye(self.n) if self.rotation is None else np.asarray(self.rotation)

    def slices(self) -> list[slice]:
        off = np.concatenate([[0], np.cumsum(self.partition)]).astype(int)
        return [slice(off[g], off[g + 1]) for g in range(self.G)]


@dataclass(frozen=True)
class ModelDistribution:
    """Distribution family and its degrees of freedom.

    ``partition`` is only consulted by ``ClusterT`` on an unrestricted C; on a
    block structure the clusters define the groups.
    """

    tag: str
    dofs: tuple[float, ...] = ()
    partition: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise InvalidSpec(f"unknown distribution {self.tag!r}")
        object.__setattr__(self, "dofs", tuple(float(v) for v in np.atleast_1d(np.asarray(self.dofs, dtype=float))))
        if self.tag == GAUSSIAN and self.dofs:
            raise InvalidSpec("Gaussian takes no degrees of freedom")
        if self.tag == MVT and len(self.dofs) != 1:
            raise InvalidSpec("multivariate t takes exactly one degree of freedom")
        if any(not v > 2 for v in self.dofs):
            raise InvalidSpec(f"degrees of freedom must exceed 2, got {self.dofs}")

    def with_dofs(self, dofs) -> "ModelDistribution":
        return ModelDistribution(self.tag, tuple(np.atleast_1d(dofs)), self.partition)


def n_dofs(tag: str, n: int, block: cp.BlockSpec | None = None, partition=None) -> int:
    """Number of degrees-of-freedom parameters of a distribution family."""
    if tag == GAUSSIAN:
        return 0
    if tag == MVT:
        return 1
    if tag == HETERO:
        return n
    if tag == CLUSTER:
        if block is not None:
            return block.K
        if partition is None:
            raise InvalidSpec("ClusterT needs a partition or a block structure")
        return len(partition)
    if tag == CANONICAL:
        if block is None:
            raise InvalidSpec("CanonicalBlockT needs a block structure")
        return block.K + 1
    raise InvalidSpec(f"unknown distribution {tag!r}")


def convolution_spec(dist: ModelDistribution, n: int, block: cp.BlockSpec | None = None) -> ConvolutionSpec:
    """Generic convolution-t description of a model distribution (not Gaussian)."""
    k = n_dofs(dist.tag, n, block, dist.partition)
    if len(dist.dofs) != k:
        raise InvalidSpec(f"{dist.tag} needs {k} degrees of freedom, got {len(dist.dofs)}")
    if dist.tag == GAUSSIAN:
        raise InvalidSpec("Gaussian is not a convolution-t distribution")
    if dist.tag == MVT:
        return ConvolutionSpec((n,), dist.dofs)
    if dist.tag == HETERO:
        return ConvolutionSpec((1,) * n, dist.dofs)
    if dist.tag == CLUSTER:
        part = block.sizes if block is not None else dist.partition
        if sum(part) != n:
            raise InvalidSpec(f"partition {part} does not sum to n={n}")
        return ConvolutionSpec(part, dist.dofs)
    part = (block.K,) + tuple(m - 1 for m in block.sizes)
    return ConvolutionSpec(part, dist.dofs, rotation=cp.build_Q(block))


# -------------------------------------------------------------- log-likelihood


def _check_z(z, n):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != n:
        raise InvalidInput(f"observation length {z.shape[-1]} does not match dimension {n}")
    return z


def _dense_parts(c: np.ndarray):
    s = mk.spectral(c)
    if s.values[-1] <= 0:
        raise SingularMatrix("correlation matrix is singular", eigenvalue=float(s.values[-1]))
    return s, float(np.sum(np.log(s.values)))


def loglik_gaussian(z, c) -> np.ndarray:
    if isinstance(c, cp.CanonicalFactors):
        z = _check_z(z, c.spec.n)
        return log_gauss_kernel(cp.block_quadform(z, c), c.spec.n) - 0.5 * c.logdet()
    z = _check_z(z, c.shape[0])
    s, logdet = _dense_parts(c)
    u = (z @ s.vectors) / np.sqrt(s.values)
    return log_gauss_kernel(np.sum(u**2, axis=-1), c.shape[0]) - 0.5 * logdet


def loglik_mvt(z, c, nu: float) -> np.ndarray:
    """Log density of the standardized multivariate t with correlation ``c``.

    ``c`` may be a dense matrix or ``CanonicalFactors``; the latter never forms
    an ``n x n`` factorization.
    """
    if not nu > 2:
        raise InvalidSpec(f"degrees of freedom must exceed 2, got {nu}")
    if isinstance(c, cp.CanonicalFactors):
        z = _check_z(z, c.spec.n)
        return log_t_kernel(cp.block_quadform(z, c), nu, c.spec.n) - 0.5 * c.logdet()
    z = _check_z(z, c.shape[0])
    s, logdet = _dense_parts(c)
    u = (z @ s.vectors) / np.sqrt(s.values)
    return log_t_kernel(np.sum(u**2, axis=-1), nu, c.shape[0]) - 0.5 * logdet


def rotated_groups(z, c: np.ndarray, spec: ConvolutionSpec) -> list[np.ndarray]:
    """``V_g`` blocks of ``V = P' C^{-1/2} Z`` for a dense C."""
    s, _ = _dense_parts(c)
    inv_root = s.apply(lambda w: w**-0.5)
    v = z @ inv_root @ spec.P
    return [v[..., sl] for sl in spec.slices()]


def loglik_convt_dense(z, c: np.ndarray, spec: ConvolutionSpec) -> np.ndarray:
    z = _check_z(z, c.shape[0])
    if spec.n != c.shape[0]:
        raise InvalidSpec(f"partition sums to {spec.n}, matrix is {c.shape[0]}")
    _, logdet = _dense_parts(c)
    out = -0.5 * logdet
    for vg, nu, m in zip(rotated_groups(z, c, spec), spec.dofs, spec.partition):
        if m:
            out = out + log_t_kernel(np.sum(vg**2, axis=-1), nu, m)
    return out


def loglik_cluster_block(z, f: cp.CanonicalFactors, dofs) -> np.ndarray:
    r = cp.rotate_canonical(z, f)
    dofs = np.asarray(dofs, dtype=float)
    quad = r.x0**2 + r.within_sumsq()
    return np.sum(log_t_kernel(quad, dofs, f.spec.sizes_array), axis=-1) - 0.5 * f.logdet()


def hetero_components(r: cp.Rotation, f: cp.CanonicalFactors) -> np.ndarray:
    """Per-asset coordinates ``U = C^{-1/2} Z`` from canonical coordinates."""
    q = cp.build_Q(f.spec)
    x = np.concatenate([r.x0, r.x_within], axis=-1)
    return x @ q.T


def loglik_hetero_block(z, f: cp.CanonicalFactors, dofs) -> np.ndarray:
    r = cp.rotate_canonical(z, f)
    u = hetero_components(r, f)
    dofs = np.asarray(dofs, dtype=float)
    return np.sum(log_t_kernel(u**2, dofs, 1.0), axis=-1) - 0.5 * f.logdet()


def loglik_canonical_block(z, f: cp.CanonicalFactors, dofs) -> np.ndarray:
    r = cp.rotate_canonical(z, f)
    dofs = np.asarray(dofs, dtype=float)
    spec = f.spec
    out = log_t_kernel(np.sum(r.x0**2, axis=-1), dofs[0], spec.K) - 0.5 * f.logdet()
    within = r.within_sumsq()
    for k, m in enumerate(spec.sizes):
        if m > 1:
            out = out + log_t_kernel(within[..., k], dofs[k + 1], m - 1)
    return out


def loglik_convt(z, c, spec: ConvolutionSpec, tag: str | None = None) -> np.ndarray:
    """Convolution-t log density.

    With ``CanonicalFactors`` and a ``tag`` among ClusterT/HeteroT/CanonicalBlockT
    the block-specialized evaluation is used; otherwise the generic one.
    """
    if isinstance(c, cp.CanonicalFactors):
        block = c.spec
        if tag is None:
            return loglik_convt_dense(z, cp.canonical_compose(c), spec)
        expected = convolution_spec(ModelDistribution(tag, spec.dofs), block.n, block)
        if expected.partition != spec.partition:
            raise InvalidSpec(f"partition {spec.partition} does not match {tag} on sizes {block.sizes}")
        if tag == CLUSTER:
            return loglik_cluster_block(z, c, spec.dofs)
        if tag == HETERO:
            return loglik_hetero_block(z, c, spec.dofs)
        if tag == CANONICAL:
            return loglik_canonical_block(z, c, spec.dofs)
        if tag == MVT:
            return loglik_mvt(z, c, spec.dofs[0])
        raise InvalidSpec(f"no block form for {tag}")
    return loglik_convt_dense(z, c, spec)


def loglik(z, c, dist: ModelDistribution, block: cp.BlockSpec | None = None) -> np.ndarray:
    """Log density for any model distribution, dense or block correlation."""
    if dist.tag == GAUSSIAN:
        return loglik_gaussian(z, c)
    if dist.tag == MVT:
        return loglik_mvt(z, c, dist.dofs[0])
    if isinstance(c, cp.CanonicalFactors):
        return loglik_convt(z, c, convolution_spec(dist, c.spec.n, c.spec), tag=dist.tag)
    return loglik_convt_dense(z, c, convolution_spec(dist, c.shape[0], block))


# ------------------------------------------------------------------- sampling


def sample_standard(spec: ConvolutionSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draws of ``V`` with independent unit-variance t blocks."""
    out = np.empty((count, spec.n))
    for sl, nu, m in zip(spec.slices(), spec.dofs, spec.partition):
        if m == 0:
            continue
        g = rng.standard_normal((count, m))
        chi = rng.chisquare(nu, size=count)
        out[:, sl] = g / np.sqrt(chi / (nu - 2.0))[:, None]
    return out


def corr_root(c) -> np.ndarray:
    if isinstance(c, cp.CanonicalFactors):
        return cp.block_sqrt(c)
    s, _ = _dense_parts(c)
    return s.apply(np.sqrt)


def sample(dist: ModelDistribution, c, count: int, seed=None, block: cp.BlockSpec | None = None) -> np.ndarray:
    """``count`` draws of ``Z = C^{1/2} P V``; deterministic for a fixed seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    root = corr_root(c)
    n = root.shape[0]
    if isinstance(c, cp.CanonicalFactors):
        block = c.spec
    if dist.tag == GAUSSIAN:
        v = rng.standard_normal((count, n))
        return v @ root
    spec = convolution_spec(dist, n, block)
    v = sample_standard(spec, count, rng)
    return v @ spec.P.T @ root


# ------------------------------------------------------- marginal distribution


def log_bessel_k(order: float, x):
    """``log K_order(x)`` for ``x > 0``.

    Orders above one are reached by the upward recurrence
    ``K_{m+1} = K_{m-1} + (2m/x) K_m`` carried as ratios, which stays finite
    where ``K`` itself over- or underflows.
    """
    x = np.asarray(x, dtype=float)
    base = order - np.floor(order)
    steps = int(np.floor(order))
    with np.errstate(divide="ignore"):
        log_k = np.log(special.kve(base, x)) - x
        if steps == 0:
            return log_k
        log_next = np.log(special.kve(base + 1.0, x)) - x
    ratio = np.exp(log_next - log_k)
    m = base + 1.0
    for _ in range(steps - 1):
        ratio = 1.0 / ratio + 2.0 * m / x
        log_next = log_next + np.log(ratio)
        m += 1.0
    return log_next


def std_t_cf(s, nu: float):
    """Characteristic function of the unit-variance univariate t (real valued)."""
    s = np.abs(np.asarray(s, dtype=float))
    x = np.sqrt(nu - 2.0) * s
    half = 0.5 * nu
    safe = np.where(x > 0, x, 1.0)
    logv = log_bessel_k(half, safe) + half * np.log(safe) - special.gammaln(half) - (half - 1.0) * np.log(2.0)
    out = np.exp(logv)
    return np.where(x > 0, np.where(np.isfinite(out), out, 0.0), 1.0)


def marginal_weights(c, spec: ConvolutionSpec, j: int) -> np.ndarray:
    """Norms ``||P_g' C^{1/2} e_j||``; the marginal of Z_j is sum_g w_g V_g-type."""
    root = corr_root(c)
    col = spec.P.T @ root[:, j]
    return np.array([np.linalg.norm(col[sl]) for sl in spec.slices()])


def marginal_cf(s, weights, dofs):
    out = np.ones_like(np.asarray(s, dtype=float))
    for w, nu in zip(weights, dofs):
        if w > 0:
            out = out * std_t_cf(np.asarray(s) * w, nu)
    return out


def _cf_cutoff(weights, dofs, level: float = 1e-12) -> float:
    s = 1.0
    while marginal_cf(s, weights, dofs) > level:
        s *= 2.0
        if s > 1e8:
            raise QuadratureFailure("characteristic function does not decay")
    return s


def _panels(upper: float) -> list[tuple[float, float]]:
    edges = [0.0, 0.125]
    while edges[-1] < upper:
        edges.append(min(2.0 * edges[-1], upper))
    return list(zip(edges[:-1], edges[1:]))


def _inversion(z: float, weights, dofs, kind: str, tol: float = 1e-13) -> float:
    """Gil-Pelaez integrals on dyadic panels with cos/sin-weighted quadrature,
    so large ``|z|`` stays accurate. For the cdf the ``sin(sz)/s`` part is the
    sine integral, leaving the bounded ``(cf - 1)/s`` for the first panel."""
    upper = _cf_cutoff(weights, dofs)

    def cf(s):
        return marginal_cf(s, weights, dofs)

    if kind == "cdf" and z == 0.0:
        return 0.0
    total, err_total = 0.0, 0.0
    for a, b in _panels(upper):
        opts = dict(epsabs=tol, epsrel=1e-12, limit=400)
        if kind == "pdf":
            if z == 0.0:
                val, err = integrate.quad(cf, a, b, **opts)
            else:
                val, err = integrate.quad(cf, a, b, weight="cos", wvar=z, **opts)
        elif a == 0.0:
            def excess(s):
                return -0.5 * s * np.sum(np.asarray(weights) ** 2) if s == 0 else (cf(s) - 1.0) / s
            val, err = integrate.quad(excess, a, b, weight="sin", wvar=z, **opts)
            val += special.sici(b * z)[0]
        else:
            val, err = integrate.quad(lambda s: cf(s) / s, a, b, weight="sin", wvar=z, **opts)
        total += val
        err_total += err
    if err_total > 1e-8:
        raise QuadratureFailure(f"inversion integral error {err_total:.2e}", error_estimate=err_total)
    return total / np.pi


def convolution_pdf(z: float, weights, dofs) -> float:
    """Density of ``sum_g w_g X_g`` with independent unit-variance t variables."""
    return max(_inversion(float(z), weights, dofs, "pdf"), 0.0)


def convolution_cdf(z: float, weights, dofs) -> float:
    return float(np.clip(0.5 + _inversion(float(z), weights, dofs, "cdf"), 0.0, 1.0))


def marginal_pdf(z: float, j: int, c, spec: ConvolutionSpec) -> float:
    return convolution_pdf(z, marginal_weights(c, spec, j), spec.dofs)


def marginal_cdf(z: float, j: int, c, spec: ConvolutionSpec) -> float:
    return convolution_cdf(z, marginal_weights(c, spec, j), spec.dofs)


@lru_cache(maxsize=32)
def _gl_nodes(upper: float, zmax: float, per_panel: int):
    """Gauss-Legendre nodes on dyadic panels, split so no panel spans more than
    one period of ``cos(zmax * s)``."""
    x, w = np.polynomial.legendre.leggauss(per_panel)
    nodes, weights = [], []
    period = 2.0 * np.pi / max(zmax, 1.0)
    for a, b in _panels(upper):
        pieces = int(np.ceil((b - a) / period))
        edges = np.linspace(a, b, pieces + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            weights.append(0.5 * (hi - lo) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def convolution_pdf_batch(z: np.ndarray, weights: np.ndarray, dofs, per_panel: int = 24) -> np.ndarray:
    """Vectorized density for many points, each with its own weight vector.

    Fixed Gauss-Legendre panels sized for the heaviest tail and the largest
    ``|z|`` in the batch; used for bulk evaluations where the adaptive routine
    is too slow.
    """
    z = np.asarray(z, dtype=float).ravel()
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    dofs = np.asarray(dofs, dtype=float)
    upper = max(_cf_cutoff(w, dofs, 1e-14) for w in np.unique(np.round(weights, 12), axis=0))
    zmax = float(2.0 ** np.ceil(np.log2(max(np.max(np.abs(z)), 1.0))))
    s, sw = _gl_nodes(upper, zmax, per_panel)
    cf = np.ones((weights.shape[0], s.size))
    for g, nu in enumerate(dofs):
        cf *= std_t_cf(weights[:, g : g + 1] * s[None, :], nu)
    vals = np.einsum("ij,ij,j->i", np.cos(z[:, None] * s[None, :]), np.broadcast_to(cf, (z.size, s.size)), sw) / np.pi
    return np.maximum(vals, 0.0)


def std_t_logpdf(x, nu: float):
    return log_t_kernel(np.asarray(x, dtype=float) ** 2, nu, 1.0)


def kl_best_t(weights, dofs, bounds=(2.05, 400.0)) -> float:
    """Degrees of freedom of the unit-variance t closest in KL divergence to
    ``sum_g w_g X_g``."""
    weights = np.asarray(weights, dtype=float)
    grid_x, grid_w = [], []
    x, w = np.polynomial.legendre.leggauss(40)
    edges = np.concatenate([[0.0], 0.25 * 2.0 ** np.arange(0, 8)])
    for a, b in zip(edges[:-1], edges[1:]):
        grid_x.append(0.5 * (b - a) * x + 0.5 * (b + a))
        grid_w.append(0.5 * (b - a) * w)
    zs = np.concatenate(grid_x)
    ws = 2.0 * np.concatenate(grid_w)
    dens = convolution_pdf_batch(zs, np.broadcast_to(weights, (zs.size, weights.size)), dofs)
    mass = dens @ ws
    if abs(mass - 1.0) > 1e-5:
        raise QuadratureFailure(f"density grid mass {mass:.8f}", error_estimate=abs(mass - 1.0))

    def cross_entropy(nu):
        return -(dens * std_t_logpdf(zs, nu)) @ ws

    res = optimize.minimize_scalar(cross_entropy, bounds=bounds, method="bounded", options={"xatol": 1e-6})
    return float(res.x)


# ----------------------------------------------------------------- moments


def zeta(p: float, q: float, nu: float, n: int) -> float:
    """Constant with ``E[W^{p/2} g(X)] = zeta E[g(Z)]`` for g homogeneous of degree q,
    ``X`` standardized n-variate t and ``W = (nu+n)/(nu-2+X'X)``."""
    if not nu + p - q > 0 or not nu > 2:
        raise InvalidInput(f"zeta undefined for p={p}, q={q}, nu={nu}")
    log_val = (0.5 * p * np.log((nu + n) / (nu - 2.0)) + 0.5 * q * np.log(0.5 * (nu - 2.0))
               + special.gammaln(0.5 * (nu + n)) - special.gammaln(0.5 * nu)
               + special.gammaln(0.5 * (nu + p - q)) - special.gammaln(0.5 * (nu + p + n)))
    return float(np.exp(log_val))
