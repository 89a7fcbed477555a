"""Corrected DCC benchmark with Hadamard-product recursion

    Q_{t+1} = (11' - alpha - beta) * Cbar + beta * Q_t + alpha * (s_t s_t'),
    s_t = diag(Q_t)^{1/2} z_t,   C_t = diag(Q_t)^{-1/2} Q_t diag(Q_t)^{-1/2}.

Two parametrizations of ``alpha`` and ``beta``: ``scalar`` (common
coefficients) and ``vech`` (``L L'`` with lower-triangular L, so both are
positive semidefinite).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import special

from . import distributions as dk
from . import dynamics as dy
from . import estimation as es
from . import matrixkit as mk
from . import scores as sc
from .errors import EstimationFailure, FilterFailure, InvalidInput, InvalidSpec

VARIANTS = ("scalar", "vech")
PSD_TOL = 1e-12
OK, NOT_PSD = 0, 1


@dataclass(frozen=True)
class DccParams:
    cbar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        mats = [np.asarray(getattr(self, k), dtype=float) for k in ("cbar", "alpha", "beta")]
        n = mats[0].shape[0]
        for name, m in zip(("cbar", "alpha", "beta"), mats):
            if m.shape != (n, n):
                raise InvalidInput(f"{name} must be {n} x {n}")
            if not np.allclose(m, m.T, atol=1e-12):
                raise InvalidInput(f"{name} must be symmetric")
            object.__setattr__(self, name, np.ascontiguousarray(m))

    @property
    def n(self) -> int:
        return self.cbar.shape[0]

    @classmethod
    def scalar(cls, cbar, a: float, b: float) -> "DccParams":
        cbar = np.asarray(cbar, dtype=float)
        ones = np.ones_like(cbar)
        return cls(cbar, a * ones, b * ones)


@njit(cache=True, nogil=True)
def _dcc_pass(z, cbar, alpha, beta, gaussian, rot, groups, gsizes, dofs, store):
    t_len, n = z.shape
    n_groups = gsizes.size
    per_t = np.zeros(t_len)
    corr = np.zeros((t_len if store else 1, n, n))
    q = cbar.copy()
    const = 0.0
    if gaussian:
        const = -0.5 * n * math.log(2.0 * math.pi)
    else:
        for g in range(n_groups):
            if gsizes[g] > 0:
                nu = dofs[g]
                m = gsizes[g]
                const += (math.lgamma(0.5 * (nu + m)) - math.lgamma(0.5 * nu)
                          - 0.5 * m * math.log((nu - 2.0) * math.pi))
    base = (1.0 - alpha - beta) * cbar
    for t in range(t_len):
        qd = np.diag(q)
        if not (np.all(np.isfinite(q)) and np.all(qd > 0.0)):
            return per_t, corr, t, NOT_PSD
        d = np.sqrt(qd)
        c = q / np.outer(d, d)
        for i in range(n):
            c[i, i] = 1.0
        w, v = np.linalg.eigh(c)
        if not w[0] > PSD_TOL:
            return per_t, corr, t, NOT_PSD
        if store:
            corr[t] = c
        logdet = 0.0
        for i in range(n):
            logdet += math.log(w[i])
        proj = v.T @ z[t]
        ll = const - 0.5 * logdet
        if gaussian:
            quad = 0.0
            for i in range(n):
                quad += proj[i] * proj[i] / w[i]
            ll -= 0.5 * quad
        else:
            u = v @ (proj / np.sqrt(w))
            rv = rot.T @ u
            sums = np.zeros(n_groups)
            for i in range(n):
                sums[groups[i]] += rv[i] * rv[i]
            for g in range(n_groups):
                if gsizes[g] > 0:
                    ll -= 0.5 * (dofs[g] + gsizes[g]) * math.log1p(sums[g] / (dofs[g] - 2.0))
        per_t[t] = ll
        s = d * z[t]
        q = base + beta * q + alpha * np.outer(s, s)
    return per_t, corr, t_len, OK


def _dist_arrays(kind: sc.ModelKind, n: int):
    dist = kind.distribution
    if dist.tag == dk.GAUSSIAN:
        return True, np.eye(n), np.zeros(n, dtype=np.int64), np.array([n], dtype=np.int64), np.zeros(1)
    spec = dk.convolution_spec(dist, n, kind.block)
    groups = np.repeat(np.arange(spec.G), spec.partition).astype(np.int64)
    return (False, np.ascontiguousarray(spec.P), groups, np.array(spec.partition, dtype=np.int64),
            np.array(spec.dofs, dtype=float))


@dataclass(frozen=True)
class DccOutput:
    per_t: np.ndarray
    corr: np.ndarray | None

    @property
    def loglik_total(self) -> float:
        return float(np.sum(self.per_t))


def dcc_filter(z, params: DccParams, kind: sc.ModelKind, store: bool = False) -> DccOutput:
    """Run the recursion from ``Q_1 = Cbar``; ``kind`` supplies the distribution.

    Raises ``FilterFailure`` when a correlation matrix loses positive
    definiteness.
    """
    z = np.ascontiguousarray(np.asarray(z, dtype=float))
    if z.ndim != 2 or z.shape[1] != params.n:
        raise InvalidInput(f"panel must be T x {params.n}")
    per_t, corr, t_stop, status = _dcc_pass(z, params.cbar, params.alpha, params.beta,
                                            *_dist_arrays(kind, params.n), store)
    if status != OK:
        raise FilterFailure(f"DCC correlation lost positive definiteness at t={t_stop}", t=int(t_stop))
    return DccOutput(per_t, corr if store else None)


def dcc_simulate(params: DccParams, kind: sc.ModelKind, T: int, seed=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = params.n
    q = params.cbar.copy()
    base = (1.0 - params.alpha - params.beta) * params.cbar
    out = np.empty((T, n))
    for t in range(T):
        d = np.sqrt(np.diag(q))
        c = mk.symmetrize(q / np.outer(d, d))
        out[t] = dk.sample(kind.distribution, c, 1, seed=rng, block=kind.block)[0]
        s = d * out[t]
        q = base + params.beta * q + params.alpha * np.outer(s, s)
    return out


# ------------------------------------------------------------------ estimation


def dcc_param_count(n: int, variant: str, kind: sc.ModelKind) -> int:
    """Counts the targeted ``Cbar`` as ``n(n-1)/2`` parameters."""
    if variant not in VARIANTS:
        raise InvalidSpec(f"unknown DCC variant {variant!r}")
    dist = kind.distribution
    dyn = 2 if variant == "scalar" else n * (n + 1)
    return n * (n - 1) // 2 + dyn + dk.n_dofs(dist.tag, n, kind.block, dist.partition)


@dataclass(frozen=True)
class DccLayout:
    """Unconstrained vector ``[dynamics, nu]``.

    scalar: ``a = s * w``, ``b = s * (1 - w)`` with ``s, w`` logistic.
    vech: ``vech(L_alpha), vech(L_beta)``.
    """

    n: int
    variant: str
    n_dofs: int

    @property
    def n_dyn(self) -> int:
        return 2 if self.variant == "scalar" else self.n * (self.n + 1)

    @property
    def size(self) -> int:
        return self.n_dyn + self.n_dofs

    def unpack(self, u: np.ndarray, cbar: np.ndarray):
        u = np.asarray(u, dtype=float)
        dyn, nu = u[: self.n_dyn], u[self.n_dyn :]
        dofs = tuple(dk.NU_MIN + (dk.NU_MAX - dk.NU_MIN) * special.expit(nu))
        if self.variant == "scalar":
            s, w = special.expit(dyn[0]), special.expit(dyn[1])
            return DccParams.scalar(cbar, s * w, s * (1.0 - w)), dofs
        half = dyn.size // 2
        la, lb = _lower(dyn[:half], self.n), _lower(dyn[half:], self.n)
        return DccParams(cbar, la @ la.T, lb @ lb.T), dofs

    def start(self, a: float, b: float, dofs) -> np.ndarray:
        nu = special.logit((np.asarray(dofs, dtype=float) - dk.NU_MIN) / (dk.NU_MAX - dk.NU_MIN))
        if self.variant == "scalar":
            return np.concatenate([[special.logit(a + b), special.logit(a / (a + b))], nu])
        shape = 0.9 * np.ones((self.n, self.n)) + 0.1 * np.eye(self.n)
        la = np.linalg.cholesky(a * shape)
        lb = np.linalg.cholesky(b * shape)
        return np.concatenate([mk.vech(la), mk.vech(lb), nu])

    def natural(self, u: np.ndarray, cbar: np.ndarray) -> np.ndarray:
        """Reported parameters: ``(a, b)`` or ``(vech(alpha), vech(beta))``, then dofs."""
        p, dofs = self.unpack(u, cbar)
        if self.variant == "scalar":
            dyn = [p.alpha[0, 0], p.beta[0, 0]]
        else:
            dyn = np.concatenate([mk.vech(p.alpha), mk.vech(p.beta)])
        return np.concatenate([dyn, dofs])


def _lower(v: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    r, c = mk.lower_indices(n, strict=False)
    out[r, c] = v
    return out


@dataclass
class DccResult:
    kind: sc.ModelKind
    variant: str
    params: DccParams
    dofs: tuple[float, ...]
    u: np.ndarray
    loglik: float
    T: int
    param_count: int
    converged: bool
    message: str
    standard_errors: np.ndarray | None = None
    starts: list = field(default_factory=list)

    @property
    def aic(self) -> float:
        return es.aic(self.loglik, self.param_count)

    @property
    def bic(self) -> float:
        return es.bic(self.loglik, self.param_count, self.T)


def dcc_fit(z, kind: sc.ModelKind, variant: str = "scalar", n_starts: int = 3, jitter: float = 0.1, seed=0,
            start=(0.03, 0.95), maxiter: int = 400, gtol: float = 1e-5, standard_errors: bool = False,
            threads: int = 1) -> DccResult:
    """Maximum likelihood with ``Cbar`` fixed at the sample correlation."""
    z = np.ascontiguousarray(np.asarray(z, dtype=float))
    t_len, n = z.shape
    if variant not in VARIANTS:
        raise InvalidSpec(f"unknown DCC variant {variant!r}")
    cbar = dy.sample_correlation(z)
    dist = kind.distribution
    layout = DccLayout(n, variant, dk.n_dofs(dist.tag, n, kind.block, dist.partition))
    dofs0 = es.default_dofs(kind, z)

    def per_t(u):
        params, dofs = layout.unpack(u, cbar)
        k = es.model_with_dofs(kind, dofs)
        out = _dcc_pass(z, params.cbar, params.alpha, params.beta, *_dist_arrays(k, n), False)
        return out[0] if out[3] == OK else None

    def neg(u):
        v = per_t(u)
        return es.FAIL_PENALTY if v is None else -float(np.sum(v)) / t_len

    u0 = layout.start(start[0], start[1], dofs0)
    res, trace = es.maximize(neg, u0, n_starts=n_starts, jitter=jitter, seed=seed, maxiter=maxiter, gtol=gtol,
                             threads=threads)
    params, dofs = layout.unpack(res.x, cbar)
    out = DccResult(kind, variant, params, tuple(dofs), res.x, -res.fun * t_len, t_len,
                    dcc_param_count(n, variant, kind), es.converged(res, gtol), str(res.message), starts=trace)
    if standard_errors:
        theta = layout.natural(res.x, cbar)
        if variant != "scalar":
            raise EstimationFailure("standard errors are only provided for the scalar variant")

        def per_t_nat(th):
            a, b = th[0], th[1]
            k = es.model_with_dofs(kind, tuple(th[2:]))
            o = _dcc_pass(z, cbar, a * np.ones((n, n)), b * np.ones((n, n)), *_dist_arrays(k, n), False)
            return o[0] if o[3] == OK else None

        def ll(th):
            v = per_t_nat(th)
            return -es.FAIL_PENALTY * t_len if v is None else float(np.sum(v))

        cov, _ = es.sandwich_covariance(per_t_nat, ll, theta, threads)
        out.standard_errors = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return out
