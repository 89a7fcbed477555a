"""Two-stage estimation: univariate EGARCH volatility filtering, then maximum
likelihood for the dynamic correlation model, plus likelihood decomposition,
information criteria and out-of-sample evaluation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import optimize, special, stats

from . import corrparam as cp
from . import distributions as dk
from . import _blockkernel as bk
from . import dynamics as dy
from . import matrixkit as mk
from . import scores as sc
from .errors import ClusterGarchError, EstimationFailure, InvalidInput, QuadratureFailure, SingularMatrix

FAIL_PENALTY = 1e6
NU_START_MARGIN = 0.5
# starts this much worse (mean negative loglik) than the best start are not explored
SCREEN_MARGIN = 1.0


# ------------------------------------------------------------------ utilities


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def central_gradient(fn, x: np.ndarray, step: float = 1e-5, threads: int = 1) -> np.ndarray:
    """Central differences of a scalar (or vector) function, one probe pair per coordinate."""
    x = np.asarray(x, dtype=float)
    h = step * np.maximum(1.0, np.abs(x))
    probes = []
    for i in range(x.size):
        for sgn in (1.0, -1.0):
            xp = x.copy()
            xp[i] += sgn * h[i]
            probes.append(xp)
    vals = _map(fn, probes, threads)
    return np.stack([(np.asarray(vals[2 * i]) - np.asarray(vals[2 * i + 1])) / (2.0 * h[i]) for i in range(x.size)],
                    axis=-1)


def numerical_hessian(fn, x: np.ndarray, step: float = 1e-4, threads: int = 1) -> np.ndarray:
    """Second differences with O(h^2) error using p^2 + 1 evaluations.

    Off-diagonal entries use
    ``[f(+i+j) - f(+i) - f(+j) + 2f - f(-i) - f(-j) + f(-i-j)] / (2 h_i h_j)``.
    """
    x = np.asarray(x, dtype=float)
    p = x.size
    h = step * np.maximum(1.0, np.abs(x))
    eye = np.eye(p) * h

    probes = [x]
    for i in range(p):
        probes += [x + eye[i], x - eye[i]]
    for i in range(p):
        for j in range(i + 1, p):
            probes += [x + eye[i] + eye[j], x - eye[i] - eye[j]]
    vals = np.asarray(_map(fn, probes, threads), dtype=float)
    f0 = vals[0]
    plus = vals[1 : 2 * p + 1 : 2]
    minus = vals[2 : 2 * p + 1 : 2]
    hess = np.diag((plus - 2.0 * f0 + minus) / h**2)
    pos = 2 * p + 1
    for i in range(p):
        for j in range(i + 1, p):
            fpp, fmm = vals[pos], vals[pos + 1]
            pos += 2
            val = (fpp - plus[i] - plus[j] + 2.0 * f0 - minus[i] - minus[j] + fmm) / (2.0 * h[i] * h[j])
            hess[i, j] = hess[j, i] = val
    return hess


def sandwich(hessian: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, bool]:
    """``H^{-1} J H^{-1}`` with ``H = -hessian`` and ``J`` the outer product of
    per-observation scores. Falls back to a pseudo-inverse when H is not
    positive definite (second return value False)."""
    h = -0.5 * (hessian + hessian.T)
    j = scores.T @ scores
    try:
        np.linalg.cholesky(h)
        h_inv = np.linalg.inv(h)
        ok = True
    except np.linalg.LinAlgError:
        h_inv = np.linalg.pinv(h)
        ok = False
    return h_inv @ j @ h_inv, ok


def aic(loglik: float, p: int) -> float:
    return -2.0 * loglik + 2.0 * p


def bic(loglik: float, p: int, T: int) -> float:
    return -2.0 * loglik + p * math.log(T)


# ---------------------------------------------------------------------- EGARCH


@dataclass(frozen=True)
class EgarchParams:
    kappa: float
    phi: float
    xi: float
    theta: float
    tau: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.kappa, self.phi, self.xi, self.theta, self.tau, self.delta])


@njit(cache=True)
def _egarch_pass(r, kappa, phi, xi, theta, tau, delta, h1, r0):
    t_len = r.size
    z = np.empty(t_len)
    h = np.empty(t_len)
    ll = np.empty(t_len)
    logh = math.log(h1)
    prev = r0
    for t in range(t_len):
        ht = math.exp(logh)
        h[t] = ht
        e = r[t] - kappa - phi * prev
        z[t] = e / math.sqrt(ht)
        ll[t] = -0.5 * (math.log(2.0 * math.pi) + logh + z[t] * z[t])
        logh = xi + theta * logh + tau * z[t] + delta * abs(z[t])
        if logh > 700.0:
            logh = 700.0
        elif logh < -700.0:
            logh = -700.0
        prev = r[t]
    return z, h, ll


def egarch_filter(r, params: EgarchParams, h1: float | None = None, r0: float | None = None):
    """Standardized residuals, variances and Gaussian log-likelihood terms."""
    r = np.asarray(r, dtype=float)
    h1 = float(np.var(r)) if h1 is None else h1
    r0 = float(np.mean(r)) if r0 is None else r0
    return _egarch_pass(r, params.kappa, params.phi, params.xi, params.theta, params.tau, params.delta, h1, r0)


def _egarch_natural(u: np.ndarray) -> EgarchParams:
    return EgarchParams(u[0], math.tanh(u[1]), u[2], math.tanh(u[3]), u[4], u[5])


@dataclass(frozen=True)
class EgarchFit:
    params: EgarchParams
    z: np.ndarray
    h: np.ndarray
    loglik: float
    standard_errors: np.ndarray
    converged: bool


def simulate_egarch(params: EgarchParams, T: int, seed=None, burn: int = 500) -> np.ndarray:
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(T + burn)
    uncond = (params.xi + params.delta * math.sqrt(2.0 / math.pi)) / (1.0 - params.theta)
    logh = uncond
    prev = params.kappa / (1.0 - params.phi)
    out = np.empty(T + burn)
    for t in range(T + burn):
        out[t] = params.kappa + params.phi * prev + math.exp(0.5 * logh) * eps[t]
        logh = params.xi + params.theta * logh + params.tau * eps[t] + params.delta * abs(eps[t])
        prev = out[t]
    return out[burn:]


def fit_egarch(r, standard_errors: bool = True) -> EgarchFit:
    """Gaussian quasi maximum likelihood for AR(1)-EGARCH(1,1)."""
    r = np.asarray(r, dtype=float)
    if r.ndim != 1 or r.size < 50:
        raise InvalidInput("EGARCH needs at least 50 returns")
    if not np.all(np.isfinite(r)):
        raise InvalidInput("returns have non-finite entries")
    h1 = float(np.var(r))
    r0 = float(np.mean(r))
    x = np.column_stack([np.ones(r.size - 1), r[:-1]])
    kappa0, phi0 = np.linalg.lstsq(x, r[1:], rcond=None)[0]
    phi0 = float(np.clip(phi0, -0.9, 0.9))
    theta0, delta0 = 0.9, 0.1
    xi0 = (1.0 - theta0) * math.log(h1) - delta0 * math.sqrt(2.0 / math.pi)
    u0 = np.array([kappa0, math.atanh(phi0), xi0, math.atanh(theta0), 0.0, delta0])

    def negll(u):
        p = _egarch_natural(u)
        _, _, ll = _egarch_pass(r, p.kappa, p.phi, p.xi, p.theta, p.tau, p.delta, h1, r0)
        val = -float(np.sum(ll)) / r.size
        return val if np.isfinite(val) else FAIL_PENALTY

    trace = []
    best = None
    for start in (u0, u0 + np.array([0, 0, 0, -0.8, 0, 0])):
        res = optimize.minimize(negll, start, jac=lambda u: central_gradient(negll, u, 1e-6), method="BFGS",
                                options={"gtol": 1e-7, "maxiter": 1000})
        trace.append(res.message)
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun) or best.fun >= FAIL_PENALTY:
        raise EstimationFailure("EGARCH optimization failed", trace=trace)
    p = _egarch_natural(best.x)
    z, h, ll = _egarch_pass(r, p.kappa, p.phi, p.xi, p.theta, p.tau, p.delta, h1, r0)
    se = np.full(6, np.nan)
    if standard_errors:
        theta = p.as_array()

        def per_t(th):
            return _egarch_pass(r, *th, h1, r0)[2]

        hess = numerical_hessian(lambda th: float(np.sum(per_t(th))), theta)
        scores = central_gradient(per_t, theta, 1e-6)
        cov, _ = sandwich(hess, scores)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return EgarchFit(p, z, h, float(np.sum(ll)), se, bool(best.success or np.max(np.abs(best.jac)) < 1e-4))


# --------------------------------------------------------- parameter handling


def param_count(kind: sc.ModelKind, n: int, targeting: bool = False, scalar: bool = False,
                estimate_dofs: bool = True) -> int:
    """Number of estimated parameters; a targeted intercept is not counted."""
    d = kind.state_dim(n)
    dyn = 2 if scalar else 2 * d
    dist = kind.distribution
    k = dk.n_dofs(dist.tag, n, kind.block, dist.partition) if estimate_dofs else 0
    return (0 if targeting else d) + dyn + k


@dataclass(frozen=True)
class ParamLayout:
    """Ordering ``[mu, beta, alpha, nu]`` of the estimated parameters and the
    map to an unconstrained vector: ``beta = tanh(u)``, ``alpha`` and ``mu``
    free, ``nu`` a logistic map onto ``(NU_MIN, NU_MAX)``."""

    d: int
    n_dofs: int
    targeting: bool = False
    scalar: bool = False
    fixed_mu: np.ndarray | None = None
    fixed_dofs: tuple[float, ...] | None = None

    @property
    def n_dyn(self) -> int:
        return 1 if self.scalar else self.d

    @property
    def size(self) -> int:
        return (0 if self.targeting else self.d) + 2 * self.n_dyn + (0 if self.fixed_dofs is not None else self.n_dofs)

    def names(self) -> list[str]:
        out = [] if self.targeting else [f"mu[{i}]" for i in range(self.d)]
        out += [f"beta[{i}]" for i in range(self.n_dyn)] + [f"alpha[{i}]" for i in range(self.n_dyn)]
        if self.fixed_dofs is None:
            out += [f"nu[{i}]" for i in range(self.n_dofs)]
        return out

    def unpack(self, theta: np.ndarray) -> tuple[dy.VarParams, tuple[float, ...]]:
        theta = np.asarray(theta, dtype=float)
        pos = 0
        if self.targeting:
            mu = self.fixed_mu
        else:
            mu = theta[: self.d]
            pos = self.d
        beta = theta[pos : pos + self.n_dyn]
        alpha = theta[pos + self.n_dyn : pos + 2 * self.n_dyn]
        pos += 2 * self.n_dyn
        dofs = self.fixed_dofs if self.fixed_dofs is not None else tuple(theta[pos:])
        if self.scalar:
            return dy.VarParams.scalar(mu, beta[0], alpha[0]), dofs
        return dy.VarParams(mu, beta, alpha), dofs

    def pack(self, params: dy.VarParams, dofs) -> np.ndarray:
        parts = [] if self.targeting else [params.mu]
        if self.scalar:
            parts += [params.beta[:1], params.alpha[:1]]
        else:
            parts += [params.beta, params.alpha]
        if self.fixed_dofs is None:
            parts.append(np.asarray(dofs, dtype=float))
        return np.concatenate(parts) if parts else np.zeros(0)

    def _split(self, v):
        pos = 0 if self.targeting else self.d
        return pos, pos + self.n_dyn, pos + 2 * self.n_dyn

    def to_free(self, theta: np.ndarray) -> np.ndarray:
        u = np.array(theta, dtype=float)
        b0, a0, nu0 = self._split(u)
        u[b0:a0] = np.arctanh(u[b0:a0])
        span = dk.NU_MAX - dk.NU_MIN
        u[nu0:] = special.logit((u[nu0:] - dk.NU_MIN) / span)
        return u

    def from_free(self, u: np.ndarray) -> np.ndarray:
        theta = np.array(u, dtype=float)
        b0, a0, nu0 = self._split(theta)
        theta[b0:a0] = np.tanh(theta[b0:a0])
        theta[nu0:] = dk.NU_MIN + (dk.NU_MAX - dk.NU_MIN) * special.expit(theta[nu0:])
        return theta


def layout_for(kind: sc.ModelKind, n: int, targeting: bool = False, scalar: bool = False,
               fixed_mu=None, fixed_dofs=None) -> ParamLayout:
    dist = kind.distribution
    k = dk.n_dofs(dist.tag, n, kind.block, dist.partition)
    if targeting and fixed_mu is None:
        raise InvalidInput("targeting needs the targeted intercept")
    mu = None if fixed_mu is None else np.asarray(fixed_mu, dtype=float)
    return ParamLayout(kind.state_dim(n), k, targeting, scalar, mu,
                       None if fixed_dofs is None else tuple(float(v) for v in fixed_dofs))


def model_with_dofs(kind: sc.ModelKind, dofs) -> sc.ModelKind:
    if kind.distribution.tag == dk.GAUSSIAN:
        return kind
    return sc.ModelKind(kind.distribution.with_dofs(dofs), kind.block, kind.structure)


# ------------------------------------------------------------- starting values


def fit_univariate_t(x) -> float:
    """Degrees of freedom of a unit-variance t fitted by maximum likelihood,
    clamped to ``[NU_MIN, NU_MAX]``."""
    x = np.asarray(x, dtype=float)
    x = x / np.sqrt(np.mean(x**2))

    def neg(nu):
        return -float(np.sum(dk.std_t_logpdf(x, nu)))

    res = optimize.minimize_scalar(neg, bounds=(dk.NU_MIN, dk.NU_MAX), method="bounded", options={"xatol": 1e-4})
    return float(np.clip(res.x, dk.NU_MIN, dk.NU_MAX))


def dof_starting_values(z, c_hat: np.ndarray | None = None) -> np.ndarray:
    """Per-series dof estimates from ``C^{-1/2} Z`` (symmetric root)."""
    z = np.asarray(z, dtype=float)
    c_hat = dy.sample_correlation(z) if c_hat is None else np.asarray(c_hat, dtype=float)
    s = mk.spectral(c_hat)
    if s.values[-1] <= 0:
        raise SingularMatrix("starting correlation is not positive definite", eigenvalue=float(s.values[-1]))
    u = z @ s.apply(lambda w: w**-0.5)
    return np.array([fit_univariate_t(u[:, j]) for j in range(z.shape[1])])


def default_dofs(kind: sc.ModelKind, z) -> tuple[float, ...]:
    """Starting degrees of freedom aggregated to the model's grouping."""
    tag = kind.distribution.tag
    if tag == dk.GAUSSIAN:
        return ()
    per = np.clip(dof_starting_values(z), dk.NU_MIN + NU_START_MARGIN, dk.NU_MAX - 10.0)
    if tag == dk.MVT:
        return (float(np.median(per)),)
    if tag == dk.HETERO:
        return tuple(per)
    labels = kind.block.labels if kind.block is not None else np.repeat(np.arange(len(kind.distribution.partition)),
                                                                         kind.distribution.partition)
    groups = tuple(float(np.median(per[labels == g])) for g in range(labels.max() + 1))
    if tag == dk.CLUSTER:
        return groups
    return (float(np.median(per)),) + groups


# ------------------------------------------------------------------ estimation


@dataclass
class EstimationResult:
    kind: sc.ModelKind
    layout: ParamLayout
    theta: np.ndarray
    params: dy.VarParams
    dofs: tuple[float, ...]
    loglik: float
    T: int
    param_count: int
    converged: bool
    message: str
    iterations: int
    standard_errors: np.ndarray | None = None
    sandwich_ok: bool | None = None
    loglik_marginal: float | None = None
    loglik_copula: float | None = None
    starts: list = field(default_factory=list)

    @property
    def aic(self) -> float:
        return aic(self.loglik, self.param_count)

    @property
    def bic(self) -> float:
        return bic(self.loglik, self.param_count, self.T)

    @property
    def names(self) -> list[str]:
        return self.layout.names()

    @property
    def fitted_kind(self) -> sc.ModelKind:
        return model_with_dofs(self.kind, self.dofs)


def _objective(z, kind, layout: ParamLayout):
    t_len = z.shape[0]
    if kind.is_block:
        spec = kind.block
        y0, ss, dev = dy.block_inputs(z, spec)
        consts = (spec.sizes_array.astype(float), spec.labels.astype(np.int64), np.flatnonzero(spec.free_mask))
        code = dy.KERNEL_CODES[kind.distribution.tag]

        def per_t(theta):
            params, dofs = layout.unpack(theta)
            dof_arr = np.asarray(dofs if len(dofs) else (0.0,), dtype=float)
            out = bk.block_filter(y0, ss, dev, *consts, params.mu, params.beta, params.alpha, code, dof_arr,
                                  cp.ETA_TOL, 100, dy.STATE_BOUND, spec.eta_dim)
            if out[5] != bk.OK:
                return None
            return out[0]
    else:
        def per_t(theta):
            params, dofs = layout.unpack(theta)
            try:
                return dy.run_filter(z, model_with_dofs(kind, dofs), params).per_t
            except ClusterGarchError:
                return None

    def loglik(theta):
        vals = per_t(theta)
        return -FAIL_PENALTY * t_len if vals is None else float(np.sum(vals))

    return per_t, loglik


def converged(res, gtol: float) -> bool:
    """Optimizer success, or a small gradient after a precision-loss stop."""
    gnorm = float(np.max(np.abs(res.jac))) if res.jac is not None and np.size(res.jac) else 0.0
    return bool(res.success or gnorm < 10 * gtol)


def opg_inverse(per_obs, u: np.ndarray, threads: int = 1) -> np.ndarray | None:
    """Inverse outer product of per-observation score differences, scaled for
    a mean objective; a starting Hessian for BFGS."""
    def safe(x):
        v = per_obs(x)
        return None if v is None else np.asarray(v, dtype=float)

    base = safe(u)
    if base is None:
        return None
    g = central_gradient(lambda x: base * np.nan if safe(x) is None else safe(x), u, threads=threads)
    if not np.all(np.isfinite(g)):
        return None
    opg = g.T @ g / base.size
    try:
        inv = np.linalg.inv(opg + 1e-8 * np.eye(u.size) * max(1.0, np.trace(opg) / u.size))
    except np.linalg.LinAlgError:
        return None
    return 0.5 * (inv + inv.T)


def maximize(neg, u0: np.ndarray, n_starts: int = 3, jitter: float = 0.1, explore_iter: int = 4, seed=0,
             maxiter: int = 400, gtol: float = 1e-5, threads: int = 1, per_obs=None):
    """Multi-start BFGS with central-difference gradients on ``neg``.

    Each start runs ``explore_iter`` iterations; the best is continued to
    convergence. Starts far worse than the best starting value are skipped. ``per_obs`` (per-observation log-likelihoods on the same
    scale) seeds BFGS with an outer-product Hessian. Returns the scipy result
    and a per-start trace.
    """

    def grad(u):
        return central_gradient(neg, u, threads=threads)

    def bfgs(x, iters):
        opts = {"maxiter": iters, "gtol": gtol}
        if per_obs is not None:
            inv0 = opg_inverse(per_obs, x, threads)
            if inv0 is not None:
                opts["hess_inv0"] = inv0
        return optimize.minimize(neg, x, jac=grad, method="BFGS", options=opts)

    if n_starts <= 1:
        f0 = neg(u0)
        if not np.isfinite(f0) or f0 >= FAIL_PENALTY:
            raise EstimationFailure("the starting point failed to filter", trace=[(0, "start infeasible", np.nan)])
        res = bfgs(u0, maxiter)
        if res.fun >= FAIL_PENALTY:
            raise EstimationFailure("optimizer ended at an infeasible point", trace=[])
        return res, [(0, str(res.message), float(res.fun))]
    rng = np.random.default_rng(seed)
    starts = [u0] + [u0 + jitter * rng.standard_normal(u0.size) for _ in range(max(n_starts, 1) - 1)]
    trace, explored = [], []
    initial = [neg(s) for s in starts]
    feasible = [f for f in initial if np.isfinite(f) and f < FAIL_PENALTY]
    best0 = min(feasible) if feasible else np.inf
    for i, (s, f0) in enumerate(zip(starts, initial)):
        if not np.isfinite(f0) or f0 >= FAIL_PENALTY:
            trace.append((i, "start infeasible", float("nan")))
            continue
        if f0 > best0 + SCREEN_MARGIN:
            trace.append((i, "start screened out", float(f0)))
            continue
        res = bfgs(s, explore_iter)
        explored.append(res)
        trace.append((i, str(res.message), float(res.fun)))
    if not explored:
        raise EstimationFailure("every starting point failed to filter", trace=trace)
    best = min(explored, key=lambda r: r.fun)
    res = bfgs(best.x, maxiter)
    if res.fun > best.fun:
        res = best
    if res.fun >= FAIL_PENALTY:
        raise EstimationFailure("optimizer ended at an infeasible point", trace=trace)
    return res, trace


def fit_correlation(z, kind: sc.ModelKind, targeting: bool = False, scalar: bool = False, estimate_dofs: bool = True,
                    n_starts: int = 3, jitter: float = 0.1, explore_iter: int = 4, seed=0, start=None,
                    maxiter: int = 400, gtol: float = 1e-5, standard_errors: bool = True,
                    threads: int = 1) -> EstimationResult:
    """Maximum likelihood for a score-driven correlation model.

    Every start (the first is deterministic, the rest are jittered by
    ``jitter`` on the unconstrained scale) runs ``explore_iter`` quasi-Newton
    iterations; the best is then run to convergence. ``start`` may be a
    ``(VarParams, dofs)`` pair. With ``estimate_dofs=False`` the degrees of
    freedom are held at their starting values.
    """
    z = np.asarray(z, dtype=float)
    t_len, n = z.shape
    mu_hat = dy.target_mu(z, kind.block if kind.is_block else None)
    if start is None:
        d = kind.state_dim(n)
        p0 = dy.VarParams(mu_hat, np.full(d, 0.95), np.full(d, 0.05))
        dofs0 = default_dofs(kind, z)
    else:
        p0, dofs0 = start
    layout = layout_for(kind, n, targeting, scalar, fixed_mu=mu_hat if targeting else None,
                        fixed_dofs=None if estimate_dofs else dofs0)
    per_t, loglik = _objective(z, kind, layout)

    def neg(u):
        return -loglik(layout.from_free(u)) / t_len

    u0 = layout.to_free(layout.pack(p0, dofs0))
    res, trace = maximize(neg, u0, n_starts=n_starts, jitter=jitter, explore_iter=explore_iter, seed=seed,
                          maxiter=maxiter, gtol=gtol, threads=threads,
                          per_obs=lambda u: per_t(layout.from_free(u)))
    theta = layout.from_free(res.x)
    params, dofs = layout.unpack(theta)
    out = EstimationResult(kind, layout, theta, params, tuple(dofs), -res.fun * t_len, t_len,
                           layout.size, converged(res, gtol), str(res.message), int(res.nit), starts=trace)
    if standard_errors and layout.size:
        cov, ok = sandwich_covariance(per_t, loglik, theta, threads)
        out.standard_errors = np.sqrt(np.maximum(np.diag(cov), 0.0))
        out.sandwich_ok = ok
    return out


def sandwich_covariance(per_t, loglik, theta: np.ndarray, threads: int = 1):
    """Sandwich covariance in natural parameters from numerical derivatives."""
    hess = numerical_hessian(loglik, theta, threads=threads)

    def safe(th):
        v = per_t(th)
        return np.full(per_t(theta).size, np.nan) if v is None else v

    scores = central_gradient(safe, theta, step=1e-5, threads=threads)
    if not np.all(np.isfinite(scores)):
        raise EstimationFailure("filter failed while differentiating per-observation likelihoods")
    return sandwich(hess, scores)


def filter_fitted(z, fit: EstimationResult) -> dy.FilterOutput:
    return dy.run_filter(z, fit.fitted_kind, fit.params)


# --------------------------------------------------------------- decomposition


@dataclass(frozen=True)
class Decomposition:
    marginal: float
    copula: float
    marginal_per_t: np.ndarray
    failures: list


def _marginal_logpdf(z: np.ndarray, corrs: np.ndarray, kind: sc.ModelKind, chunk: int = 1500):
    dist = kind.distribution
    t_len, n = z.shape
    if dist.tag == dk.GAUSSIAN:
        return stats.norm.logpdf(z), []
    if dist.tag == dk.MVT:
        return dk.std_t_logpdf(z, dist.dofs[0]), []
    spec = dk.convolution_spec(dist, n, kind.block)
    pt = spec.P.T
    weights = np.empty((t_len, n, spec.G))
    for t in range(t_len):
        cols = pt @ dk.corr_root(corrs[t])
        for g, sl in enumerate(spec.slices()):
            weights[t, :, g] = np.sqrt(np.sum(cols[sl, :] ** 2, axis=0))
    flat_z = z.reshape(-1)
    flat_w = weights.reshape(-1, spec.G)
    dens = np.empty(flat_z.size)
    for lo in range(0, flat_z.size, chunk):
        dens[lo : lo + chunk] = dk.convolution_pdf_batch(flat_z[lo : lo + chunk], flat_w[lo : lo + chunk], spec.dofs)
    bad = ~(dens > 0) | ~np.isfinite(dens)
    failures = [divmod(int(i), n) for i in np.flatnonzero(bad)]
    with np.errstate(divide="ignore"):
        out = np.where(bad, np.nan, np.log(np.where(bad, 1.0, dens)))
    return out.reshape(t_len, n), failures


def decompose_loglik(z, kind: sc.ModelKind, out: dy.FilterOutput) -> Decomposition:
    """Split the log-likelihood into marginal and copula parts using the
    time-t marginals of the filtered correlation matrices.

    Cells whose marginal density cannot be evaluated are reported in
    ``failures`` as ``(t, j)`` and excluded from the marginal total.
    """
    z = np.asarray(z, dtype=float)
    corrs = None if kind.distribution.tag in (dk.GAUSSIAN, dk.MVT) else dy.correlation_path(out, kind)
    logs, failures = _marginal_logpdf(z, corrs, kind)
    per_t = np.nansum(logs, axis=1)
    marginal = float(np.sum(per_t))
    return Decomposition(marginal, out.loglik_total - marginal, per_t, failures)


def decompose_fit(z, fit: EstimationResult) -> Decomposition:
    dec = decompose_loglik(z, fit.fitted_kind, filter_fitted(z, fit))
    fit.loglik_marginal = dec.marginal
    fit.loglik_copula = dec.copula
    return dec


# ---------------------------------------------------------------- out of sample


@dataclass(frozen=True)
class OosReport:
    fit: EstimationResult
    loglik: float
    loglik_marginal: float
    loglik_copula: float
    T_test: int

    @property
    def per_observation(self) -> float:
        return self.loglik / self.T_test


def evaluate_frozen(z_train, z_test, fit: EstimationResult) -> OosReport:
    """Filter through train and test with frozen parameters; report the test part."""
    z_train = np.asarray(z_train, dtype=float)
    z_test = np.asarray(z_test, dtype=float)
    full = np.vstack([z_train, z_test])
    kind = fit.fitted_kind
    out = dy.run_filter(full, kind, fit.params)
    t0 = z_train.shape[0]
    test_out = dy.FilterOutput(out.path[t0:], out.per_t[t0:], out.final_state,
                               None if out.block_rho is None else out.block_rho[t0:])
    try:
        dec = decompose_loglik(z_test, kind, test_out)
        marginal, copula = dec.marginal, dec.copula
    except QuadratureFailure:
        marginal = copula = float("nan")
    return OosReport(fit, test_out.loglik_total, marginal, copula, z_test.shape[0])


def oos_evaluate(z_train, z_test, kind: sc.ModelKind, **fit_options) -> OosReport:
    """Fit on the training sample, then evaluate on the test sample."""
    fit = fit_correlation(z_train, kind, **fit_options)
    return evaluate_frozen(z_train, z_test, fit)
