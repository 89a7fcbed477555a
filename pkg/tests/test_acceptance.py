"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

Reference values come from the oracles module (scipy linear algebra and
densities, finite differences, Monte Carlo), never from the code under test.
"""

import time
import tracemalloc

import numpy as np
import pytest
from scipy import integrate

from clustergarch import corrparam as cp
from clustergarch import dcc
from clustergarch import distributions as dk
from clustergarch import dynamics as dy
from clustergarch import matrixkit as mk
from clustergarch import estimation as es
from clustergarch import scores as sc

from oracles import (central_diff, dense_block_corr, gamma_dense, logm, mc_information, mc_moments,
                     random_block_rho, random_corr, std_t_pdf)

# ------------------------------------------------------------ 1 worked example

SMALL_C = np.array([[1.0, 0.5, 0.3], [0.5, 1.0, 0.7], [0.3, 0.7, 1.0]])
SMALL_GAMMA = (0.53, 0.13, 0.85)
SEVEN_SIZES = (2, 2, 3)
SEVEN_RHO = np.array([[0.8, 0.4, 0.2], [0.4, 0.6, 0.1], [0.2, 0.1, 0.3]])
# distinct off-diagonal log C values in vech order of the condensed matrix
SEVEN_OFFDIAG = (1.02, 0.251, 0.115, 0.626, 0.036, 0.259)
SEVEN_DIAG = (-0.59, -0.29, -0.09)


def seven_example():
    c = dense_block_corr(SEVEN_RHO, SEVEN_SIZES)
    spec = cp.BlockSpec(SEVEN_SIZES)
    eta = cp.eta_of_block(cp.canonical_decompose(c, spec))
    diag = np.array([mk.logm(c)[spec.block(k), spec.block(k)].diagonal().mean() for k in range(spec.K)])
    # independent route: scipy logm of the dense matrix
    ref = logm(c)
    lab = spec.labels
    first = [int(np.flatnonzero(lab == k)[0]) for k in range(spec.K)]
    second = [int(np.flatnonzero(lab == k)[-1]) for k in range(spec.K)]
    r, col = mk.lower_indices(spec.K, strict=False)
    ref_eta = np.array([ref[second[i], first[j]] for i, j in zip(r, col)])
    np.testing.assert_allclose(eta, ref_eta, atol=1e-12)
    np.testing.assert_allclose(diag, [ref[f, f] for f in first], atol=1e-12)
    return eta, diag


def test_criterion_1_worked_example(verdict):
    start = time.perf_counter()
    g = cp.gamma_of_corr(SMALL_C)
    np.testing.assert_allclose(g, gamma_dense(SMALL_C), atol=1e-12)
    gamma_err = np.max(np.abs(g - SMALL_GAMMA))
    eta, diag = seven_example()
    elapsed = time.perf_counter() - start
    off_err = np.max(np.abs(eta - SEVEN_OFFDIAG))
    diag_err = np.abs(diag - SEVEN_DIAG)
    ok = gamma_err < 5e-3 and off_err < 5e-3 and np.all(diag_err < 5e-3) and elapsed < 1
    verdict(1, ok, f"gamma err {gamma_err:.1e}; 7x7 off-diagonal err {off_err:.1e}; "
                   f"diagonal {np.round(diag, 5).tolist()} vs {list(SEVEN_DIAG)} (errs {np.round(diag_err, 4).tolist()}, "
                   f"last printed value is truncated); {elapsed:.2f} s")
    # every entry except the truncated one is asserted here; that one has its own xfail
    assert gamma_err < 5e-3 and off_err < 5e-3 and np.all(diag_err[:2] < 5e-3) and elapsed < 1


@pytest.mark.xfail(strict=True, reason="printed -0.09 is -0.097 truncated, outside 5e-3")
def test_criterion_1_third_block_diagonal():
    _, diag = seven_example()
    assert abs(diag[2] - SEVEN_DIAG[2]) < 5e-3


# ------------------------------------------------------------- 2 round trips


def test_criterion_2_round_trips(verdict):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    gamma_err, eta_err, worst_iter = 0.0, 0.0, 0
    for i in range(100):
        n = 2 + i % 9
        c = random_corr(n, rng)
        g = cp.gamma_of_corr(c)
        sol = cp.solve_gamma(g)
        gamma_err = max(gamma_err, np.max(np.abs(sol.corr - c)), np.max(np.abs(cp.gamma_of_corr(sol.corr) - g)))
        worst_iter = max(worst_iter, sol.iterations)
    for i in range(100):
        k = 1 + i % 6
        sizes = tuple(int(m) for m in rng.integers(2, 5, k))
        spec = cp.BlockSpec(sizes)
        rho = next(random_block_rho(k, rng, sizes))
        f = cp.factors_from_rho(rho, spec)
        eta = cp.eta_of_block(f)
        sol = cp.solve_eta(eta, spec)
        eta_err = max(eta_err, np.max(np.abs(sol.factors.A - f.A)), np.max(np.abs(sol.factors.lam - f.lam)),
                      np.max(np.abs(cp.eta_of_block(sol.factors) - eta)))
        worst_iter = max(worst_iter, sol.iterations)
    elapsed = time.perf_counter() - start
    ok = verdict(2, gamma_err < 1e-9 and eta_err < 1e-9 and worst_iter < 50 and elapsed < 10,
                 f"gamma<->C err {gamma_err:.1e}, eta<->(A,lam) err {eta_err:.1e}, "
                 f"max iterations {worst_iter}; {elapsed:.2f} s")
    assert ok


# ------------------------------------------------------- 3 canonical identities


def test_criterion_3_canonical_identities(verdict):
    rng = np.random.default_rng(3)
    spec = cp.BlockSpec((3, 5, 2, 6, 4))
    det_err = quad_err = 0.0
    rhos = random_block_rho(spec.K, rng, spec.sizes)
    for _ in range(100):
        rho = next(rhos)
        c = dense_block_corr(rho, spec.sizes)
        f = cp.canonical_decompose(c, spec)
        z = rng.standard_normal(spec.n)
        sign, logdet = np.linalg.slogdet(c)
        # |C| = |A| prod lam^(n_k - 1)
        product = np.linalg.det(f.A) * np.prod(f.lam ** (np.array(spec.sizes) - 1))
        det_err = max(det_err, abs(product - sign * np.exp(logdet)) / np.exp(logdet),
                      abs(f.logdet() - logdet) / abs(logdet))
        dense = z @ np.linalg.solve(c, z)
        quad_err = max(quad_err, abs(float(cp.block_quadform(z, f)) - dense) / dense)
    ok = verdict(3, det_err < 1e-10 and quad_err < 1e-10,
                 f"n=20 K=5, 100 draws: determinant rel err {det_err:.1e}, quadratic form rel err {quad_err:.1e}")
    assert ok


# ---------------------------------------------------------- 4 score vs FD

FD_SPEC = cp.BlockSpec((2, 1, 3))


def random_dist(tag, spec, rng):
    return dk.ModelDistribution(tag, tuple(rng.uniform(3.5, 14, dk.n_dofs(tag, spec.n, spec))))


def test_criterion_4_scores_match_finite_differences(verdict):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst = {}
    for structure in ("general", "block"):
        for tag in dk.TAGS:
            err = 0.0
            for _ in range(20):
                dist = random_dist(tag, FD_SPEC, rng)
                kind = sc.ModelKind(dist, FD_SPEC, structure)
                if structure == "block":
                    eta = rng.uniform(-0.3, 0.6, FD_SPEC.eta_dim)
                    eta[~FD_SPEC.free_mask] = 0.0
                    f = cp.A_of_eta(eta, FD_SPEC)
                    z = dk.sample(dist, f, 1, seed=rng)[0] * rng.uniform(0.5, 2.0)
                    got = sc.score(z, f, kind).score
                    fd = central_diff(lambda e: dk.loglik(z, cp.corr_of_eta(e, FD_SPEC), dist, FD_SPEC), eta)
                    fd = fd[FD_SPEC.free_mask]
                else:
                    g = rng.uniform(-0.4, 0.4, FD_SPEC.n * (FD_SPEC.n - 1) // 2)
                    c = cp.corr_of_gamma(g)
                    z = dk.sample(dist, c, 1, seed=rng, block=FD_SPEC)[0] * rng.uniform(0.5, 2.0)
                    got = sc.score(z, c, kind).score
                    fd = central_diff(lambda x: dk.loglik(z, cp.corr_of_gamma(x), dist, FD_SPEC), g)
                # relative to the gradient's scale so entries that vanish do not divide by FD noise
                err = max(err, np.max(np.abs(got - fd)) / max(np.max(np.abs(fd)), 1e-2))
            worst[(structure, tag)] = err
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = verdict(4, top < 1e-5 and elapsed < 120,
                 f"10 pairs x 20 states, worst relative error {top:.1e}; {elapsed:.1f} s")
    assert ok, worst


# ------------------------------------------------------ 5 information by MC

INFO_SPEC = cp.BlockSpec((2, 3))
INFO_DRAWS = 200_000


def test_criterion_5_information_by_simulation(verdict):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst_info = worst_mean = 0.0
    for structure in ("general", "block"):
        for tag in dk.TAGS:
            if structure == "general":
                spec = cp.BlockSpec((2, 1)) if tag in (dk.CLUSTER, dk.CANONICAL) else None
                n = 3
                dist = dk.ModelDistribution(tag, tuple(rng.uniform(4.5, 12, dk.n_dofs(tag, n, spec))))
                state = cp.corr_of_gamma(rng.uniform(-0.4, 0.4, 3))
                z = dk.sample(dist, state, INFO_DRAWS, seed=rng, block=spec)
                kind = sc.ModelKind(dist, spec, "general")
            else:
                spec = INFO_SPEC
                dist = random_dist(tag, spec, rng)
                eta = rng.uniform(-0.3, 0.5, spec.eta_dim)
                state = cp.A_of_eta(eta, spec)
                z = dk.sample(dist, state, INFO_DRAWS, seed=rng)
                kind = sc.ModelKind(dist, spec, "block")
            res = sc.score(z, state, kind)
            mean, mean_se = mc_moments(res.score)
            info, info_se = mc_information(res.score)
            worst_mean = max(worst_mean, np.max(np.abs(mean) / mean_se))
            worst_info = max(worst_info, np.max(np.abs(info - res.information) / info_se))
    elapsed = time.perf_counter() - start
    ok = verdict(5, worst_info < 3 and worst_mean < 3 and elapsed < 600,
                 f"{INFO_DRAWS} draws per pair: worst |E[gg'] - I| {worst_info:.2f} SE, "
                 f"worst |E[g]| {worst_mean:.2f} SE; {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------- 6 moment constants

ZETA_DRAWS = 500_000


def test_criterion_6_moment_constants(verdict):
    nu, n = 7.0, 3
    rng = np.random.default_rng(6)
    x = dk.sample_standard(dk.ConvolutionSpec((n,), (nu,)), ZETA_DRAWS, rng)
    ss = np.sum(x**2, axis=1)
    w = (nu + n) / (nu - 2.0 + ss)
    i, j = np.tril_indices(n)
    outer = x[:, i] * x[:, j]
    # g and E[g(Z)] for standard normal Z, per degree of homogeneity
    cases = {
        (2, 0): [(np.ones((ZETA_DRAWS, 1)), np.ones(1))],
        (2, 2): [(outer, (i == j).astype(float))],
        (4, 2): [(outer, (i == j).astype(float))],
        (4, 4): [(ss[:, None] ** 2, np.array([n * (n + 2.0)])),
                 (x[:, [0]] ** 2 * x[:, [1]] ** 2, np.ones(1))],
    }
    worst = 0.0
    for (p, q), items in cases.items():
        const = dk.zeta(p, q, nu, n)
        for g, gauss in items:
            mean, se = mc_moments(w[:, None] ** (p / 2) * g)
            worst = max(worst, np.max(np.abs(mean - const * gauss) / se))
    ok = verdict(6, worst < 3, f"(p,q) in (2,0),(2,2),(4,2),(4,4), {ZETA_DRAWS} draws: worst {worst:.2f} SE")
    assert ok


# ------------------------------------------------- 7 convolution marginals


def test_criterion_7_marginal_density(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    spec = dk.ConvolutionSpec((2, 1, 3), (4.0, 7.0, 12.0))
    c = random_corr(6, rng)
    weights = dk.marginal_weights(c, spec, 2)
    dofs = np.repeat(spec.dofs, spec.partition)

    def pdf(z):
        return dk.convolution_pdf(z, weights, dofs)

    mass = sum(integrate.quad(pdf, a, b, limit=200, epsabs=1e-12)[0]
               for a, b in [(-np.inf, -20), (-20, 0), (0, 20), (20, np.inf)])
    grid = np.linspace(-12, 12, 97)
    t_err = max(abs(dk.convolution_pdf(z, [1.0], [nu]) - std_t_pdf(z, nu)) for nu in (3.0, 6.0, 25.0) for z in grid)
    kl2 = dk.kl_best_t(np.full(2, 2 ** -0.5), [6.0] * 2)
    kl10 = dk.kl_best_t(np.full(10, 10 ** -0.5), [6.0] * 10)
    elapsed = time.perf_counter() - start
    ok = verdict(7, abs(mass - 1) < 1e-6 and t_err < 1e-8 and abs(kl2 - 8.75) < 0.2 and abs(kl10 - 26.15) < 0.5
                 and elapsed < 60,
                 f"mass-1 {mass - 1:.1e}; G=1 vs t max err {t_err:.1e}; KL-best dof {kl2:.3f} (G=2), "
                 f"{kl10:.3f} (G=10); {elapsed:.1f} s")
    assert ok


# -------------------------------------------------------- 8 parameter counts


def test_criterion_8_parameter_counts(verdict):
    gauss = dk.ModelDistribution(dk.GAUSSIAN)
    general = es.param_count(sc.ModelKind(gauss, None, "general"), 9)
    vech = dcc.dcc_param_count(9, "vech", sc.ModelKind(gauss, None, "general"))
    k3 = es.param_count(sc.ModelKind(gauss, cp.BlockSpec((3, 3, 3))), 9)
    k10 = sc.ModelKind(gauss, cp.BlockSpec((10,) * 10))
    full, targeted = es.param_count(k10, 100), es.param_count(k10, 100, targeting=True)
    got = (general, vech, k3, full, targeted)
    ok = verdict(8, got == (108, 126, 18, 165, 110), f"p = {got}, expected (108, 126, 18, 165, 110)")
    assert ok


# ----------------------------------------------------- 9 simulation recovery

REC_SPEC = cp.BlockSpec((3, 3, 3))
REC_RHO = np.array([[0.45, 0.15, 0.10], [0.15, 0.55, 0.12], [0.10, 0.12, 0.35]])
REC_DOFS = (5.0, 8.0, 12.0)
REC_REPS = 20
REC_MSE_REPS = 5
REC_SIZES = (500, 2000, 4000)


def filtered_mse(z, kind, truth, fit):
    true_path = dy.run_filter(z, kind, truth).block_rho
    est_path = es.filter_fitted(z, fit).block_rho
    return float(np.mean((true_path - est_path) ** 2))


@pytest.mark.slow
def test_criterion_9_simulation_recovery(verdict):
    start = time.perf_counter()
    kind = sc.ModelKind(dk.ModelDistribution(dk.CLUSTER, REC_DOFS), REC_SPEC)
    mu = cp.eta_of_block(cp.factors_from_rho(REC_RHO, REC_SPEC))
    truth = dy.VarParams.scalar(mu, 0.97, 0.04)
    inside, total = 0, 0
    mse = {size: [] for size in REC_SIZES}
    for rep in range(REC_REPS):
        z = dy.simulate(kind, truth, REC_SIZES[-1], seed=100 + rep).z
        fit = es.fit_correlation(z, kind, seed=rep)
        target = fit.layout.pack(truth, REC_DOFS)
        inside += int(np.sum(np.abs(fit.theta - target) <= 3 * fit.standard_errors))
        total += target.size
        if rep < REC_MSE_REPS:
            mse[REC_SIZES[-1]].append(filtered_mse(z, kind, truth, fit))
            for size in REC_SIZES[:-1]:
                sub = es.fit_correlation(z[:size], kind, seed=rep, standard_errors=False)
                mse[size].append(filtered_mse(z[:size], kind, truth, sub))
    elapsed = time.perf_counter() - start
    coverage = inside / total
    medians = [float(np.median(mse[size])) for size in REC_SIZES]
    monotone = all(a > b for a, b in zip(medians, medians[1:]))
    ok = verdict(9, coverage >= 0.9 and monotone and elapsed < 1800,
                 f"{REC_REPS} fits at T={REC_SIZES[-1]}: {coverage:.1%} of {total} coordinates within 3 SE; "
                 f"median filtered MSE over {REC_MSE_REPS} paths at T={REC_SIZES}: "
                 f"{', '.join(f'{m:.2e}' for m in medians)}; {elapsed / 60:.1f} min")
    assert ok


# ------------------------------------------------------- 10 model ordering


def test_criterion_10_fit_ordering_on_heavy_tailed_data(verdict):
    spec = cp.BlockSpec((3, 3))
    truth_kind = sc.ModelKind(dk.ModelDistribution(dk.CLUSTER, (4.0, 6.0)), spec)
    mu = cp.eta_of_block(cp.factors_from_rho(np.array([[0.5, 0.2], [0.2, 0.4]]), spec))
    z = dy.simulate(truth_kind, dy.VarParams.scalar(mu, 0.96, 0.05), 1500, seed=10).z
    opts = dict(n_starts=3, standard_errors=False)
    gauss = es.fit_correlation(z, sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), spec), **opts)
    conv = es.fit_correlation(z, truth_kind, **opts)
    bench = dcc.dcc_fit(z, sc.ModelKind(truth_kind.distribution, spec, "general"), "scalar", n_starts=3)
    ok = verdict(10, conv.loglik > gauss.loglik and conv.loglik > bench.loglik,
                 f"loglik Cluster-t score {conv.loglik:.1f} > Gaussian score {gauss.loglik:.1f}; "
                 f"Cluster-t score {conv.loglik:.1f} > Cluster-t cDCC {bench.loglik:.1f}")
    assert ok


# ------------------------------------------------------------ 11 scalability

BIG_SPEC = cp.BlockSpec((10,) * 10)
DENSE_KRON_BYTES = 8 * BIG_SPEC.n**4


@pytest.mark.slow
def test_criterion_11_scalability(verdict):
    kind = sc.ModelKind(dk.ModelDistribution(dk.CLUSTER, tuple(np.linspace(5, 14, 10))), BIG_SPEC)
    rng = np.random.default_rng(11)
    rho = next(random_block_rho(BIG_SPEC.K, rng, BIG_SPEC.sizes))
    params = dy.VarParams.scalar(cp.eta_of_block(cp.factors_from_rho(rho, BIG_SPEC)), 0.97, 0.03)
    z = dy.simulate(kind, params, 1000, seed=11).z
    dy.run_filter(z[:5], kind, params)  # compile outside the timing
    tracemalloc.start()
    start = time.perf_counter()
    dy.run_filter(z, kind, params)
    filter_time = time.perf_counter() - start
    start = time.perf_counter()
    fit = es.fit_correlation(z, kind, targeting=True, n_starts=1, maxiter=1, standard_errors=False)
    fit_time = time.perf_counter() - start
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    ok = verdict(11, filter_time < 5 and peak < DENSE_KRON_BYTES / 10 and np.isfinite(fit.loglik),
                 f"n=100 K=10 T=1000 filter {filter_time:.2f} s; one estimation iteration over "
                 f"{fit.param_count} parameters {fit_time:.1f} s; peak traced memory {peak / 2**20:.1f} MiB "
                 f"vs {DENSE_KRON_BYTES / 2**20:.0f} MiB for one dense n^2 x n^2 matrix")
    assert ok
