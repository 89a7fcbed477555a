import numpy as np
import pytest

from clustergarch import _blockkernel as bk
from clustergarch import corrparam as cp
from clustergarch import distributions as dk
from clustergarch import dynamics as dy
from clustergarch import scores as sc
from clustergarch.errors import FilterFailure, InvalidInput, InvalidSpec

SPEC = cp.BlockSpec((3, 3, 3))
RHO = np.array([[0.5, 0.3, 0.2], [0.3, 0.6, 0.25], [0.2, 0.25, 0.4]])
MU = cp.eta_of_block(cp.factors_from_rho(RHO, SPEC))[SPEC.free_mask]
DOFS = {dk.GAUSSIAN: (), dk.MVT: (7.0,), dk.CLUSTER: (5.0, 8.0, 12.0), dk.HETERO: tuple(np.linspace(5, 12, 9)),
        dk.CANONICAL: (6.0, 5.0, 8.0, 12.0)}


def kind_for(tag, spec=SPEC):
    dofs = DOFS[tag] if spec is SPEC else tuple(np.linspace(5, 9, dk.n_dofs(tag, spec.n, spec)))
    return sc.ModelKind(dk.ModelDistribution(tag, dofs), spec)


@pytest.mark.parametrize("sizes", [(2, 3, 4), (1, 3, 2), (3,), (1, 1, 3)])
@pytest.mark.parametrize("tag", dk.TAGS)
def test_compiled_step_matches_reference(sizes, tag):
    spec = cp.BlockSpec(sizes)
    rng = np.random.default_rng(len(sizes) + 7 * sum(sizes))
    kind = kind_for(tag, spec)
    eta = rng.normal(0, 0.3, spec.eta_dim)
    eta[~spec.free_mask] = 0.0
    f = cp.A_of_eta(eta, spec)
    z = dk.sample(kind.distribution, f, 1, seed=rng)
    ref = sc.score(z[0], f, kind)
    ll_ref = float(dk.loglik(z[0], f, kind.distribution))
    y0, ss, dev = dy.block_inputs(z, spec)
    ll, grad, scale, _, rho, status = bk.step_eval(
        eta, np.zeros(spec.K), spec.sizes_array.astype(float), spec.labels.astype(np.int64),
        np.flatnonzero(spec.free_mask), y0[0], ss[0], dev[0], dy.KERNEL_CODES[tag], dy.kernel_dofs(kind),
        1e-12, 100)
    assert status == bk.OK
    assert abs(ll - ll_ref) < 1e-11
    np.testing.assert_allclose(grad, ref.score, atol=1e-11)
    np.testing.assert_allclose(scale, ref.scale, rtol=1e-11)
    np.testing.assert_allclose(rho, cp.block_values(cp.canonical_compose(f), spec), atol=1e-12)


@pytest.mark.parametrize("tag", dk.TAGS)
def test_filter_reproduces_simulated_path(tag):
    kind = kind_for(tag)
    params = dy.VarParams(MU, 0.97, 0.04)
    sim = dy.simulate(kind, params, 300, seed=3)
    out = dy.run_filter(sim.z, kind, params)
    np.testing.assert_allclose(out.path, sim.path, atol=1e-12)
    assert out.T == 300
    # per-observation likelihood matches a fresh dense evaluation
    c = dy.correlation_path(out, kind)
    dense = [float(dk.loglik(sim.z[t], c[t], kind.distribution, SPEC)) for t in (0, 150, 299)]
    np.testing.assert_allclose(out.per_t[[0, 150, 299]], dense, rtol=1e-10)


def test_general_filter_reproduces_simulated_path():
    kind = sc.ModelKind(dk.ModelDistribution(dk.CLUSTER, (5.0, 9.0)), cp.BlockSpec((2, 2)), "general")
    c = np.array([[1, .5, .2, .1], [.5, 1, .3, .2], [.2, .3, 1, .4], [.1, .2, .4, 1.]])
    params = dy.VarParams(cp.gamma_of_corr(c), 0.95, 0.05)
    sim = dy.simulate(kind, params, 120, seed=1)
    out = dy.run_filter(sim.z, kind, params)
    np.testing.assert_allclose(out.path, sim.path, atol=1e-12)


@pytest.mark.parametrize("tag", [dk.GAUSSIAN, dk.CLUSTER])
def test_no_loading_gives_static_likelihood(tag):
    kind = kind_for(tag)
    sim = dy.simulate(kind, dy.VarParams(MU, 0.97, 0.04), 200, seed=4)
    out = dy.run_filter(sim.z, kind, dy.VarParams(MU, 0.97, 0.0))
    assert abs(out.loglik_total - dy.static_loglik(sim.z, kind, MU)) < 1e-9
    np.testing.assert_allclose(out.path, np.broadcast_to(MU, out.path.shape), atol=0)


def test_simulation_is_deterministic():
    kind = kind_for(dk.CLUSTER)
    a = dy.simulate(kind, dy.VarParams(MU, 0.9, 0.05), 50, seed=9)
    b = dy.simulate(kind, dy.VarParams(MU, 0.9, 0.05), 50, seed=9)
    np.testing.assert_array_equal(a.z, b.z)


def test_explosive_parameters_raise_filter_failure():
    kind = kind_for(dk.GAUSSIAN)
    sim = dy.simulate(kind, dy.VarParams(MU, 0.97, 0.04), 200, seed=2)
    with pytest.raises(FilterFailure) as info:
        dy.run_filter(sim.z * 3, kind, dy.VarParams(MU, 1.5, 5.0))
    assert info.value.t is not None


def test_var_params_broadcast_and_validate():
    p = dy.VarParams(np.zeros(4), 0.9, [0.1])
    assert p.beta.tolist() == [0.9] * 4 and p.alpha.tolist() == [0.1] * 4
    assert p.stationary() and not dy.VarParams([0.0], 1.2, 0.1).stationary()
    with pytest.raises(InvalidInput):
        dy.VarParams(np.zeros(3), np.zeros(2), 0.1)
    with pytest.raises(InvalidInput):
        dy.VarParams([np.nan], 0.9, 0.1)


def test_dimension_mismatch_rejected():
    kind = kind_for(dk.GAUSSIAN)
    with pytest.raises(InvalidSpec):
        dy.run_filter(np.zeros((10, 9)), kind, dy.VarParams(np.zeros(5), 0.9, 0.1))
    with pytest.raises(InvalidSpec):
        dy.run_filter(np.zeros((10, 8)), kind, dy.VarParams(MU, 0.9, 0.1))
    with pytest.raises(InvalidInput):
        dy.run_filter(np.full((10, 9), np.nan), kind, dy.VarParams(MU, 0.9, 0.1))


def test_block_targeting_recovers_exact_block_matrix():
    c = cp.canonical_compose(cp.factors_from_rho(RHO, SPEC))
    f = dy.block_average(c, SPEC)
    np.testing.assert_allclose(cp.canonical_compose(f), c, atol=1e-13)
    root = np.linalg.cholesky(c)
    z = np.random.default_rng(0).standard_normal((200_000, 9)) @ root.T
    mu_hat = dy.target_mu(z, SPEC)
    np.testing.assert_allclose(mu_hat, MU, atol=0.02)


def test_general_targeting_matches_sample_correlation(rng):
    z = rng.standard_normal((500, 4)) * [1.0, 2.0, 0.5, 3.0]
    c = dy.sample_correlation(z)
    np.testing.assert_allclose(np.diag(c), 1.0)
    np.testing.assert_allclose(cp.corr_of_gamma(dy.target_mu(z)), c, atol=1e-10)


def test_block_rho_output_matches_correlation_path():
    kind = kind_for(dk.CLUSTER)
    sim = dy.simulate(kind, dy.VarParams(MU, 0.97, 0.04), 40, seed=6)
    out = dy.run_filter(sim.z, kind, dy.VarParams(MU, 0.97, 0.04))
    mats = dy.correlation_path(out, kind)
    for t in (0, 39):
        np.testing.assert_allclose(out.block_rho[t], cp.block_values(mats[t], SPEC), atol=1e-12)
