import numpy as np
import pytest
from hypothesis import given, strategies as st

from clustergarch import corrparam as cp
from clustergarch import distributions as dk
from clustergarch import scores as sc
from clustergarch.errors import InvalidSpec

from oracles import central_diff, mc_information

SPEC = cp.BlockSpec((2, 1, 3))
TAGS = dk.TAGS


def dist_for(tag, spec, rng):
    k = dk.n_dofs(tag, spec.n, spec)
    return dk.ModelDistribution(tag, tuple(rng.uniform(3.5, 14, k)))


def block_state(spec, rng):
    eta = rng.uniform(-0.3, 0.6, spec.eta_dim)
    eta[~spec.free_mask] = 0.0
    return eta, cp.A_of_eta(eta, spec)


@pytest.mark.parametrize("tag", TAGS)
@pytest.mark.parametrize("structure", ["general", "block"])
def test_score_matches_finite_differences(structure, tag, rng):
    for _ in range(4):
        dist = dist_for(tag, SPEC, rng)
        kind = sc.ModelKind(dist, SPEC, structure)
        if structure == "block":
            eta, f = block_state(SPEC, rng)
            z = dk.sample(dist, f, 1, seed=rng)[0] * 1.4
            got = sc.score(z, f, kind).score
            fd = central_diff(lambda e: dk.loglik(z, cp.corr_of_eta(e, SPEC), dist, SPEC), eta)[SPEC.free_mask]
        else:
            g = rng.uniform(-0.4, 0.4, SPEC.n * (SPEC.n - 1) // 2)
            c = cp.corr_of_gamma(g)
            z = dk.sample(dist, c, 1, seed=rng, block=SPEC)[0] * 1.4
            got = sc.score(z, c, kind).score
            fd = central_diff(lambda x: dk.loglik(z, cp.corr_of_gamma(x), dist, SPEC), g)
        np.testing.assert_allclose(got, fd, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(fd).max()))


@pytest.mark.parametrize("tag", TAGS)
def test_block_score_is_chain_rule_of_general_score(tag, rng):
    """gamma = B eta for block matrices, so grad_eta = B' grad_gamma and I_eta = B' I_gamma B."""
    dist = dist_for(tag, SPEC, rng)
    eta, f = block_state(SPEC, rng)
    c = cp.canonical_compose(f)
    z = dk.sample(dist, f, 3, seed=rng)
    b = cp.expansion_matrix(SPEC).toarray()[:, SPEC.free_mask]
    blk = sc.score(z, f, sc.ModelKind(dist, SPEC, "block"))
    gen = sc.score(z, c, sc.ModelKind(dist, SPEC, "general"))
    np.testing.assert_allclose(blk.score, gen.score @ b, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(blk.information, b.T @ gen.information @ b, rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize("tag", TAGS)
@pytest.mark.parametrize("structure", ["general", "block"])
def test_information_is_symmetric_positive_definite(structure, tag, rng):
    dist = dist_for(tag, SPEC, rng)
    kind = sc.ModelKind(dist, SPEC, structure)
    state = block_state(SPEC, rng)[1] if structure == "block" else cp.corr_of_gamma(rng.uniform(-.4, .4, 15))
    info = sc.score(np.zeros(SPEC.n), state, kind).information
    np.testing.assert_allclose(info, info.T, atol=1e-13)
    assert np.linalg.eigvalsh(info)[0] > 0
    assert np.all(sc.score(np.zeros(SPEC.n), state, kind).scale > 0)


@given(st.integers(min_value=0, max_value=10_000))
def test_identity_state_gaussian_score_is_cross_products(seed):
    """At C = I the Gaussian gamma-score reduces to z_i z_j for each pair."""
    r = np.random.default_rng(seed)
    z = r.standard_normal(4)
    got = sc.score(z, np.eye(4), sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), None, "general")).score
    i, j = np.tril_indices(4, -1)
    order = np.lexsort((i, j))
    np.testing.assert_allclose(got, (z[i] * z[j])[order], atol=1e-12)


def test_score_mean_zero_small_sample():
    dist = dk.ModelDistribution(dk.CLUSTER, (5.0, 7.0, 9.0))
    r = np.random.default_rng(3)
    _, f = block_state(SPEC, r)
    z = dk.sample(dist, f, 40_000, seed=r)
    res = sc.score(z, f, sc.ModelKind(dist, SPEC))
    g = res.score
    assert np.all(np.abs(g.mean(0)) < 4 * g.std(0) / np.sqrt(len(g)))
    m, se = mc_information(g)
    assert np.all(np.abs(m - res.information) < 4.5 * se)


def test_structure_validation():
    with pytest.raises(InvalidSpec):
        sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), None, "block")
    with pytest.raises(InvalidSpec):
        sc.ModelKind(dk.ModelDistribution(dk.CANONICAL, (5.0, 5.0)), None, "general")
    with pytest.raises(InvalidSpec):
        sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), SPEC, "diagonal")
