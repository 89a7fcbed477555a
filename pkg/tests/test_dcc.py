import numpy as np
import pytest

from clustergarch import corrparam as cp
from clustergarch import dcc
from clustergarch import distributions as dk
from clustergarch import scores as sc
from clustergarch.errors import FilterFailure, InvalidInput, InvalidSpec

SPEC = cp.BlockSpec((2, 2))
CBAR = np.array([[1, .5, .3, .2], [.5, 1, .25, .3], [.3, .25, 1, .6], [.2, .3, .6, 1.]])


def reference_path(z, cbar, a, b):
    """Plain loop over the recursion with scalar coefficients."""
    q = cbar.copy()
    out = []
    for zt in z:
        d = np.sqrt(np.diag(q))
        out.append(q / np.outer(d, d))
        s = d * zt
        q = (1 - a - b) * cbar + b * q + a * np.outer(s, s)
    return np.array(out)


@pytest.mark.parametrize("tag,dofs", [(dk.GAUSSIAN, ()), (dk.MVT, (6.0,)), (dk.CLUSTER, (5.0, 9.0)),
                                      (dk.CANONICAL, (5.0, 6.0, 9.0))])
def test_filter_matches_loop_and_density(tag, dofs):
    kind = sc.ModelKind(dk.ModelDistribution(tag, dofs), SPEC, "general")
    params = dcc.DccParams.scalar(CBAR, 0.04, 0.93)
    z = dcc.dcc_simulate(params, kind, 200, seed=1)
    out = dcc.dcc_filter(z, params, kind, store=True)
    ref = reference_path(z, CBAR, 0.04, 0.93)
    np.testing.assert_allclose(out.corr, ref, atol=1e-13)
    np.testing.assert_array_equal(np.diagonal(out.corr, axis1=1, axis2=2), 1.0)
    dens = [float(dk.loglik(z[t], ref[t], kind.distribution, SPEC)) for t in range(0, 200, 40)]
    np.testing.assert_allclose(out.per_t[::40], dens, rtol=1e-12)


def test_matrix_coefficients_reduce_to_scalar():
    kind = sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), None, "general")
    z = np.random.default_rng(0).standard_normal((100, 4))
    a = dcc.dcc_filter(z, dcc.DccParams.scalar(CBAR, 0.05, 0.9), kind)
    ones = np.ones((4, 4))
    b = dcc.dcc_filter(z, dcc.DccParams(CBAR, 0.05 * ones, 0.9 * ones), kind)
    np.testing.assert_allclose(a.per_t, b.per_t, rtol=0, atol=0)


def test_lost_definiteness_raises():
    kind = sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), None, "general")
    z = np.random.default_rng(0).standard_normal((50, 4)) * 5
    with pytest.raises(FilterFailure):
        dcc.dcc_filter(z, dcc.DccParams.scalar(CBAR, 0.9, -0.9), kind)


def test_param_counts():
    gauss = sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), None, "general")
    assert dcc.dcc_param_count(9, "vech", gauss) == 126
    assert dcc.dcc_param_count(9, "scalar", gauss) == 38
    with pytest.raises(InvalidSpec):
        dcc.dcc_param_count(9, "full", gauss)


def test_layout_start_round_trip():
    lay = dcc.DccLayout(4, "scalar", 2)
    p, dofs = lay.unpack(lay.start(0.03, 0.95, (5.0, 9.0)), CBAR)
    assert p.alpha[0, 0] == pytest.approx(0.03) and p.beta[0, 0] == pytest.approx(0.95)
    np.testing.assert_allclose(dofs, (5.0, 9.0))
    lay = dcc.DccLayout(4, "vech", 0)
    p, _ = lay.unpack(lay.start(0.03, 0.95, ()), CBAR)
    assert lay.size == 20
    assert np.linalg.eigvalsh(p.alpha)[0] >= -1e-15 and np.linalg.eigvalsh(p.beta)[0] >= -1e-15
    np.testing.assert_allclose(np.diag(p.alpha), 0.03)


def test_scalar_fit_recovers_coefficients():
    kind = sc.ModelKind(dk.ModelDistribution(dk.CLUSTER, (6.0, 10.0)), SPEC, "general")
    z = dcc.dcc_simulate(dcc.DccParams.scalar(CBAR, 0.03, 0.95), kind, 3000, seed=3)
    fit = dcc.dcc_fit(z, kind, standard_errors=True)
    assert fit.converged
    truth = np.array([0.03, 0.95, 6.0, 10.0])
    est = np.array([fit.params.alpha[0, 0], fit.params.beta[0, 0], *fit.dofs])
    assert np.all(np.abs(est - truth) < 3.5 * fit.standard_errors)
    assert fit.param_count == 6 + 2 + 2


def test_vech_fit_is_at_least_as_good_as_scalar():
    kind = sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), None, "general")
    z = dcc.dcc_simulate(dcc.DccParams.scalar(CBAR[:3, :3], 0.03, 0.95), kind, 800, seed=5)
    scalar = dcc.dcc_fit(z, kind, "scalar", n_starts=1)
    vech = dcc.dcc_fit(z, kind, "vech", n_starts=1)
    assert vech.loglik >= scalar.loglik - 1e-6
    assert vech.param_count == 3 + 12


def test_input_validation():
    with pytest.raises(InvalidInput):
        dcc.DccParams(CBAR, np.ones((3, 3)), np.ones((4, 4)))
    kind = sc.ModelKind(dk.ModelDistribution(dk.GAUSSIAN), None, "general")
    with pytest.raises(InvalidInput):
        dcc.dcc_filter(np.zeros((5, 3)), dcc.DccParams.scalar(CBAR, 0.1, 0.8), kind)
