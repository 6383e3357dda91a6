import numpy as np
import pytest

from mfcontrol.cost import estimate_cost, gateaux_of_cost
from mfcontrol.errors import UsageError
from mfcontrol.forward import simulate_ensemble

from conftest import constant_policy


def test_measure_change_agreement(plain_model, grid20, noise20):
    # reweighted reference-measure estimate vs plain original-measure estimate
    pol = constant_policy(grid20, 0.2)
    ref = estimate_cost(plain_model, pol, noise20, measure="reference")
    orig = estimate_cost(plain_model, pol, noise20, measure="original")
    assert abs(ref.value - orig.value) < 3.0 * np.hypot(ref.se, orig.se)
    assert ref.measure == "reference" and orig.measure == "original"
    assert ref.n_paths == noise20.n_paths


def test_measure_mismatch_rejected(plain_model, grid20, noise20):
    pol = constant_policy(grid20, 0.2)
    st = simulate_ensemble(plain_model, pol, noise20, measure="original")
    with pytest.raises(UsageError):
        estimate_cost(plain_model, pol, noise20, measure="reference", states=st)


def test_precomputed_states_reused(plain_model, grid20, noise20):
    pol = constant_policy(grid20, 0.2)
    st = simulate_ensemble(plain_model, pol, noise20)
    a = estimate_cost(plain_model, pol, noise20, states=st)
    b = estimate_cost(plain_model, pol, noise20)
    assert a.value == b.value and a.se == b.se


@pytest.mark.parametrize("fixture", ["plain_model", "meanfield_model"])
def test_fd_extrapolates_to_analytic_gateaux(fixture, grid20, noise20, request):
    # J is quadratic in the control for these models, so the forward
    # differences are linear in eps and Richardson over two eps values
    # removes the bias entirely
    model = request.getfixturevalue(fixture)
    pol = constant_policy(grid20, 0.3)
    direction = constant_policy(grid20, 1.0)
    out = gateaux_of_cost(model, pol, direction, noise20)
    (e1, v1, s1), (e2, v2, s2), _ = out["fd"]
    assert e1 == 2 * e2
    rich = 2 * v2 - v1
    rich_se = np.hypot(2 * s2, s1)
    ana, ana_se = out["analytic"]
    assert abs(rich - ana) < 3.0 * np.hypot(rich_se, ana_se), (rich, ana)


def test_gateaux_fd_rows_linear_in_eps(meanfield_model, grid20, noise20):
    pol = constant_policy(grid20, 0.3)
    direction = constant_policy(grid20, 1.0)
    out = gateaux_of_cost(meanfield_model, pol, direction, noise20)
    eps, vals = out["fd"][:, 0], out["fd"][:, 1]
    ana, _ = out["analytic"]
    # bias (value - analytic) should shrink proportionally with eps
    bias = np.abs(vals - ana)
    assert bias[2] < bias[0]
    slope = np.polyfit(eps, vals, 1)[0]
    assert slope > 0.0  # second derivative of a convex quadratic cost
