import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parmaj import toy
from parmaj.errors import DomainError
from parmaj.solvers import grid_search

INST = toy.ToyInstance()


@pytest.mark.parametrize("y, theta, expected", [(1.5, 0.0, 1.5), (1.5, 1.2, 0.3), (1.5, 1.5, 0.0),
                                                 (1.5, 3.0, 0.0), (-2.0, 0.5, -1.5), (0.0, 1.0, 0.0)])
def test_lower_level_soft_threshold(y, theta, expected):
    assert toy.toy_lower_level(y, theta) == pytest.approx(expected, abs=1e-15)


def test_negative_theta_is_a_domain_error():
    with pytest.raises(DomainError):
        toy.toy_loss(INST, -0.1)


@pytest.mark.parametrize("theta, loss", [(0.0, 0.72), (1.2, 0.0), (1.5, 0.045), (3.0, 0.045)])
def test_loss_examples(theta, loss):
    assert toy.toy_loss(INST, theta) == pytest.approx(loss, abs=1e-15)


def test_closed_form_examples():
    r = toy.toy_surrogates_closed_form(INST, 2.0)
    # x(2) = 0; E(x*) = 1/2 1.2^2 + 2 * 0.3 = 1.32, E(0) = 1.125
    assert r["bregman"] == pytest.approx(0.195, abs=1e-14)
    # q = 0.3 - 1.5 + 2 = 0.8
    assert r["partial"] == pytest.approx(0.32, abs=1e-14)
    assert r["gradient_penalty"] == pytest.approx(0.32, abs=1e-14)


def test_bregman_is_exact_while_signs_agree():
    for t in np.linspace(0.0, 1.2, 121):
        r = toy.toy_surrogates_closed_form(INST, float(t))
        assert r["bregman"] == pytest.approx(r["loss"], abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(x_star=st.floats(-2, 2), y=st.floats(-3, 3), theta=st.floats(0, 3))
def test_ordering_holds_for_any_instance(x_star, y, theta):
    r = toy.toy_surrogates_closed_form(toy.ToyInstance(x_star, y), theta)
    tol = 1e-9
    assert r["loss"] <= r["bregman"] + tol
    assert r["bregman"] <= r["partial"] + tol
    assert r["partial"] <= r["gradient_penalty"] + tol


def test_partial_e1_feasibility_window():
    assert toy.toy_partial_e1(INST, 1.0) == np.inf
    # |y - x*| = 1.2: boundary of the window
    assert toy.toy_partial_e1(INST, 1.2) == pytest.approx(1.2 * 0.3 - 1.2 * 0.3, abs=1e-15)
    assert toy.toy_partial_e1(INST, 2.0) == pytest.approx(2.0 * 0.3 - 1.2 * 0.3)


def test_sweep_rows_and_columns():
    rows = toy.sweep(INST, np.linspace(0, 3, 301))
    assert len(rows) == 301 and all(len(r) == len(toy.COLUMNS) for r in rows)
    assert rows[0][0] == 0.0 and rows[-1][0] == 3.0


def test_grid_oracle_confirms_the_optimum():
    arg, val = grid_search(lambda t: toy.toy_loss(INST, t), 0.0, 3.0, points=301, refine_levels=2)
    assert abs(arg - 1.2) <= 1e-3 and val <= 1e-6


def test_collapse_naive_vanishes_at_zero_scale():
    rows = toy.collapse_sweep([(2.0, 6.0), (1.0, 2.9)], [0.0, 1.0, 3.0])
    assert rows[0][1] == 0.0 and rows[0][2] == np.inf
    # theta = 3 recovers y = 3 x* exactly for the first sample
    assert rows[2][2] == pytest.approx((1.0 - 2.9 / 3.0) ** 2)
    assert rows[1][1] == pytest.approx((2.0 - 6.0) ** 2 + (1.0 - 2.9) ** 2)


def test_collapse_reformulated_minimum_is_away_from_zero():
    samples = [(2.0, 6.0), (1.0, 2.9), (0.5, 1.6)]
    thetas = np.linspace(0.0, 6.0, 601)
    rows = toy.collapse_sweep(samples, thetas)
    naive = min(rows, key=lambda r: r[1])
    reform = min(rows, key=lambda r: r[2])
    assert naive[0] == 0.0
    assert 2.5 < reform[0] < 3.5
