from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from clocktree.model import (
    AdmissibilityError,
    build_model,
    constants,
    epsilon_norm,
    epsilon_sandwich,
    eta_quantities,
    load_model_config,
    potts,
    rho,
    transfer_operator,
)


def test_potts_is_admissible():
    m = build_model(3, 2, 3.0, [0, 1])
    assert m.admissible and m.u == 1 and m.U == 1


def test_rejects_inadmissible_clock_table():
    with pytest.raises(AdmissibilityError, match=r"\(d\^2\+1\)\*u > d\*U"):
        build_model(5, 2, 1.0, [0, 1, 3, 3, 1])


def test_accepts_q4_d3():
    m = build_model(4, 3, 1.0, [0, 1, 1.2, 1])
    assert m.ubar == (0.0, 1.0, 1.2)
    assert 10 * m.u > 3 * m.U


def test_rejects_nonzero_diagonal_and_bad_symmetry():
    with pytest.raises(AdmissibilityError, match="ubar\\(0\\)"):
        build_model(3, 2, 1.0, [0.5, 1])
    with pytest.raises(AdmissibilityError, match="not a clock"):
        build_model(4, 2, 1.0, [0, 1, 1, 2])
    with pytest.raises(AdmissibilityError):
        build_model(3, 2, -1.0, [0, 1])


def test_transfer_operator_values():
    Q = transfer_operator(potts(3, 2, 2.0))
    assert Q[0] == 1.0
    assert Q[1] == Q[2] == pytest.approx(0.1353352832366127, abs=1e-15)
    Q = transfer_operator(build_model(4, 2, 1.0, [0, 1, 2, 1]))
    np.testing.assert_allclose(Q, [1, math.exp(-1), math.exp(-2), math.exp(-1)], rtol=1e-15)


def test_epsilon_values():
    m = potts(3, 2, 2.0)
    assert epsilon_norm(m) == pytest.approx(2 ** (2 / 3) * math.exp(-2), rel=1e-14)
    lo, hi = epsilon_sandwich(m)
    assert lo == pytest.approx(hi, rel=1e-15)
    m = build_model(4, 2, 1.0, [0, 1, 2, 1])
    assert epsilon_norm(m) == pytest.approx(0.6266361498213926, rel=1e-14)


def test_epsilon_decreases_in_beta():
    eps = [epsilon_norm(build_model(4, 2, b, [0, 1, 2, 1])) for b in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(eps, eps[1:]))


def test_epsilon_no_underflow_at_large_beta():
    eps = epsilon_norm(potts(3, 2, 500.0))
    assert eps > 0
    assert math.log(eps) == pytest.approx(2 / 3 * math.log(2) - 500, rel=1e-12)


@pytest.mark.parametrize(
    "d,n,expected",
    [(2, 1, 0.45339765151640377), (2, 2, 0.47346580772912616), (3, 1, 0.5298833894399928)],
)
def test_rho_matches_brentq(d, n, expected):
    r = rho(d, n)
    ref = brentq(lambda x: (d - 1) * x ** (d + 1) + d * n * x ** (d - 1) - n, 0, d ** (-1 / (d - 1)), xtol=1e-15)
    assert abs(r - ref) < 1e-11
    assert abs(r - expected) < 1e-11
    assert abs((d - 1) * r ** (d + 1) + d * n * r ** (d - 1) - n) <= 1e-10


def test_eta_values():
    eta, eta0 = eta_quantities(2, 1)
    assert eta0 == pytest.approx(0.15749013123685915, rel=1e-14)
    # recomputed from rho(2,1) = 0.45339765...; the formula gives 0.233534
    assert eta == pytest.approx(0.23353381119417171, rel=1e-10)
    eta, eta0 = eta_quantities(2, 2)
    assert eta == pytest.approx(0.1517251188726756, rel=1e-10)
    assert eta0 == pytest.approx(0.12018746419228404, rel=1e-14)


@pytest.mark.parametrize("d", [2, 3, 4])
@pytest.mark.parametrize("n", [1, 2, 3])
def test_eta_between_eta0_and_one(d, n):
    eta, eta0 = eta_quantities(d, n)
    assert eta0 < eta < 1
    assert 0 < rho(d, n) < d ** (-1 / (d - 1))


def test_constants_reference_values():
    b = constants(potts(3, 2, 1.0), 2)
    assert b.C3 == 4
    # 2^{d+1} d^3 (n+1)^d (q-1)^2 = 8 * 8 * 9 * 4
    assert b.C1 == 2304
    assert b.delta0 == 0.25
    assert b.c == 0.5
    assert b.C4 == 2 * b.C1 * 3 / 0.25
    assert b.C5 == 2 * 2 * b.C4


def test_constants_flag_vacuous_regime():
    assert constants(potts(3, 2, 2.0), 2).vacuous
    big = constants(potts(3, 2, 200.0), 2)
    assert not big.vacuous and big.lambda_beta > 0 and big.eps2 < 1


def test_lambda_affine_in_beta():
    betas = np.linspace(1, 50, 8)
    lam = [constants(potts(3, 2, b), 2).lambda_beta for b in betas]
    b = constants(potts(3, 2, 1.0), 2)
    slopes = np.diff(lam) / np.diff(betas)
    np.testing.assert_allclose(slopes, b.c * b.delta0, rtol=1e-9)


def test_load_model_config_roundtrip(tmp_path):
    cfg = {"q": 4, "d": 3, "beta": 2.5, "ubar": [0, 1, 1.2], "A": [2, 0]}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(cfg))
    model, A, raw = load_model_config(path)
    assert A == (0, 2)
    assert model.to_dict() == {"q": 4, "d": 3, "beta": 2.5, "ubar": [0.0, 1.0, 1.2]}


admissible_models = st.builds(
    lambda q, d, beta, base, spread: (q, d, beta, [0.0] + [base * (1 + spread * k / q) for k in range(1, q // 2 + 1)]),
    st.integers(3, 8),
    st.integers(2, 5),
    st.floats(0.05, 60),
    st.floats(0.2, 3),
    st.floats(0, 0.4),
)


@settings(max_examples=200, deadline=None)
@given(admissible_models)
def test_transfer_operator_properties(args):
    q, d, beta, ubar = args
    m = build_model(q, d, beta, ubar)
    Q = transfer_operator(m)
    assert Q[0] == 1
    k = np.arange(1, q)
    assert np.all(Q[k] == Q[q - k])
    assert np.all(Q[1:] > 0)
    assert np.all(Q[1:] <= math.exp(-beta * m.u) * (1 + 1e-15))


@settings(max_examples=200, deadline=None)
@given(admissible_models)
def test_epsilon_sandwich_property(args):
    m = build_model(*args)
    eps = epsilon_norm(m)
    lo, hi = epsilon_sandwich(m)
    assert lo <= eps <= hi
    if m.u == m.U:
        assert eps == hi


@settings(max_examples=100, deadline=None)
@given(admissible_models, st.integers(1, 3))
def test_constant_identities(args, n):
    m = build_model(*args)
    n = min(n, m.q)
    b = constants(m, n)
    assert b.C5 == pytest.approx(2 * (m.q - 1) * b.C4, rel=1e-15)
    assert b.C4 == pytest.approx(2 * b.C1 * (m.d + 1) / b.delta0, rel=1e-15)
    assert 0 < b.delta0 < m.d
    assert b.lambda_beta == pytest.approx(b.c_tilde + b.c * b.delta0 * m.beta, rel=1e-12, abs=1e-12)
    assert b.eps1 == pytest.approx(b.C3 * math.exp(-(m.d - 1) * m.beta * m.u / 2), rel=1e-12)
