import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ofmu import verify
from ofmu.errors import InvalidArgument, PreconditionError
from ofmu.optimizer import with_overrides
from ofmu.verify import QuadraticInstance


def test_instance_invariants():
    inst = verify.general_instance()
    assert np.allclose(inst.A_r, inst.A_r.T, atol=1e-12)
    assert np.array_equal(inst.grad_phi(inst.theta_star_in), np.zeros(inst.dim))
    with pytest.raises(InvalidArgument):
        QuadraticInstance(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2), [0, 0], [0, 0], "asym")
    with pytest.raises(InvalidArgument):
        QuadraticInstance(np.diag([1.0, -1.0]), np.eye(2), [0, 0], [0, 0], "indef")


def test_lemma2_identity_one_step():
    inst = verify.identity_instance()
    rep = verify.check_lemma2(inst, np.array([4.0, -7.0]), 1, 1.0)
    assert rep["lhs"] == 0.0 and rep["pass"]


def test_lemma2_at_optimum():
    inst = verify.general_instance()
    rep = verify.check_lemma2(inst, inst.theta_star_in, 3, 1.0 / inst.L)
    assert rep["lhs"] == 0.0 and rep["bound"] == 0.0 and rep["pass"]


def test_lemma2_precondition():
    inst = verify.identity_instance()
    with pytest.raises(PreconditionError):
        verify.check_lemma2(inst, np.zeros(2), 1, 1.5)
    with pytest.raises(PreconditionError):
        verify.check_lemma2(inst, np.zeros(2), 1, 0.0)


@given(st.integers(0, 2**31 - 1), st.integers(1, 50), st.floats(0.05, 1.0))
def test_lemma2_random_d10(seed, T, frac):
    rng = np.random.default_rng(seed)
    inst = verify.random_instance(rng, 10)
    assert verify.check_lemma2(inst, rng.standard_normal(10) * 3, T, frac / inst.L)["pass"]


def test_lemma1_identity_closed_form():
    rep = verify.check_lemma1(verify.identity_instance(), [1, 10, 100, 1e4])
    want = [1 / 3, 1 / 21, 1 / 201, 1 / 20001]
    assert np.allclose(rep["residuals"], want, rtol=0, atol=1e-12)
    assert rep["pass"]


def test_lemma1_shared_optimum_zero():
    inst = verify.shared_optimum_instance()
    rep = verify.check_lemma1(inst, [0.5, 2.0])
    assert max(rep["residuals"]) <= 1e-12 and rep["pass"]


def test_lemma1_precondition():
    for rhos in ([], [1.0, 1.0], [2.0, 1.0], [0.0, 1.0]):
        with pytest.raises(PreconditionError):
            verify.check_lemma1(verify.identity_instance(), rhos)


@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_lemma1_strictly_decreasing_random(seed, dim):
    rng = np.random.default_rng(seed)
    inst = verify.random_instance(rng, dim)
    rep = verify.check_lemma1(inst, [0.1, 1.0, 10.0, 100.0])
    r = rep["residuals"]
    assert all(b < a for a, b in zip(r, r[1:]))


def test_minimizer_matches_gradient_descent():
    inst = verify.general_instance()
    rho = 0.7
    theta = np.zeros(inst.dim)
    step = 1.0 / inst.L_F(rho)
    H = inst.hessian_F(rho)
    want = inst.minimize_F(rho)
    # F is quadratic with Hessian H, so its gradient is H (theta - argmin)
    for _ in range(20000):
        g = inst.retain_grad(theta) + 2 * rho * inst.A_phi @ inst.A_phi @ (theta - inst.b_phi)
        theta = theta - step * g
    assert np.linalg.norm(theta - want) <= 1e-6
    assert np.allclose(H, inst.A_r + 2 * rho * inst.A_phi @ inst.A_phi)


def test_lemma3_shared_optimum_passes():
    inst = verify.shared_optimum_instance()
    rep = verify.check_lemma3_convex(inst, verify.lemma3_config(inst))
    assert rep["pass"]
    assert rep["non_increasing_from"] <= 100


def test_lemma3_conflicting_plateaus_at_fixed_point():
    # with b_r != b_phi the two-loop iteration converges to its own fixed point,
    # which is not argmin F; the gap stalls at the fixed-point gap
    inst = verify.conflicting_instance()
    cfg = verify.lemma3_config(inst)
    rep = verify.check_lemma3_convex(inst, cfg)
    _, fp_gap = verify.composite_fixed_point(inst, cfg)
    assert fp_gap > 0.1
    assert rep["gap_final"] == pytest.approx(fp_gap, rel=1e-9)
    assert not rep["pass"]


def test_lemma3_doubling_T_does_not_increase_gap():
    inst = verify.shared_optimum_instance()
    a = verify.check_lemma3_convex(inst, verify.lemma3_config(inst, T=10))
    b = verify.check_lemma3_convex(inst, verify.lemma3_config(inst, T=20))
    assert b["gap_final"] <= a["gap_final"]


def test_lemma3_preconditions():
    inst = verify.shared_optimum_instance()
    cfg = verify.lemma3_config(inst)
    for bad in (with_overrides(cfg, rho_growth=1.5, rho_max=10.0),
                with_overrides(cfg, eta_in=2.0 / inst.L),
                with_overrides(cfg, beta=1.0)):
        with pytest.raises(PreconditionError):
            verify.check_lemma3_convex(inst, bad)


def test_canonical_bank_all_pass():
    bank = verify.canonical_bank()
    assert set(bank) == {"lemma1", "lemma2", "lemma3"}
    for checks in bank.values():
        for check in checks:
            assert check()["pass"]


def test_report_json_roundtrip():
    rep = verify.check_lemma1(verify.identity_instance(), [1.0, 2.0])
    assert json.loads(verify.report_to_json(rep)) == rep
