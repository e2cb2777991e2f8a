import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganevade import padopt
from ganevade.padopt import (InfeasiblePaddingError, PaddingRequest,
                             check_plan, plan_for, solve_exact, solve_relaxed)


def lp_oracle(counts, target, gap, gap_is_ratio=True):
    """Reference solution of the padding LP via scipy's simplex-family
    solver, written directly from the constraint system."""
    from scipy.optimize import linprog
    b = np.asarray(counts, dtype=np.float64)
    r = np.asarray(target, dtype=np.float64)
    n = len(b)
    sum_b = b.sum()
    # variables p >= 0; constraints in terms of T = sum_b + sum(p)
    if gap_is_ratio:
        lo_rate, hi_rate = r - gap, r + gap
    else:
        lo_rate, hi_rate = r, r
    ones = np.ones((n, n))
    # b + p <= hi_rate*T  ->  p - hi_rate*sum(p) <= hi_rate*sum_b - b
    a1 = np.eye(n) - hi_rate[:, None] * ones
    u1 = hi_rate * sum_b - b
    # lo_rate*T <= b + p  ->  lo_rate*sum(p) - p <= b - lo_rate*sum_b
    a2 = lo_rate[:, None] * ones - np.eye(n)
    u2 = b - lo_rate * sum_b
    if not gap_is_ratio:
        u1 = u1 + gap
        u2 = u2 + gap
    res = linprog(c=np.ones(n), A_ub=np.vstack([a1, a2]),
                  b_ub=np.concatenate([u1, u2]), bounds=[(0, None)] * n,
                  method="highs")
    return res


class TestHandInstances:
    def test_two_bins_exact_by_hand(self):
        # b=[2,2], r=[0.75,0.25]: T must be 8, pad 4 into bin 0
        req = PaddingRequest(np.array([2, 2]), np.array([0.75, 0.25]),
                             mode="exact")
        real = solve_exact(req)
        assert real.total_count == pytest.approx(8.0)
        np.testing.assert_allclose(real.p, [4.0, 0.0])

    def test_already_on_target_needs_nothing(self):
        req = PaddingRequest(np.array([30, 10]), np.array([0.75, 0.25]))
        assert solve_relaxed(req).total_appended == pytest.approx(0.0)

    def test_relaxed_gap_allows_less_padding(self):
        b = np.array([10, 0, 0, 0])
        r = np.array([0.25, 0.25, 0.25, 0.25])
        tight = solve_relaxed(PaddingRequest(b, r, gap=0.0))
        loose = solve_relaxed(PaddingRequest(b, r, gap=0.1))
        assert loose.total_appended < tight.total_appended

    def test_exact_infeasible_zero_bin(self):
        req = PaddingRequest(np.array([5, 1]), np.array([1.0, 0.0]),
                             mode="exact")
        with pytest.raises(InfeasiblePaddingError) as exc:
            solve_exact(req)
        assert exc.value.bins == [1]

    def test_gap_validation(self):
        with pytest.raises(ValueError):
            PaddingRequest(np.array([1.0]), np.array([1.0]), gap=1.0)
        with pytest.raises(ValueError):
            PaddingRequest(np.array([1.0]), np.array([0.5]))
        with pytest.raises(ValueError):
            PaddingRequest(np.array([-1.0]), np.array([1.0]))

    def test_absolute_gap_reading(self):
        # with g counted in bytes, a 1-byte slack suffices here
        b = np.array([3, 1])
        r = np.array([0.5, 0.5])
        plan = solve_relaxed(PaddingRequest(b, r, gap=1.0 - 1e-9,
                                            gap_is_ratio=False))
        assert plan.total_appended <= 1.0 + 1e-6


class TestOracleAgreement:
    @pytest.mark.parametrize("seed", range(25))
    def test_random_instances_match_linprog(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 9))
        b = rng.integers(0, 200, size=n).astype(np.float64)
        b[int(rng.integers(0, n))] += 1  # at least one byte present
        r = rng.dirichlet(np.full(n, 0.7))
        gap = float(rng.uniform(0.0, 0.1))
        res = lp_oracle(b, r, gap)
        ours = solve_relaxed(PaddingRequest(b, r, gap=gap))
        assert res.status == 0
        assert abs(ours.total_appended - res.fun) <= 1.0


class TestMonotonicityAndScaling:
    def test_appended_non_increasing_in_gap(self):
        rng = np.random.default_rng(3)
        b = rng.integers(0, 100, size=8).astype(np.float64)
        r = rng.dirichlet(np.full(8, 0.5))
        gaps = [0.0, 0.001, 0.01, 0.05, 0.1]
        totals = [solve_relaxed(PaddingRequest(b, r, gap=g)).total_appended
                  for g in gaps]
        for a, c in zip(totals, totals[1:]):
            assert c <= a + 1e-6

    def test_exact_needs_at_least_relaxed(self):
        rng = np.random.default_rng(4)
        b = rng.integers(1, 60, size=6).astype(np.float64)
        r = rng.dirichlet(np.ones(6))
        exact = solve_exact(PaddingRequest(b, r, mode="exact"))
        relaxed = solve_relaxed(PaddingRequest(b, r, gap=0.01))
        assert exact.total_appended >= relaxed.total_appended - 1e-9

    def test_scale_equivariance(self):
        b = np.array([7, 3, 0, 2], dtype=np.float64)
        r = np.array([0.4, 0.3, 0.2, 0.1])
        one = solve_relaxed(PaddingRequest(b, r, gap=0.01))
        ten = solve_relaxed(PaddingRequest(10 * b, r, gap=0.01))
        assert ten.total_appended == pytest.approx(10 * one.total_appended,
                                                   rel=1e-9, abs=1e-6)


class TestIntegerPlans:
    def test_plan_close_to_real_optimum(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(4, 16))
            b = rng.integers(0, 500, size=n).astype(np.float64)
            b[0] += 1
            r = rng.dirichlet(np.ones(n))
            req = PaddingRequest(b, r, gap=0.01)
            real = solve_relaxed(req)
            plan = plan_for(req)
            assert plan.total_appended <= real.total_appended + n + 1
            assert check_plan(plan, req)

    def test_certificate_fields(self):
        req = PaddingRequest(np.array([50, 10, 0]),
                             np.array([0.5, 0.3, 0.2]), gap=0.01)
        plan = plan_for(req)
        cert = plan.certificate
        assert cert["total"] == pytest.approx(50 + 10 + plan.total_appended)
        assert cert["max_lower_violation"] == 0.0
        assert cert["max_upper_violation"] == 0.0
        np.testing.assert_allclose(plan.achieved.sum(), 1.0)

    def test_achieved_within_gap_plus_rounding(self):
        rng = np.random.default_rng(6)
        b = rng.integers(0, 1000, size=256).astype(np.float64)
        r = rng.dirichlet(np.full(256, 0.3))
        req = PaddingRequest(b, r, gap=0.001)
        plan = plan_for(req)
        total = b.sum() + plan.total_appended
        dev_counts = np.abs((b + plan.p) - r * total)
        assert dev_counts.max() <= 0.001 * total + 256

    def test_csv_export(self, tmp_path):
        req = PaddingRequest(np.array([5, 5]), np.array([0.9, 0.1]), gap=0.05)
        plan = plan_for(req)
        path = tmp_path / "plan.csv"
        padopt.write_plan_csv(plan, req, path)
        lines = path.read_text().splitlines()
        assert lines[1] == "byte_value,count"
        assert len(lines) == 2 + req.nbins


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_integer_plan_always_certifies(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 32))
    b = rng.integers(0, 300, size=n).astype(np.float64)
    r = rng.dirichlet(np.full(n, 0.6))
    r = np.maximum(r, 1e-9)
    r = r / r.sum()
    req = PaddingRequest(b, r, gap=float(rng.uniform(0.001, 0.2)))
    plan = plan_for(req)
    assert check_plan(plan, req)
    assert np.all(plan.p >= 0)
