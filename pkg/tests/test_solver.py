import math

import numpy as np
import pytest

from gbrownian.band import TerminalPayoff, VolatilityBand, linear_gaussian_solution
from gbrownian.solver import (
    CFLError,
    DomainError,
    Grid1D,
    SolverInconsistency,
    SolverParams,
    TimeGrid,
    extract_feedback_policy,
    feynman_kac_value,
    make_grids,
    rho_limit,
    solve,
    solve_auto,
)
from gbrownian.verify import verify_strict_decrease

HALF = VolatilityBand(0.5, 1.0)
UNIT = VolatilityBand(1.0, 1.0)
QUARTER = VolatilityBand(0.25, 1.0)
BUMP = TerminalPayoff.gaussian_bump(4)


def test_constant_payoff_field_is_constant():
    f = solve_auto(TerminalPayoff.constant(1.0), HALF, 1.0)
    assert np.all(f.values == 1.0)


def test_linear_band_matches_gaussian_oracle():
    f = solve_auto(BUMP, UNIT, 0.5, SolverParams(dx=0.01))
    assert abs(f.at(0.5, 0.0) - 0.57735) < 1e-3
    exact = linear_gaussian_solution(4, 0, 1.0, 0.5, f.xs)
    assert np.abs(f.final - exact).max() < 5e-3


def test_nonlinear_value_between_constant_and_envelope():
    v = solve_auto(BUMP, HALF, 0.5).at(0.5, 0.0)
    assert 0.70711 <= v <= 0.75984


def test_field_interpolation_hits_stored_levels():
    f = solve_auto(BUMP, HALF, 0.5)
    assert f.level_times[0] == 0.0 and math.isclose(f.level_times[-1], 0.5)
    np.testing.assert_allclose(f.at(0.0, f.xs), BUMP(f.xs))
    np.testing.assert_array_equal(f.at(0.5, f.xs), f.final)


def test_maximum_principle_and_comparison():
    hi = solve_auto(TerminalPayoff.gaussian_bump(1), HALF, 1.0)
    lo = solve(TerminalPayoff.gaussian_bump(4), HALF, hi.grid, hi.time_grid)
    assert lo.values.min() >= 0.0 and lo.values.max() <= 1.0
    # exp(-2x^2) <= exp(-x^2/2) pointwise, so the solutions stay ordered
    assert np.all(lo.values <= hi.values + 1e-15)


def test_band_monotonicity():
    # a wider band gives a larger sublinear expectation
    narrow = feynman_kac_value(BUMP, VolatilityBand(0.75, 1.0), 1.0)
    wide = feynman_kac_value(BUMP, VolatilityBand(0.25, 1.0), 1.0)
    assert wide > narrow


def test_refinement_reduces_error_at_first_order_in_dt():
    errs = []
    for p in (SolverParams(dx=0.01, cfl=1.0), SolverParams(dx=0.005, cfl=1.0)):
        f = solve_auto(BUMP, UNIT, 0.5, p)
        errs.append(np.abs(f.final - linear_gaussian_solution(4, 0, 1.0, 0.5, f.xs)).max())
    assert errs[1] <= errs[0] / 2


def test_cfl_violation_rejected():
    grid = Grid1D(-5, 5, 1001)
    with pytest.raises(CFLError):
        solve(BUMP, HALF, grid, TimeGrid(1.0, 100))


def test_narrow_domain_rejected_with_required_width():
    grid = Grid1D(-1, 1, 201)
    with pytest.raises(DomainError, match="width"):
        solve(BUMP, HALF, grid, TimeGrid(1.0, 40000))


def test_make_grids_satisfies_cfl_and_covers_query():
    for band in (HALF, UNIT, QUARTER):
        grid, tg = make_grids(BUMP, band, 2.0, SolverParams(), query=(3.0,))
        assert tg.dt <= grid.dx**2 / band.sigma_hi_sq * (1 + 1e-12)
        assert grid.x_min < 3.0 < grid.x_max


def test_feynman_kac_examples():
    for band in (HALF, UNIT, QUARTER):
        assert feynman_kac_value(TerminalPayoff.constant(1.0), band, 0.7) == 1.0
    assert abs(feynman_kac_value(BUMP, UNIT, 1.0) - 5**-0.5) < 1e-3


def test_policy_degenerate_band_is_constant():
    f = solve_auto(BUMP, UNIT, 0.5)
    pol = extract_feedback_policy(f, UNIT)
    assert np.all(pol.table == 1.0)


def test_policy_picks_sigma_hi_where_convex():
    f = solve_auto(TerminalPayoff.gaussian_bump(1), HALF, 0.5)
    pol = extract_feedback_policy(f, HALF)
    d2 = f.values[:, 2:] - 2 * f.values[:, 1:-1] + f.values[:, :-2]
    rows = pol.table[::-1, 1:-1]
    assert np.all(rows[d2 >= 0] == HALF.sigma_hi_sq)
    assert np.all(rows[d2 < 0] == HALF.sigma_lo_sq)


def test_policy_symmetric_for_symmetric_payoff():
    f = solve_auto(BUMP, HALF, 0.5, SolverParams(stagger=False))
    assert np.allclose(f.xs, -f.xs[::-1])
    pol = extract_feedback_policy(f, HALF)
    # nodes where the second difference is numerically zero may break ties differently
    d2 = np.abs(f.values[:, 2:] - 2 * f.values[:, 1:-1] + f.values[:, :-2])[::-1]
    clear = (d2 > 1e-12) & (d2[:, ::-1] > 1e-12)
    inner = pol.table[:, 1:-1]
    assert np.array_equal(inner[clear], inner[:, ::-1][clear])


def test_rho_classical_band():
    r = rho_limit(UNIT, 1.0)
    assert abs(r.value - 0.5) < 1e-2
    assert r.lower <= r.value <= r.upper


def test_rho_nonlinear_band_strictly_between():
    r = rho_limit(QUARTER, 1.0)
    assert 0.5 < r.lower and r.upper < 1.0
    assert all(b <= a + 1e-12 for a, b in zip(r.values, r.values[1:]))


def test_rho_scale_invariance():
    vals = [rho_limit(HALF, t).value for t in (0.25, 1.0, 4.0)]
    assert max(vals) - min(vals) < 1e-2


def test_rho_rejects_increasing_sequence():
    with pytest.raises(SolverInconsistency):
        rho_limit(HALF, 1.0, n_list=(4, 16), slack=-1.0, refine=False)
    with pytest.raises(ValueError):
        rho_limit(HALF, 1.0, n_list=(16, 4))


@pytest.mark.parametrize("t, band", [(1.0, UNIT), (1.0, QUARTER), (4.0, HALF)])
def test_limit_profile_strictly_decreasing(t, band):
    rep = verify_strict_decrease(t=t, band=band)
    assert rep.passed, rep.worst()


def test_field_csv_header_and_shape():
    f = solve_auto(TerminalPayoff.constant(1.0), HALF, 0.01, SolverParams(max_levels=3))
    lines = f.to_csv().splitlines()
    assert lines[0] == "t,x,u"
    assert len(lines) == 1 + f.values.size
    assert all(line.endswith(",1") for line in lines[1:])


def test_feynman_kac_bound_example():
    # exp(-4 x^2) is the bump with n = 8; the envelope at x = a gives 9^(-1/4)
    v = feynman_kac_value(TerminalPayoff.gaussian_bump(8), HALF, 1.0)
    assert v <= 9**-0.25 + 1e-6
    assert abs(9**-0.25 - 0.5774) < 1e-4


def test_indicator_sequence_decreases_pointwise():
    band = QUARTER
    payoffs = [TerminalPayoff.indicator_leq_reg(n) for n in (4, 16, 64)]
    grid, tg = make_grids(payoffs[0], band, 1.0, SolverParams())
    fields = [solve(p, band, grid, tg) for p in payoffs]
    for a, b in zip(fields, fields[1:]):
        assert np.all(b.values <= a.values + 1e-6)


def test_grid_requires_four_intervals():
    with pytest.raises(ValueError):
        Grid1D(0.0, 1.0, 3)
    with pytest.raises(ValueError):
        Grid1D(1.0, 1.0, 10)
    assert Grid1D(0.0, 1.0, 4).dx == 0.25
