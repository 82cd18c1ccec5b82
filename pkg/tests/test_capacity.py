import math

import pytest
from scipy.special import erf

from gbrownian.band import VolatilityBand
from gbrownian.capacity import (
    CSV_HEADER,
    CapacityError,
    CapacityEstimate,
    EventDescriptor,
    ball_bound,
    capacity,
    capacity_increment_conjunction,
    capacity_monotone_event,
    capacity_product_check,
    capacity_running_max,
    capacity_terminal_ball,
    capacity_terminal_halfline,
    holder_chain_bound,
    holder_chain_log10,
    holder_exponent_count,
    holder_first_n_below,
    holder_threshold_margin,
    running_max_bound,
)
from gbrownian.solver import SolverInconsistency, rho_limit

HALF = VolatilityBand(0.5, 1.0)
UNIT = VolatilityBand(1.0, 1.0)
QUARTER = VolatilityBand(0.25, 1.0)


def closed_form_rho(band):
    # oscillating Brownian motion: P(X_t <= 0) for the worst-case switching rule
    hi, lo = math.sqrt(band.sigma_hi_sq), math.sqrt(band.sigma_lo_sq)
    return hi / (hi + lo)


def test_ball_bound_formula():
    est = capacity_terminal_ball(1.0, 0.0, 0.1, HALF)
    assert math.isclose(est.certified_upper_bound, math.exp(0.5) * 0.1**0.5, rel_tol=1e-14)
    # the quoted figure 0.52139 agrees with e^(1/2) 0.1^(1/2) = 0.521371 to 4.6e-5
    assert abs(est.certified_upper_bound - 0.52139) < 5e-5
    assert est.value <= est.certified_upper_bound + est.gaps
    assert est.method == "pde_regularized"


def test_ball_whole_space_and_polar_point():
    assert capacity_terminal_ball(1.0, 0.0, 10.0, HALF).value >= 1 - 1e-6
    zero = capacity_terminal_ball(1.0, 0.0, 0.0, HALF)
    assert zero.value == 0.0


def test_ball_linear_band_matches_gaussian():
    est = capacity_terminal_ball(1.0, 0.0, 0.5, UNIT)
    exact = erf(0.5 / math.sqrt(2))
    assert abs(est.value - exact) <= est.gaps + 1e-3


@pytest.mark.parametrize("t", [0.5, 1.0])
@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
def test_ball_bound_grid(t, eps):
    est = capacity_terminal_ball(t, 0.0, eps, HALF)
    assert est.bound_margin() >= 0
    assert est.certified_upper_bound == ball_bound(t, eps, HALF)


def test_halfline_examples():
    assert abs(capacity_terminal_halfline(1.0, 0.0, UNIT).value - 0.5) < 1e-2
    assert capacity_terminal_halfline(1.0, -10.0, HALF).value <= 1e-3


def test_halfline_open_closed_polarity():
    closed = capacity_terminal_halfline(1.0, 0.0, QUARTER)
    opened = capacity_terminal_halfline(1.0, 0.0, QUARTER, open=True)
    assert opened.value <= closed.value + 1e-12
    assert closed.value - opened.value <= closed.gaps + opened.gaps + 1e-6


@pytest.mark.parametrize("band", [QUARTER, HALF, UNIT])
def test_halfline_matches_closed_form_rho(band):
    est = capacity_terminal_halfline(1.0, 0.0, band)
    assert abs(est.value - closed_form_rho(band)) < 1e-3


def test_running_max_examples():
    assert capacity_running_max(1.0, 10.0, HALF).value >= 1 - 1e-6
    est = capacity_running_max(1.0, 0.05, HALF)
    assert math.isclose(est.certified_upper_bound, erf(0.05), rel_tol=1e-12)
    assert abs(est.certified_upper_bound - 0.05637) < 1e-5
    assert est.value <= est.certified_upper_bound + est.gaps
    zero = capacity_running_max(1.0, 0.0, HALF)
    assert zero.value <= zero.gaps


def test_running_max_linear_band_reflection():
    # classical reflection principle: P(max B <= eps) = erf(eps / sqrt(2 t))
    est = capacity_running_max(1.0, 0.2, UNIT)
    assert abs(est.value - erf(0.2 / math.sqrt(2))) < 2e-3


def test_running_max_bound_helper():
    assert running_max_bound(1.0, 0.05, HALF) == erf(0.05)


def test_running_max_rejects_unresolved_eps():
    with pytest.raises(CapacityError):
        capacity_running_max(1.0, 0.02, HALF)


def test_product_examples():
    pc = capacity_product_check(1.0, 1.0, (0.0, math.inf), False, UNIT)
    assert abs(pc.lhs - 0.25) < 1e-2 and abs(pc.rhs - 0.25) < 1e-2
    pc = capacity_product_check(1.0, 1.0, (0.0, math.inf), False, HALF)
    assert pc.difference <= 1e-2
    pc = capacity_product_check(1.0, 2.0, (0.0, math.inf), True, HALF)
    assert pc.difference <= 1e-2


def test_product_bounded_interval():
    pc = capacity_product_check(0.5, 1.0, (-0.5, 0.5), False, HALF)
    assert pc.difference <= 1e-2
    assert 0 < pc.rhs < 1


def test_monotone_examples():
    rho = rho_limit(QUARTER, 1.0).value
    one = capacity_monotone_event(1, QUARTER)
    assert abs(one.value - rho) <= one.gaps + 1e-9
    two = capacity_monotone_event(2, QUARTER)
    assert abs(two.value - rho**2) <= 0.02 * rho**2
    assert abs(capacity_monotone_event(3, UNIT).value - 0.125) < 1e-2
    for n in (0, 7):
        with pytest.raises(CapacityError):
            capacity_monotone_event(n, QUARTER)


def test_capacity_estimate_csv():
    est = capacity_terminal_ball(1.0, 0.0, 0.1, HALF)
    row = est.csv_row().split(",")
    assert len(row) == len(CSV_HEADER.split(","))
    assert float(row[3]) == est.certified_upper_bound
    with pytest.raises(CapacityError):
        CapacityEstimate(1.5, "pde_regularized")
    with pytest.raises(ValueError):
        CapacityEstimate(0.5, "guess")


def test_holder_exponent_counts():
    assert holder_exponent_count(0.75, HALF) == 9
    assert holder_exponent_count(0.6, HALF) == 21
    # ceil(1 / (0.5 * 0.5)) + 1
    assert holder_exponent_count(0.75, UNIT) == 5
    for g in (0.5, 0.3):
        with pytest.raises(CapacityError):
            holder_exponent_count(g, HALF)


def test_holder_sequence_decreasing_past_unit_ratio():
    ns = [10**k for k in range(0, 13)]
    terms = holder_chain_bound(0.75, 1.0, HALF, ns)
    # U(n) < 1 only from n ~ 6.4e5 on; below that the terms grow like n
    assert all(b > a for a, b in zip(terms[:6], terms[1:6]))
    assert all(b < a for a, b in zip(terms[6:], terms[7:]))
    # at n = 1e6 the bound is still far above 1e-6
    assert terms[6] > 1e5


def test_holder_first_n_below_threshold():
    n = holder_first_n_below(0.75, 1.0, HALF, 1e-6)
    assert holder_threshold_margin(0.75, 1.0, HALF, n) > 0
    assert holder_threshold_margin(0.75, 1.0, HALF, n - 1) <= 0
    assert len(str(n)) == 101
    n6 = holder_first_n_below(0.6, 1.0, HALF, 1e-6)
    assert n6 > n
    tail = holder_chain_log10(0.6, 1.0, HALF, [10**k for k in range(440, 450)])
    assert all(b < a for a, b in zip(tail, tail[1:]))


def test_holder_linear_band_decays_faster():
    ns = [10**k for k in range(20, 120, 10)]
    slow = holder_chain_log10(0.75, 1.0, HALF, ns)
    fast = holder_chain_log10(0.75, 1.0, UNIT, ns)
    assert all(f < s for f, s in zip(fast, slow))


def test_holder_rejects_bad_input():
    with pytest.raises(CapacityError):
        holder_chain_bound(0.75, 0.0, HALF, [1, 2])
    with pytest.raises(CapacityError):
        holder_chain_bound(0.75, 1.0, HALF, [2, 1])


def test_ball_bound_examples_from_formula():
    assert abs(ball_bound(0.5, 0.05, HALF) - 0.4385) < 1e-4
    # bound above one: the value is capped at one and passes trivially
    est = capacity_terminal_ball(1.0, 0.0, 2.0, HALF)
    assert est.certified_upper_bound > 1 and est.value <= 1.0


def test_capacity_monotone_in_event():
    vals = [capacity_terminal_ball(1.0, 0.0, e, HALF).value for e in (0.05, 0.1, 0.2, 0.4)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    small = capacity_increment_conjunction((1.0,), (0.0, 1.0), False, HALF)
    large = capacity_increment_conjunction((1.0,), (0.0, 2.0), False, HALF)
    assert small.value <= large.value


def test_event_descriptor_validation_and_dispatch():
    with pytest.raises(CapacityError):
        EventDescriptor("increment_conjunction", times=(1.0, 1.0))
    with pytest.raises(CapacityError):
        EventDescriptor("terminal_ball", eps=-0.1)
    with pytest.raises(CapacityError):
        EventDescriptor("monotone_decreasing", n=0)
    with pytest.raises(CapacityError):
        EventDescriptor("borel")
    ev = EventDescriptor("terminal_halfline", t=1.0, a=0.0)
    assert capacity(ev, UNIT).value == capacity_terminal_halfline(1.0, 0.0, UNIT).value


def test_increment_conjunction_matches_products_and_powers():
    two = capacity_increment_conjunction((1.0, 2.0), (0.0, math.inf), False, UNIT)
    assert abs(two.value - 0.25) < 1e-2
    three = capacity_increment_conjunction((0.5, 1.0, 1.5), (-math.inf, 0.0), True, QUARTER)
    rho = closed_form_rho(QUARTER)
    assert abs(three.value - rho**3) <= 0.02 * rho**3


def test_single_increment_matches_ball_within_gaps():
    a = capacity_increment_conjunction((1.0,), (-0.5, 0.5), True, HALF)
    b = capacity_terminal_ball(1.0, 0.0, 0.5, HALF)
    assert abs(a.value - b.value) <= a.gaps + b.gaps


def test_mc_lower_bounds_dp_values():
    # no adapted control beats the DP value; constant and table policies sample
    # a few of them
    import numpy as np
    from gbrownian.policy import ControlPolicy
    from gbrownian.sampler import mc_event, sample_paths

    ball = capacity_terminal_ball(1.0, 0.0, 0.2, HALF)
    rmax = capacity_running_max(1.0, 0.2, HALF)
    switch = ControlPolicy.from_table([0.0, 0.5], [-1.0, 1.0], [[0.5, 1.0], [1.0, 0.5]])
    dt = 1e-3
    for k, pol in enumerate((ControlPolicy.constant(0.5), ControlPolicy.constant(1.0), switch)):
        ens = sample_paths(pol, HALF, dt, 1.0, 20_000, seed=100 + k)
        m, se = mc_event(np.abs(ens.terminal) <= 0.2)
        assert m <= ball.value + 3 * se + ball.gaps
        # discrete monitoring misses excursions; shift the barrier by the
        # standard 0.5826 sigma sqrt(dt) continuity correction
        shift = 0.5826 * math.sqrt(HALF.sigma_hi_sq * dt)
        m, se = mc_event(ens.paths.max(axis=1) <= 0.2 - shift)
        assert m <= rmax.value + 3 * se + rmax.gaps
