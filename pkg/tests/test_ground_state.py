import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peakflow.discretization import Grid
from peakflow.errors import InvalidParameters
from peakflow.ground_state import (
    ProblemParams,
    cached_ground_state,
    decay_rate,
    find_ground_state,
    integrate_radial,
    norms,
    read_profile_csv,
    sample_on_grid,
    sobolev_constant,
    write_profile_csv,
)


def soliton(r, q):
    """Closed form for n = 1, p = 2: (q/2)^{1/(q-2)} sech^{2/(q-2)}((q-2) r / 2)."""
    return (q / 2) ** (1 / (q - 2)) / np.cosh((q - 2) * r / 2) ** (2 / (q - 2))


@pytest.mark.parametrize("q", [3.0, 4.0, 6.0])
def test_soliton_profile_matches_closed_form(q):
    prof = cached_ground_state(ProblemParams(1, 2.0, q))
    r = prof.r_grid[prof.r_grid <= prof.r_resolved]
    assert prof.beta == pytest.approx((q / 2) ** (1 / (q - 2)), abs=1e-9)
    assert np.max(np.abs(prof(r) - soliton(r, q))) < 1e-8


def test_soliton_norms(profile_soliton):
    E, M = norms(profile_soliton)
    assert E == pytest.approx(16 / 3, abs=1e-7)
    assert M == pytest.approx(16 / 3, abs=1e-7)
    assert sobolev_constant(profile_soliton).S0 == pytest.approx((16 / 3) ** 0.5, abs=1e-7)


@settings(max_examples=8, deadline=None)
@given(p=st.floats(1.3, 3.0), dq=st.floats(0.6, 3.0))
def test_first_integral_fixes_beta_in_1d(p, dq):
    # in 1D the energy (p-1)/p |w'|^p + w^q/q - w^p/p vanishes along the ground state
    q = p + dq
    prof = find_ground_state(ProblemParams(1, p, q))
    assert prof.beta == pytest.approx((q / p) ** (1 / (q - p)), rel=1e-4)


def test_first_integral_along_profile():
    p, q = 1.5, 3.0
    prof = cached_ground_state(ProblemParams(1, p, q))
    keep = prof.r_grid <= 0.5 * prof.r_resolved
    w, wp = prof.w_values[keep], prof.w_prime[keep]
    energy = (p - 1) / p * np.abs(wp) ** p + w ** q / q - w ** p / p
    assert np.max(np.abs(energy)) < 1e-6


def test_shooting_classification_is_monotone_in_beta():
    params = ProblemParams(2, 1.5, 3.0)
    prof = cached_ground_state(params)
    for factor in (0.5, 0.9, 0.99):
        assert integrate_radial(params, factor * prof.beta).classification == "turned_up"
    for factor in (1.01, 1.1, 2.0):
        assert integrate_radial(params, factor * prof.beta).classification == "crossed_zero"


def test_integrate_radial_rejects_bad_input():
    params = ProblemParams(1, 2.0, 4.0)
    with pytest.raises(InvalidParameters):
        integrate_radial(params, -1.0)
    with pytest.raises(InvalidParameters):
        integrate_radial(params, 1.0, r_max=1.0, h=0.1)


@pytest.mark.parametrize("n,p,q", [(0, 2.0, 4.0), (1, 1.0, 3.0), (2, 2.0, 2.0), (2, 3.0, 2.5)])
def test_problem_params_validation(n, p, q):
    with pytest.raises(InvalidParameters):
        ProblemParams(n, p, q)


def test_standing_assumption_flag():
    assert ProblemParams(2, 1.5, 3.0).standing_assumptions_hold
    assert not ProblemParams(1, 2.0, 4.0).standing_assumptions_hold
    # critical exponent for n = 3, p = 2 is 6
    assert not ProblemParams(3, 2.0, 6.5).standing_assumptions_hold


@pytest.mark.parametrize("n,p,q", [(2, 1.5, 3.0), (3, 2.0, 4.0), (2, 1.5, 4.0)])
def test_nehari_identity(n, p, q):
    prof = cached_ground_state(ProblemParams(n, p, q))
    assert prof.nehari_residual < 1e-3


def test_decay_rate_2d(profile_2d):
    fit = decay_rate(profile_2d)
    assert fit.rate == pytest.approx(2 ** (2 / 3), rel=0.02)
    assert fit.samples >= 50


def test_profile_is_positive_and_decreasing(profile_2d):
    r = np.linspace(0, profile_2d.r_max * 1.5, 4000)
    w = profile_2d(r)
    assert np.all(w > 0)
    assert np.all(np.diff(w) <= 1e-14)


def test_sample_on_grid_peak_value(profile_2d):
    grid = Grid((1.0, 1.0), (101, 101))
    f = sample_on_grid(profile_2d, (0.5, 0.5), 0.1, grid)
    assert np.unravel_index(np.argmax(f.values), grid.shape) == (50, 50)
    assert f.values.max() == pytest.approx(profile_2d.beta, rel=1e-9)


def test_sample_on_grid_scaling(profile_2d):
    grid = Grid((1.0, 1.0), (64, 64))
    f = sample_on_grid(profile_2d, (0.3, 0.6), 0.07, grid)
    X, Y = grid.mesh()
    r = np.hypot(X - 0.3, Y - 0.6) / 0.07
    assert np.allclose(f.values, profile_2d(r))


def test_profile_csv_round_trip(tmp_path, profile_2d):
    path = tmp_path / "profile.csv"
    write_profile_csv(profile_2d, path)
    back = read_profile_csv(path, profile_2d.params)
    assert back.beta == profile_2d.beta
    assert np.array_equal(back.w_values, profile_2d.w_values)
    assert back.E_p == pytest.approx(profile_2d.E_p, rel=1e-6)
