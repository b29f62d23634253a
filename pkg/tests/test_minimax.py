import math

import numpy as np
import pytest

from peakflow.discretization import read_pkfld
from peakflow.errors import InfeasibleG, InvalidParameters
from peakflow.flow import FlowParams
from peakflow.functionals import reference_level
from peakflow.minimax import (
    GSpec,
    Schedule,
    coefficient_slices,
    estimate_S,
    estimate_S_star,
    grid_for,
    on_boundary_of_G,
    sample_G,
    solve,
    sweep_S,
    track_T,
)
from peakflow.peaks import PeakConfig, edge_length

UNIT = (1.0, 1.0)


def params(eps, **kw):
    return FlowParams(1.5, 3.0, eps, scheme="semi_implicit", **kw)


def test_dimension():
    assert GSpec(1, 0, 0.1).dimension == 2
    assert GSpec(0, 1, 0.1).dimension == 1
    assert GSpec(1, 1, 0.1).dimension == 4
    assert GSpec(2, 0, 0.1).dimension == 5
    assert GSpec(1, 0, 0.1, lengths=(1.0,)).dimension == 1


def test_spec_validation():
    with pytest.raises(InvalidParameters):
        GSpec(0, 0, 0.1)
    with pytest.raises(InvalidParameters):
        GSpec(1, 0, 0.1, delta_hat=1.5)


def test_single_interior_peak_lattice():
    spec = GSpec(1, 0, 0.05, pos_res=5)
    samples = sample_G(spec)
    assert len(samples) == 25
    for s in samples:
        assert s.config.a == (1.0,)
        x, y = s.config.interior[0]
        ring = min(x, y, 1 - x, 1 - y) <= spec.delta + 1e-12
        assert s.on_boundary == ring
    assert sum(not s.on_boundary for s in samples) == 9


def test_single_boundary_peak_lattice():
    spec = GSpec(0, 1, 0.025, pos_res=6)
    samples = sample_G(spec)
    assert len(samples) == 24
    for s in samples:
        bp = s.config.boundary[0]
        L = edge_length(UNIT, bp.edge)
        assert spec.delta - 1e-12 <= bp.s <= L - spec.delta + 1e-12
        assert s.on_boundary == (min(bp.s, L - bp.s) <= spec.delta + 1e-12)


def test_coefficient_slices():
    assert coefficient_slices(1, 0.1, 3) == [(1.0,)]
    got = coefficient_slices(2, 0.1, 3)
    assert len(got) == 3
    assert np.allclose(sorted(got), [(0.95, 1.05), (1.0, 1.0), (1.05, 0.95)])
    for c in coefficient_slices(3, 0.1, 3):
        assert sum(c) == pytest.approx(3.0)


def test_two_peak_samples_are_unordered_pairs():
    spec = GSpec(2, 0, 0.05, pos_res=4)
    samples = sample_G(spec)
    # C(16, 2) position pairs times 3 coefficient slices
    assert len(samples) == 120 * 3
    close = [s for s in samples if not s.on_boundary]
    assert close
    for s in close:
        assert on_boundary_of_G(s.config, spec.delta) is False


def test_infeasible_G():
    with pytest.raises(InfeasibleG):
        sample_G(GSpec(1, 0, 0.3))
    # a single admissible point per axis, two peaks cannot be delta-apart
    with pytest.raises(InfeasibleG):
        sample_G(GSpec(2, 0, 0.2, pos_res=2))


def test_estimate_S_star_ignores_boundary_and_failures():
    spec = GSpec(1, 0, 0.05, pos_res=3)
    samples = sample_G(spec)
    estimates = [100.0 if s.on_boundary else None for s in samples]
    estimates[4] = 2.5
    assert estimate_S_star(samples, estimates) == (2.5, 4)


# -- flows --------------------------------------------------------------------------------

def test_T0_is_identity_and_boundary_seeds_are_fixed(profile_2d):
    grid = grid_for(0.05, UNIT)
    inner = PeakConfig([(0.5, 0.5)], [], [1.0], [], 0.05, UNIT)
    out, frozen = track_T(inner, params(0.05), 1.0, 0.0, profile_2d, grid)
    assert out == inner.normalized() and not frozen
    edge = PeakConfig([(0.5, 0.1)], [], [1.0], [], 0.05, UNIT)
    out, frozen = track_T(edge, params(0.05), None, 3.0, profile_2d, grid)
    assert out == edge.normalized() and frozen


def test_T_t_moves_continuously(profile_2d):
    grid = grid_for(0.05, UNIT)
    cfg = PeakConfig([(0.45, 0.55)], [], [1.0], [], 0.05, UNIT)
    moves = []
    for t in (0.5, 1.0):
        out, frozen = track_T(cfg, params(0.05), None, t, profile_2d, grid)
        assert not frozen
        moves.append(float(np.linalg.norm(out.centres() - cfg.centres())))
    assert moves[1] < 0.5 * 0.1
    assert out.coefficients == pytest.approx([1.0])


def test_estimate_interior_peak_near_S0(profile_2d):
    eps = 0.05
    cfg = PeakConfig([(0.5, 0.5)], [], [1.0], [], eps, UNIT)
    est = estimate_S(cfg, params(eps), 5.0, profile_2d, grid_for(eps, UNIT))
    assert est.value == pytest.approx(profile_2d.S0, rel=0.03)
    assert est.value <= est.I_phi
    assert est.records >= 10


def test_estimate_boundary_peak_near_half_level(profile_2d):
    eps = 0.05
    cfg = PeakConfig([], [(0, 0.5)], [], [1.0], eps, UNIT)
    est = estimate_S(cfg, params(eps), 5.0, profile_2d, grid_for(eps, UNIT))
    ref = reference_level(0, 1, 1.5, 3.0, profile_2d.S0)
    assert ref == pytest.approx(0.5 ** 0.5 * profile_2d.S0)
    assert est.value == pytest.approx(ref, rel=0.05)


def test_peak_near_the_boundary_has_a_lower_level(profile_2d):
    eps = 0.05
    grid = grid_for(eps, UNIT)
    deep = estimate_S(PeakConfig([(0.5, 0.5)], [], [1.0], [], eps, UNIT), params(eps), 5.0,
                      profile_2d, grid)
    near = estimate_S(PeakConfig([(0.5, 2 * eps)], [], [1.0], [], eps, UNIT), params(eps), 5.0,
                      profile_2d, grid)
    assert near.value < deep.value


def test_sweep_is_independent_of_job_count(profile_2d):
    eps = 0.1
    spec = GSpec(1, 0, eps, pos_res=4)
    grid = grid_for(eps, UNIT)
    samples = sample_G(spec, grid, profile_2d)
    sched = Schedule(t_horizon=2.0)
    one = sweep_S(samples, params(eps), profile_2d, grid, sched, jobs=1)
    two = sweep_S(samples, params(eps), profile_2d, grid, sched, jobs=2)
    assert one == two
    statuses = {r.status for r in one}
    assert "boundary" in statuses and "estimated" in statuses


def test_sweep_pruning_keeps_the_maximum(profile_2d):
    eps = 0.1
    spec = GSpec(1, 0, eps, pos_res=4)
    grid = grid_for(eps, UNIT)
    samples = sample_G(spec, grid, profile_2d)
    pruned = sweep_S(samples, params(eps), profile_2d, grid, Schedule(t_horizon=2.0))
    full = sweep_S(samples, params(eps), profile_2d, grid, Schedule(t_horizon=2.0, prune=False))
    best = max(r.estimate for r in full if r.estimate is not None)
    assert max(r.estimate for r in pruned if r.estimate is not None) == best
    for r in pruned:
        if r.status == "skipped":
            assert r.I_phi <= best


@pytest.mark.slow
def test_small_solve_writes_certificate(profile_2d, tmp_path):
    eps = 0.1
    spec = GSpec(1, 0, eps, pos_res=3)
    grid = grid_for(eps, UNIT)
    rep = solve(spec, params(eps), profile_2d, grid, Schedule(t_horizon=3.0, t_track=3.0),
                out_dir=tmp_path)
    assert rep.winner is not None and rep.winner.certified
    assert rep.boundary_check == 1.0
    assert rep.S_star - rep.sigma == rep.threshold
    for name in ("minimax_report.csv", "certificate.txt", "solution.pkfld"):
        assert (tmp_path / name).exists()
    sol, _ = read_pkfld(tmp_path / "solution.pkfld")
    assert sol.values.max() > 0
    text = (tmp_path / "certificate.txt").read_text()
    assert "certified = True" in text
    rows = (tmp_path / "minimax_report.csv").read_text().splitlines()
    assert len(rows) == len(rep.samples) + 1


def test_grid_for():
    g = grid_for(0.05, UNIT, h_y=0.2)
    assert g.shape == (100, 100)
    assert max(g.h) / 0.05 <= 0.2 + 1e-12
    assert grid_for(0.1, (2.0, 1.0)).shape == (100, 50)
    assert math.isclose(grid_for(0.03, UNIT).h[0] / 0.03, 1 / 167 / 0.03)
