import math

import numpy as np
import pytest

from sosroa.odesim import (
    Grid,
    IntegratorOptions,
    Label,
    Verdict,
    boundary_cells,
    check_exponential_decay,
    integrate,
    integrate_batch,
    origin_component,
    read_labeled_grid,
    reference_roa,
)
from sosroa.poly import VectorField

DECAY = VectorField.parse(["-x1"])
LINEAR = VectorField.parse(["-x1", "-x2"])
ANTI = VectorField.parse(["x1", "x2"])
VDP_REVERSE = VectorField.parse(["-x2", "x1 + x2*(x1^2 - 1)"])
VDP_FORWARD = VectorField.parse(["x2", "-x1 - x2*(x1^2 - 1)"])
NO_STOP = IntegratorOptions(converge_eps=0.0, escape_radius=math.inf)


def test_exponential_decay_endpoint():
    tr = integrate(DECAY, [1.0], 1.0, NO_STOP)
    assert abs(tr.final_state[0] - math.exp(-1)) <= 1e-6
    assert tr.times[-1] == pytest.approx(1.0)


def test_origin_stays_put():
    tr = integrate(VDP_REVERSE, [0.0, 0.0], 10.0)
    assert np.all(tr.states == 0.0)
    assert tr.verdict is Verdict.CONVERGED


def test_outside_limit_cycle_diverges():
    assert integrate(VDP_REVERSE, [3.0, 3.0], 100.0).verdict is Verdict.DIVERGED


def test_inside_converges():
    assert integrate(VDP_REVERSE, [0.5, 0.5], 100.0).verdict is Verdict.CONVERGED


def test_short_horizon_is_undecided():
    assert integrate(VDP_REVERSE, [1.0, 1.0], 0.5).verdict is Verdict.UNDECIDED


def test_step_underflow_is_undecided():
    # finite-time blow-up x' = x^2 from x0 = 1 at t = 1
    f = VectorField.parse(["x1^2"], equilibrium_at_origin=True)
    opts = IntegratorOptions(escape_radius=math.inf, max_steps=200)
    assert integrate(f, [1.0], 2.0, opts).verdict is Verdict.UNDECIDED


def test_fixed_step_order():
    errs = []
    for h in (0.1, 0.05, 0.025):
        opts = IntegratorOptions(converge_eps=0.0, escape_radius=math.inf, fixed_step=h)
        x = integrate(DECAY, [1.0], 1.0, opts).final_state[0]
        errs.append(abs(x - math.exp(-1)))
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(r >= 2**3 for r in ratios)
    assert math.log2(ratios[-1]) >= 4


def test_time_reversal():
    x0 = [0.8, -0.4]
    ts = np.linspace(0, 5, 11)
    tight = IntegratorOptions(rtol=1e-10, atol=1e-12, converge_eps=0.0, escape_radius=math.inf)
    for t in ts[1:]:
        fwd = integrate(VDP_REVERSE, x0, t, tight).final_state
        back = integrate(VDP_FORWARD, x0, -t, tight).final_state
        assert np.allclose(fwd, back, atol=1e-5)


def test_batch_matches_single():
    pts = np.array([[0.5, 0.5], [3.0, 3.0], [0.1, -0.2]])
    batch = integrate_batch(VDP_REVERSE, pts, 100.0)
    singles = [integrate(VDP_REVERSE, p, 100.0).verdict for p in pts]
    assert batch.verdicts == singles


def test_exponential_decay_check_exact():
    pts = np.array([[1.0], [-0.5], [2.0]])
    assert check_exponential_decay(DECAY, pts, 1.0, 1.0, 5.0) <= 1e-8


def test_exponential_decay_check_violated():
    assert check_exponential_decay(DECAY, np.array([[1.0]]), 0.5, 1.0, 5.0) > 0


def test_exponential_decay_check_empty():
    assert check_exponential_decay(DECAY, np.zeros((0, 1)), 1.0, 1.0, 5.0) == -math.inf


# -- grids and reference ---------------------------------------------------------------


def test_grid_is_cell_centred():
    g = Grid.centered(1.0, 2, 5)
    assert np.allclose(g.axes()[0], [-0.8, -0.4, 0.0, 0.4, 0.8])
    assert g.cell_of([0.0, 0.0]) == (2, 2)
    assert g.points().shape == (25, 2)


def test_grid_rejects_bad_boxes():
    with pytest.raises(ValueError):
        Grid([0.0], [0.0], 3)
    with pytest.raises(ValueError):
        Grid([0.0], [1.0], 0)


def test_origin_component_four_connected():
    mask = np.array([[1, 0, 0], [0, 1, 1], [0, 1, 0]], dtype=bool)
    comp = origin_component(mask, (1, 1))
    assert comp.sum() == 3 and not comp[0, 0]


def test_boundary_cells_of_block():
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    b = boundary_cells(mask)
    assert b.sum() == 8 and not b[2, 2]


def test_reference_linear_all_inside():
    ref = reference_roa(LINEAR, Grid.centered(2.0, 2, 21), 100.0)
    assert ref.counts()["inside"] == 21 * 21


def test_reference_antistable_only_origin():
    ref = reference_roa(ANTI, Grid.centered(1.0, 2, 21), 100.0)
    assert ref.counts()["inside"] == 1
    assert ref.labels[ref.grid.cell_of([0.0, 0.0])] == Label.INSIDE


def test_reference_rejects_box_without_origin():
    with pytest.raises(ValueError):
        reference_roa(LINEAR, Grid([0.5, 0.5], [1.0, 1.0], 3), 10.0)


def test_reference_van_der_pol_inside_limit_cycle():
    ref = reference_roa(VDP_REVERSE, Grid.centered(3.0, 2, 61), 100.0)
    pts = ref.inside_points()
    r = np.linalg.norm(pts, axis=1)
    # the limit cycle reaches roughly radius 2.7 and dips to roughly 1.5
    assert r.max() < 2.9
    assert ref.labels[ref.grid.cell_of([1.0, 0.0])] == Label.INSIDE
    assert ref.labels[ref.grid.cell_of([2.5, 2.5])] == Label.OUTSIDE


def test_reference_monotone_in_horizon():
    grid = Grid.centered(3.0, 2, 41)
    counts = [reference_roa(VDP_REVERSE, grid, t).counts()["inside"] for t in (2.0, 10.0, 100.0)]
    assert counts == sorted(counts)


def test_reference_deterministic_and_csv(tmp_path):
    grid = Grid.centered(3.0, 2, 31)
    a = reference_roa(VDP_REVERSE, grid, 50.0)
    b = reference_roa(VDP_REVERSE, grid, 50.0)
    assert np.array_equal(a.labels, b.labels)
    a.write_csv(tmp_path / "grid.csv", tmp_path / "boundary.csv")
    pts, labels = read_labeled_grid(tmp_path / "grid.csv")
    assert np.array_equal(labels, a.labels.reshape(-1))
    assert np.array_equal(pts, grid.points())


def test_single_cell_reference():
    ref = reference_roa(LINEAR, Grid.centered(1.0, 2, 1), 10.0)
    assert ref.labels.shape == (1, 1) and ref.counts()["inside"] == 1
