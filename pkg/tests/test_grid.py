import numpy as np
import pytest

from densitycontrol import (
    DensityControlError,
    GridSpec,
    ScalarField,
    VectorField,
    dump_field_csv,
    interpolate,
    interpolate_many,
    load_scalar_field_csv,
    load_vector_field_csv,
    upwind_differences,
    upwind_directional,
)


def test_grid_basic_geometry():
    g = GridSpec((-2.0, 0.0), (2.0, 1.0), (80, 10))
    assert g.shape == (81, 11)
    assert g.num_points == 81 * 11
    np.testing.assert_allclose(g.spacing, [0.05, 0.1])
    assert g.cell_volume == pytest.approx(0.005)


def test_grid_validation():
    with pytest.raises(DensityControlError):
        GridSpec((0.0,), (0.0,), (4,))
    with pytest.raises(DensityControlError):
        GridSpec((0.0,), (1.0,), (0,))
    with pytest.raises(DensityControlError):
        GridSpec((0.0, 0.0), (1.0,), (2, 2))


def test_index_point_roundtrip():
    g = GridSpec((-1.0, -3.0), (1.0, 3.0), (8, 12))
    for flat in [0, 5, 37, g.num_points - 1]:
        idx = g.multi_index(flat)
        x = g.point(idx)
        assert g.index_of(x) == idx
        assert g.flat_index(idx) == flat


def test_points_row_major_order():
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (2, 2))
    pts = g.points()
    # last index varies fastest
    np.testing.assert_allclose(pts[0], [0.0, 0.0])
    np.testing.assert_allclose(pts[1], [0.0, 0.5])
    np.testing.assert_allclose(pts[3], [0.5, 0.0])


def test_field_size_validation():
    g = GridSpec((0.0,), (1.0,), (4,))
    with pytest.raises(DensityControlError):
        ScalarField(g, np.zeros(3))
    with pytest.raises(DensityControlError):
        VectorField(g, np.zeros((4, 2)))


def test_upwind_differences_middle():
    g = GridSpec((0.0,), (2.0,), (2,))
    f = ScalarField(g, [0.0, 1.0, 2.0])
    back, fwd = upwind_differences(f, (1,))
    assert back[0] == pytest.approx(1.0)
    assert fwd[0] == pytest.approx(1.0)


def test_upwind_differences_constant_field():
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 3))
    f = ScalarField(g, np.full(16, 2.5))
    for flat in range(g.num_points):
        back, fwd = upwind_differences(f, g.multi_index(flat))
        np.testing.assert_allclose(back, 0.0)
        np.testing.assert_allclose(fwd, 0.0)


def test_upwind_differences_boundary_components_zero():
    g = GridSpec((0.0,), (2.0,), (2,))
    f = ScalarField(g, [5.0, 1.0, 2.0])
    back, _ = upwind_differences(f, (0,))  # no left neighbor
    assert back[0] == 0.0
    _, fwd = upwind_differences(f, (2,))  # no right neighbor
    assert fwd[0] == 0.0


def test_upwind_directional_positive_velocity_uses_backward():
    g = GridSpec((0.0,), (2.0,), (2,))
    f = ScalarField(g, [0.0, 1.0, 2.0])
    assert upwind_directional(f, [1.0], (1,)) == pytest.approx(1.0)


def test_upwind_directional_negative_velocity_uses_forward():
    g = GridSpec((0.0,), (2.0,), (2,))
    f = ScalarField(g, [0.0, 1.0, 4.0])
    assert upwind_directional(f, [-1.0], (1,)) == pytest.approx(-3.0)


def test_upwind_directional_zero_velocity():
    g = GridSpec((0.0,), (2.0,), (2,))
    f = ScalarField(g, [0.0, 1.0, 4.0])
    assert upwind_directional(f, [0.0], (1,)) == 0.0


def test_upwind_directional_affine_exact_interior():
    # for V = a.x both one-sided differences equal a, so the upwind value is
    # exactly a.f for any sign pattern
    g = GridSpec((-1.0, -1.0), (1.0, 1.0), (10, 10))
    a = np.array([1.7, -0.3])
    f = ScalarField(g, g.points() @ a)
    rng = np.random.default_rng(0)
    for _ in range(20):
        idx = (rng.integers(1, 10), rng.integers(1, 10))
        vel = rng.uniform(-2, 2, size=2)
        assert upwind_directional(f, vel, idx) == pytest.approx(float(a @ vel), abs=1e-12)


def test_upwind_gradient_first_order_on_quadratic():
    # halving the spacing should roughly halve the one-sided difference error
    errs = []
    for cells in (20, 40, 80):
        g = GridSpec((-1.0,), (1.0,), (cells,))
        x = g.points()[:, 0]
        f = ScalarField(g, x**2)
        worst = 0.0
        for i in range(2, cells - 1):
            back, fwd = upwind_differences(f, (i,))
            xi = x[i]
            worst = max(worst, abs(back[0] - 2 * xi), abs(fwd[0] - 2 * xi))
        errs.append(worst)
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.2)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.2)


def test_interpolate_identity_on_grid_points():
    g = GridSpec((0.0, 0.0), (1.0, 2.0), (4, 4))
    rng = np.random.default_rng(1)
    f = ScalarField(g, rng.uniform(size=g.num_points))
    for flat in range(0, g.num_points, 7):
        x = g.point(g.multi_index(flat))
        assert interpolate(f, x) == pytest.approx(f.values[flat], abs=1e-13)


def test_interpolate_linear_1d():
    g = GridSpec((0.0,), (1.0,), (1,))
    f = ScalarField(g, [0.0, 1.0])
    assert interpolate(f, [0.25]) == pytest.approx(0.25)


def test_interpolate_constant_everywhere():
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 3))
    f = ScalarField(g, np.full(16, 3.25))
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 1, size=(50, 2))
    np.testing.assert_allclose(interpolate_many(f, pts), 3.25)


def test_interpolate_exact_for_multilinear():
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (5, 5))
    pts_grid = g.points()
    vals = 2.0 + 0.5 * pts_grid[:, 0] - 1.5 * pts_grid[:, 1] + 3.0 * pts_grid[:, 0] * pts_grid[:, 1]
    f = ScalarField(g, vals)
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 1, size=(100, 2))
    expect = 2.0 + 0.5 * pts[:, 0] - 1.5 * pts[:, 1] + 3.0 * pts[:, 0] * pts[:, 1]
    np.testing.assert_allclose(interpolate_many(f, pts), expect, atol=1e-12)


def test_interpolate_monotone_within_corner_range():
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (4, 4))
    rng = np.random.default_rng(4)
    f = ScalarField(g, rng.uniform(-5, 5, size=g.num_points))
    pts = rng.uniform(0, 1, size=(200, 2))
    out = interpolate_many(f, pts)
    assert np.all(out >= f.values.min() - 1e-12)
    assert np.all(out <= f.values.max() + 1e-12)


def test_interpolate_clamps_outside_domain():
    g = GridSpec((0.0,), (1.0,), (2,))
    f = ScalarField(g, [1.0, 2.0, 3.0])
    assert interpolate(f, [-10.0]) == pytest.approx(1.0)
    assert interpolate(f, [10.0]) == pytest.approx(3.0)


def test_csv_roundtrip_scalar(tmp_path):
    g = GridSpec((-1.0, 0.0), (1.0, 0.5), (6, 3))
    rng = np.random.default_rng(5)
    f = ScalarField(g, rng.standard_normal(g.num_points))
    path = tmp_path / "field.csv"
    dump_field_csv(f, path)
    back = load_scalar_field_csv(path)
    assert back.grid == g
    np.testing.assert_array_equal(back.values, f.values)


def test_csv_roundtrip_vector(tmp_path):
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 4))
    rng = np.random.default_rng(6)
    f = VectorField(g, rng.standard_normal((g.num_points, 2)))
    path = tmp_path / "policy.csv"
    dump_field_csv(f, path)
    back = load_vector_field_csv(path)
    assert back.grid == g
    np.testing.assert_array_equal(back.values, f.values)


def test_csv_header_format(tmp_path):
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (1, 1))
    f = ScalarField(g, np.arange(4.0))
    path = tmp_path / "f.csv"
    dump_field_csv(f, path)
    header = path.read_text().splitlines()[0]
    assert header == "i0,i1,x0,x1,value"
