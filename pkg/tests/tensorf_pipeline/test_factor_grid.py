import numpy as np
import pytest

from few_tensorf.errors import GridCapacityError, GridError
from few_tensorf.tensorf_pipeline.factor_grid import (
    FactorizedAppearanceGrid,
    FactorizedDensityGrid,
    GridGeometry,
    dense_reconstruct,
    eval_appearance,
    eval_density,
    grad_factors,
    interpolate_dense,
    trilinear_stencil,
    upsample,
)
from helpers import points_inside


def _random_density(rng, resolution, rank, decomposition, activation="relu"):
    geometry = GridGeometry(resolution, (-1.0, -0.5, 0.0), (1.0, 1.5, 0.8))
    return FactorizedDensityGrid.random(geometry, rank, decomposition, activation, scale=1.0, rng=rng)


def _random_appearance(rng, resolution, rank, decomposition, feature_dim=5):
    geometry = GridGeometry(resolution, (-1.0, -0.5, 0.0), (1.0, 1.5, 0.8))
    return FactorizedAppearanceGrid.random(geometry, rank, feature_dim, decomposition, scale=1.0, rng=rng)


def test_geometry_rejects_invalid_bounds():
    with pytest.raises(GridError):
        GridGeometry((4, 4, 4), (0.0, 0.0, 0.0), (1.0, 0.0, 1.0))
    with pytest.raises(GridError):
        GridGeometry((1, 4, 4), (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def test_factor_shapes_are_validated():
    geometry = GridGeometry((4, 5, 6), (-1, -1, -1), (1, 1, 1))
    lines = [np.zeros((2, 4)), np.zeros((2, 5)), np.zeros((2, 7))]
    with pytest.raises(GridError):
        FactorizedDensityGrid(geometry, 2, "cp", lines)


def test_zero_factors_give_zero_density(geometry, rng):
    grid = FactorizedDensityGrid(geometry, 2, "vm", activation="relu")
    points = points_inside(geometry, 20, rng)
    assert np.all(eval_density(grid, points) == 0.0)
    assert np.all(dense_reconstruct(grid) == 0.0)


def test_constant_factors_sum_over_modes(geometry, rng):
    grid = FactorizedDensityGrid(geometry, 1, "vm", activation="relu")
    for factor in grid.parameters().values():
        factor[...] = 1.0
    raw, _ = grid.raw_density(points_inside(geometry, 10, rng))
    np.testing.assert_allclose(raw, 3.0, atol=1e-12)


def test_constant_appearance_with_shared_basis(geometry, rng):
    grid = FactorizedAppearanceGrid(geometry, 1, 4, "vm")
    for name, factor in grid.parameters().items():
        if name != "basis":
            factor[...] = 1.0
    grid.basis[:] = 0.0
    grid.basis[:, 0] = 1.0
    features = eval_appearance(grid, points_inside(geometry, 10, rng))
    np.testing.assert_allclose(features, np.tile([3.0, 0.0, 0.0, 0.0], (10, 1)), atol=1e-12)


def test_zero_basis_gives_zero_features(geometry, rng):
    grid = FactorizedAppearanceGrid.random(geometry, 2, 4, "vm", rng=rng)
    grid.basis[:] = 0.0
    assert np.all(grid.eval_appearance(points_inside(geometry, 10, rng)) == 0.0)


def test_rank_one_dense_example():
    geometry = GridGeometry((2, 2, 2), (0, 0, 0), (1, 1, 1))
    grid = FactorizedDensityGrid(geometry, 1, "vm", activation="relu")
    grid.lines[0][0] = [1.0, 2.0]
    grid.planes[0][0] = 1.0
    dense = grid.dense_reconstruct()
    assert np.all(dense[0] == 1.0)
    assert np.all(dense[1] == 2.0)


@pytest.mark.parametrize("decomposition", ["vm", "cp"])
def test_factorization_matches_dense_oracle(decomposition):
    rng = np.random.default_rng(7)
    for _ in range(20):
        resolution = tuple(int(n) for n in rng.integers(2, 9, size=3))
        rank = int(rng.integers(1, 4))
        density = _random_density(rng, resolution, rank, decomposition)
        appearance = _random_appearance(rng, resolution, rank, decomposition)
        points = points_inside(density.geometry, 100, rng)

        raw, _ = density.raw_density(points)
        np.testing.assert_allclose(raw, interpolate_dense(density.dense_reconstruct(), density.geometry, points),
                                   atol=1e-6)
        np.testing.assert_allclose(appearance.eval_appearance(points),
                                   interpolate_dense(appearance.dense_reconstruct(), appearance.geometry, points),
                                   atol=1e-6)


def test_partition_of_unity(geometry, rng):
    _, weights = trilinear_stencil(geometry, points_inside(geometry, 200, rng))
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(weights >= 0)


def test_node_exactness(rng):
    grid = _random_density(rng, (4, 3, 5), 2, "vm")
    geometry = grid.geometry
    axes = [geometry.node_positions(axis) for axis in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    raw, _ = grid.raw_density(nodes)
    np.testing.assert_allclose(raw, grid.dense_reconstruct().reshape(-1), atol=1e-10)


def test_points_outside_aabb_are_culled(rng):
    grid = _random_density(rng, (4, 4, 4), 2, "vm", activation="softplus")
    outside = np.array([[5.0, 0.0, 0.4], [0.0, -3.0, 0.4], [0.0, 0.5, 2.0]])
    assert np.all(grid.eval_density(outside) == 0.0)


def test_density_is_nonnegative(rng):
    for activation in ("softplus", "relu"):
        grid = _random_density(rng, (5, 5, 5), 3, "vm", activation=activation)
        assert np.all(grid.eval_density(points_inside(grid.geometry, 100, rng)) >= 0.0)


def test_dense_cap_is_enforced(rng):
    grid = _random_density(rng, (8, 8, 8), 1, "cp")
    with pytest.raises(GridCapacityError):
        grid.dense_reconstruct(cap=100)


def _finite_difference(grid, loss, eps=1e-4):
    numeric = {}
    for name, value in grid.parameters().items():
        numeric[name] = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss()
            flat[i] = original - eps
            minus = loss()
            flat[i] = original
            numeric[name].reshape(-1)[i] = (plus - minus) / (2 * eps)
    return numeric


def _assert_gradients_close(analytic, numeric, rtol=1e-5):
    for name in numeric:
        scale = max(1.0, np.abs(numeric[name]).max())
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=rtol, atol=rtol * scale, err_msg=name)


@pytest.mark.parametrize("decomposition", ["vm", "cp"])
def test_density_gradient_matches_finite_differences(decomposition):
    rng = np.random.default_rng(11)
    grid = _random_density(rng, (4, 4, 4), 2, decomposition)
    points = points_inside(grid.geometry, 30, rng)
    upstream = rng.normal(size=30)
    mask = np.linspace(1.0, 0.2, grid.n_components)

    analytic = grid.grad_factors(points, upstream, mask)
    numeric = _finite_difference(grid, lambda: float(upstream @ grid.raw_density(points, mask)[0]))
    _assert_gradients_close(analytic, numeric)


@pytest.mark.parametrize("decomposition", ["vm", "cp"])
def test_appearance_gradient_matches_finite_differences(decomposition):
    rng = np.random.default_rng(12)
    grid = _random_appearance(rng, (3, 4, 3), 2, decomposition, feature_dim=3)
    points = points_inside(grid.geometry, 20, rng)
    upstream = rng.normal(size=(20, 3))

    analytic = grad_factors(grid, points, upstream)
    numeric = _finite_difference(grid, lambda: float(np.sum(upstream * grid.eval_appearance(points))))
    _assert_gradients_close(analytic, numeric)


def test_zero_upstream_gives_zero_gradient(rng):
    grid = _random_density(rng, (4, 4, 4), 2, "vm")
    grads = grid.grad_factors(points_inside(grid.geometry, 10, rng), np.zeros(10))
    assert all(np.all(g == 0.0) for g in grads.values())


def test_gradient_at_node_equals_plane_value(rng):
    grid = _random_density(rng, (4, 4, 4), 1, "vm")
    geometry = grid.geometry
    i, j, k = 1, 2, 3
    node = np.array([[geometry.node_positions(0)[i], geometry.node_positions(1)[j], geometry.node_positions(2)[k]]])
    grads = grid.grad_factors(node, np.ones(1))
    assert grads["line_x"][0, i] == pytest.approx(grid.planes[0][0, j, k], abs=1e-9)


def test_gradient_touches_only_stencil_entries(rng):
    grid = _random_density(rng, (8, 8, 8), 1, "vm")
    grads = grid.grad_factors(points_inside(grid.geometry, 1, rng), np.ones(1))
    assert np.count_nonzero(grads["line_x"]) <= 2
    assert np.count_nonzero(grads["plane_x"]) <= 4


def test_upsample_same_resolution_is_identity(rng):
    grid = _random_density(rng, (4, 5, 3), 2, "vm")
    points = points_inside(grid.geometry, 50, rng)
    same = upsample(grid, grid.geometry.resolution)
    np.testing.assert_array_equal(same.raw_density(points)[0], grid.raw_density(points)[0])


@pytest.mark.parametrize("decomposition", ["vm", "cp"])
def test_nested_upsample_preserves_field(decomposition):
    rng = np.random.default_rng(5)
    grid = _random_density(rng, (4, 5, 3), 2, decomposition)
    points = points_inside(grid.geometry, 100, rng)
    finer = grid.upsample((7, 9, 5))
    assert finer.geometry.resolution == (7, 9, 5)
    np.testing.assert_allclose(finer.raw_density(points)[0], grid.raw_density(points)[0], atol=1e-12)


def test_upsample_linear_ramp():
    geometry = GridGeometry((2, 2, 2), (0, 0, 0), (1, 1, 1))
    grid = FactorizedDensityGrid(geometry, 1, "cp", activation="relu")
    grid.lines[0][0] = [0.0, 1.0]
    finer = grid.upsample((3, 2, 2))
    np.testing.assert_allclose(finer.lines[0][0], [0.0, 0.5, 1.0])


def test_upsample_keeps_constant_factors():
    geometry = GridGeometry((3, 3, 3), (0, 0, 0), (1, 1, 1))
    grid = FactorizedAppearanceGrid(geometry, 1, 3, "vm")
    for factor in grid.parameters().values():
        factor[...] = 1.0
    finer = grid.upsample((5, 5, 5))
    for name, factor in finer.parameters().items():
        np.testing.assert_allclose(factor, 1.0, err_msg=name)


def test_upsample_rejects_shrinking(rng):
    grid = _random_density(rng, (4, 4, 4), 1, "vm")
    with pytest.raises(GridError):
        grid.upsample((3, 4, 4))
