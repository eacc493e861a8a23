import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deformprim import local_deform as ld
from deformprim.errors import UnstableField
from oracles import euler_flow, random_field

HALF = 1.0
N = ld.DEFAULT_RES


def test_zero_field_flow_is_exact_identity(rng):
    flow = ld.integrate_ss(ld.VelocityField.zeros(HALF))
    s = rng.uniform(-1, 1, size=(100, 3))
    np.testing.assert_array_equal(ld.apply_flow(flow, s), s)
    assert not np.any(flow.disp)


def test_sampling_matches_explicit_weights(rng):
    grid = rng.normal(size=(N, N, N, 3))
    pts = rng.uniform(-1.1, 1.1, size=(200, 3))
    idx, w = ld.trilinear_weights(pts, N, HALF)
    explicit = np.einsum("mk,mkc->mc", w, grid.reshape(-1, 3)[idx])
    np.testing.assert_allclose(ld.sample_grid(grid, HALF, pts), explicit, atol=1e-12)


def test_sampling_reproduces_nodes_and_linear_fields():
    nodes = ld.node_positions(N, HALF)
    A = np.array([[0.3, -0.1, 0.2], [0.0, 0.5, 0.1], [-0.2, 0.1, 0.4]])
    grid = nodes @ A.T
    pts = np.random.default_rng(5).uniform(-1, 1, size=(300, 3))
    # trilinear interpolation is exact for affine fields
    np.testing.assert_allclose(ld.sample_grid(grid, HALF, pts), pts @ A.T, atol=1e-12)
    np.testing.assert_allclose(ld.sample_grid(grid, HALF, nodes.reshape(-1, 3)), grid.reshape(-1, 3), atol=1e-12)


def test_outside_points_see_zero(rng):
    grid = rng.normal(size=(N, N, N, 3))
    assert not np.any(ld.sample_grid(grid, HALF, np.array([[1.5, 0, 0], [0, -2, 0]])))


@given(st.integers(0, 10_000))
def test_splat_is_adjoint_of_sampling(seed):
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(8, 8, 8, 3))
    pts = rng.uniform(-1.2, 1.2, size=(40, 3))
    vals = rng.normal(size=(40, 3))
    lhs = np.sum(ld.sample_grid(grid, HALF, pts) * vals)
    rhs = np.sum(grid * ld.splat_to_grid(vals, pts, 8, HALF))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_smoothing_matches_direct_convolution(rng):
    n, sigma = 9, 1.0
    grid = rng.normal(size=(n, n, n, 3))
    r = int(3.0 * sigma + 0.5)
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    kernel = k[:, None, None] * k[None, :, None] * k[None, None, :]
    padded = np.pad(grid, ((r, r), (r, r), (r, r), (0, 0)))
    direct = np.zeros_like(grid)
    for a in range(2 * r + 1):
        for b in range(2 * r + 1):
            for c in range(2 * r + 1):
                direct += kernel[a, b, c] * padded[a : a + n, b : b + n, c : c + n]
    np.testing.assert_allclose(ld.smooth_grid(grid, sigma), direct, atol=1e-12)


def test_smoothing_is_self_adjoint(rng):
    a = rng.normal(size=(7, 7, 7, 3))
    b = rng.normal(size=(7, 7, 7, 3))
    assert np.sum(ld.smooth_grid(a, 1.0) * b) == pytest.approx(np.sum(a * ld.smooth_grid(b, 1.0)))


def test_cap_magnitude():
    grid = np.zeros((4, 4, 4, 3))
    grid[1, 2, 3] = [3.0, 4.0, 0.0]
    capped = ld.cap_magnitude(grid, 2.0)
    assert np.max(np.linalg.norm(capped, axis=-1)) == pytest.approx(2.0)
    assert ld.cap_magnitude(grid, 10.0) is grid


def test_unstable_field_rejected():
    grid = np.zeros((N, N, N, 3))
    grid[..., 0] = 100.0
    with pytest.raises(UnstableField):
        ld.integrate_ss(ld.VelocityField(grid, HALF), steps=2)


@pytest.mark.parametrize("seed", range(3))
def test_forward_inverse_composition(seed):
    v = random_field(np.random.default_rng(seed))
    fwd, inv = ld.integrate_ss(v), ld.inverse_flow(v)
    s = ld.node_positions(N, 0.6 * HALF).reshape(-1, 3)
    back = ld.apply_flow(inv, ld.apply_flow(fwd, s))
    err_cells = np.linalg.norm(back - s, axis=1).mean() / v.spacing
    assert err_cells < 1e-2


@pytest.mark.parametrize("seed", range(3))
def test_scaling_and_squaring_matches_euler_oracle(seed):
    v = random_field(np.random.default_rng(seed))
    s = np.random.default_rng(seed + 100).uniform(-0.7, 0.7, size=(300, 3))
    ss = ld.apply_flow(ld.integrate_ss(v), s)
    oracle = euler_flow(v, s)
    assert np.linalg.norm(ss - oracle, axis=1).mean() < 1e-3 * 2 * HALF


def test_flow_is_orientation_preserving(rng):
    v = random_field(rng)
    det = ld.jacobian_determinant(ld.integrate_ss(v))
    assert det.shape == (N - 1,) * 3
    assert np.all(det > 0)


def test_velocity_field_validation():
    with pytest.raises(ValueError):
        ld.VelocityField(np.zeros((4, 4, 3, 3)), 1.0)
    bad = np.zeros((4, 4, 4, 3))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        ld.VelocityField(bad, 1.0)


def test_constant_field_flows_to_translation():
    grid = np.zeros((N, N, N, 3))
    grid[..., 0] = 0.1
    v = ld.VelocityField(grid, HALF)
    # the zero field outside the lattice leaks inward from the faces during
    # squaring, so stay well inside
    s = np.random.default_rng(0).uniform(-0.3, 0.3, size=(50, 3))
    np.testing.assert_allclose(ld.apply_flow(ld.integrate_ss(v), s) - s, [[0.1, 0, 0]] * 50, atol=1e-6)
    np.testing.assert_allclose(ld.apply_flow(ld.inverse_flow(v), s) - s, [[-0.1, 0, 0]] * 50, atol=1e-6)


def test_smoothing_impulse_and_constant():
    grid = np.zeros((15, 15, 15, 3))
    grid[7, 7, 7] = [1.0, 2.0, 3.0]
    out = ld.smooth_grid(grid, 1.0)
    np.testing.assert_allclose(out.sum(axis=(0, 1, 2)), [1.0, 2.0, 3.0])
    const = ld.smooth_grid(np.ones((15, 15, 15, 3)), 1.0)
    np.testing.assert_allclose(const[4:-4, 4:-4, 4:-4], 1.0)
    assert const[0, 0, 0, 0] < 1.0
    assert not np.any(ld.smooth_grid(np.zeros((5, 5, 5, 3)), 1.0))


def test_semigroup_half_field_composed_with_itself(rng):
    v = random_field(rng)
    half_flow = ld.integrate_ss(ld.VelocityField(v.grid / 2, v.half))
    s = rng.uniform(-0.7, 0.7, size=(200, 3))
    twice = ld.apply_flow(half_flow, ld.apply_flow(half_flow, s))
    once = ld.apply_flow(ld.integrate_ss(v), s)
    assert np.linalg.norm(twice - once, axis=1).mean() < 1e-3 * 2 * HALF
