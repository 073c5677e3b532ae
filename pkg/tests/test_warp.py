import numpy as np
import pytest

from chromacortex import autodiff as ad
from chromacortex import warp as wp
from test_autodiff import check_op


SPEC = wp.WarpSpec(lattice_shape=(16, 16), n_knots=8, res_nodes=4, res_bound=0.6)


def rand_params(seed=0, res_scale=0.4):
    rng = np.random.default_rng(seed)
    theta = SPEC.identity_theta() + 0.3 * rng.standard_normal(SPEC.n_knots)
    res = res_scale * rng.uniform(-1, 1, (SPEC.res_nodes, SPEC.res_nodes, 2))
    return theta, res


def interior_points(n, seed=1):
    rng = np.random.default_rng(seed)
    V, U = SPEC.lattice_shape
    return np.stack(
        [rng.uniform(1.0, V - 2.0, n), rng.uniform(1.0, U - 2.0, n)], axis=-1
    )


class TestGeometry:
    def test_identity_parameters(self):
        theta = SPEC.identity_theta()
        res = SPEC.zero_residual()
        pts = interior_points(40)
        out = wp.warp_forward_np(SPEC, theta, res, pts)
        assert np.abs(out - pts).max() < 1e-9
        inv = wp.warp_inverse_np(SPEC, theta, res, pts)
        assert np.abs(inv - pts).max() < 1e-9

    def test_forward_then_inverse(self):
        theta, res = rand_params(3)
        pts = interior_points(200, seed=4)
        fwd = wp.warp_forward_np(SPEC, theta, res, pts)
        back = wp.warp_inverse_np(SPEC, theta, res, fwd)
        assert np.abs(back - pts).max() <= 1e-8

    def test_profile_strictly_increasing(self):
        theta, _ = rand_params(9)
        r = np.linspace(0, SPEC.r_corner * 1.2, 300)
        rho, _ = wp._rho_and_slope(SPEC, theta, r)
        assert np.all(np.diff(rho) > 0)

    def test_jacobian_matches_fd(self):
        theta, res = rand_params(5)
        pts = interior_points(20, seed=6)
        J = wp.warp_jacobian_np(SPEC, theta, res, pts)
        h = 1e-6
        for axis in range(2):
            dp = np.zeros(2)
            dp[axis] = h
            plus = wp.warp_forward_np(SPEC, theta, res, pts + dp)
            minus = wp.warp_forward_np(SPEC, theta, res, pts - dp)
            fd = (plus - minus) / (2 * h)
            assert np.abs(J[:, :, axis] - fd).max() < 1e-5

    def test_bijectivity_check(self):
        theta, res = rand_params(2)
        assert wp.jacobian_det_positive(SPEC, theta, res)
        bad = SPEC.zero_residual()
        bad[1, 1, 0] = 25.0  # absurd displacement folds the map
        assert not wp.jacobian_det_positive(SPEC, SPEC.identity_theta(), bad)

    def test_slope_fitting_round_trip(self):
        slopes = np.linspace(0.8, 1.9, SPEC.n_knots)
        theta = SPEC.theta_for_slopes(slopes)
        assert np.allclose(wp._slopes(SPEC, theta), slopes, atol=1e-9)


class TestGradients:
    def test_forward_fd(self):
        theta, res = rand_params(11)
        pts = interior_points(25, seed=12)

        def build(t, r, p):
            out = wp.warp_forward(SPEC, t, r, p)
            return ad.tsum(ad.mul(out, out))

        check_op(build, [theta, res, pts], h=1e-5, tol=2e-5)

    def test_inverse_fd(self):
        theta, res = rand_params(13)
        pts = interior_points(25, seed=14)
        base = wp.warp_forward_np(SPEC, theta, res, pts)

        def build(t, r, p):
            out = wp.warp_inverse(SPEC, t, r, p)
            return ad.tsum(ad.mul(out, out))

        check_op(build, [theta, res, base], h=1e-5, tol=3e-5)

    def test_composed_flow_fd(self):
        # the training-path composition: inverse(forward(pts) + delta)
        theta, res = rand_params(15)
        pts = interior_points(25, seed=16)
        delta = np.array([0.7, -0.4])

        def build(t, r, d):
            tape = t.tape
            fwd = wp.warp_forward(SPEC, t, r, tape.const(pts))
            shifted = ad.add(fwd, ad.reshape(d, (1, 2)))
            back = wp.warp_inverse(SPEC, t, r, shifted)
            return ad.tsum(ad.mul(back, back))

        check_op(build, [theta, res, delta], h=1e-5, tol=3e-5)
