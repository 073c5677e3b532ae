"""Invertible spatial warp between the cone lattice frame and percept space.

The map is a strictly increasing piecewise-linear radial profile around the
lattice center (softplus-parameterized interval slopes, so monotonicity holds
for any parameter values) plus a smooth bilinear residual displacement field
whose magnitude is kept small enough to preserve bijectivity. The radial part
inverts analytically; the residual is absorbed by a fixed-point iteration that
contracts because the residual is bounded and smooth.

Both directions are exposed as tape primitives. The inverse pullback uses the
implicit function theorem with the analytic 2x2 Jacobian of the forward map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chromacortex import autodiff as ad


class WarpError(Exception):
    pass


class InvalidWarpError(WarpError):
    pass


@dataclass(frozen=True)
class WarpSpec:
    """Fixed structure of the warp; the learnable values live elsewhere."""

    lattice_shape: tuple[int, int]  # (V, U)
    n_knots: int = 16
    res_nodes: int = 6
    res_bound: float = 0.75  # max |residual| displacement in lattice units
    min_slope: float = 0.05

    @property
    def center(self) -> np.ndarray:
        V, U = self.lattice_shape
        return np.array([(V - 1) / 2.0, (U - 1) / 2.0])

    @property
    def r_corner(self) -> float:
        c = self.center
        return float(np.hypot(c[0], c[1]))

    @property
    def dr(self) -> float:
        return self.r_corner / self.n_knots

    def identity_theta(self) -> np.ndarray:
        t = np.log(np.expm1(1.0 - self.min_slope))
        return np.full(self.n_knots, t)

    def zero_residual(self) -> np.ndarray:
        return np.zeros((self.res_nodes, self.res_nodes, 2))

    def theta_for_slopes(self, slopes: np.ndarray) -> np.ndarray:
        s = np.maximum(np.asarray(slopes) - self.min_slope, 1e-6)
        return np.log(np.expm1(s))


def _slopes(spec: WarpSpec, theta: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(theta))) + np.maximum(theta, 0.0) + spec.min_slope


def _rho_and_slope(spec: WarpSpec, theta: np.ndarray, r: np.ndarray):
    """Profile value and local slope at radii r; linear extension past the corner."""
    s = _slopes(spec, theta)
    dr = spec.dr
    cum = np.concatenate([[0.0], np.cumsum(s) * dr])  # profile at the knots
    idx = np.clip((r / dr).astype(np.int64), 0, spec.n_knots - 1)
    rho = cum[idx] + s[idx] * (r - idx * dr)
    return rho, s[idx]


def _rho_inverse(spec: WarpSpec, theta: np.ndarray, s_target: np.ndarray) -> np.ndarray:
    s = _slopes(spec, theta)
    dr = spec.dr
    cum = np.concatenate([[0.0], np.cumsum(s) * dr])
    idx = np.clip(np.searchsorted(cum, s_target, side="right") - 1, 0, spec.n_knots - 1)
    return idx * dr + (s_target - cum[idx]) / s[idx]


def _dlen_dtheta(spec: WarpSpec, r: np.ndarray) -> np.ndarray:
    """Overlap of [0, r] with each slope interval: (M, J). d rho/d slope_j."""
    dr = spec.dr
    edges = np.arange(spec.n_knots) * dr
    lens = np.clip(r[:, None] - edges[None, :], 0.0, dr)
    # radii beyond the corner extend the last interval linearly
    over = r - spec.r_corner
    lens[:, -1] += np.maximum(over, 0.0)
    return lens


def _res_interp(spec: WarpSpec, res: np.ndarray, pts: np.ndarray):
    """Bilinear residual displacement at lattice points; returns value, cell
    data for reuse by gradients. Coordinates clamp to the control box."""
    V, U = spec.lattice_shape
    G = spec.res_nodes
    gy = (V - 1) / (G - 1)
    gx = (U - 1) / (G - 1)
    cy = np.clip(pts[:, 0] / gy, 0.0, G - 1 - 1e-9)
    cx = np.clip(pts[:, 1] / gx, 0.0, G - 1 - 1e-9)
    i0 = np.minimum(cy.astype(np.int64), G - 2)
    j0 = np.minimum(cx.astype(np.int64), G - 2)
    fi = cy - i0
    fj = cx - j0
    w00 = (1 - fi) * (1 - fj)
    w01 = (1 - fi) * fj
    w10 = fi * (1 - fj)
    w11 = fi * fj
    val = (
        res[i0, j0] * w00[:, None]
        + res[i0, j0 + 1] * w01[:, None]
        + res[i0 + 1, j0] * w10[:, None]
        + res[i0 + 1, j0 + 1] * w11[:, None]
    )
    # spatial gradient of the field (per cell, constant)
    dy = (
        (res[i0 + 1, j0] - res[i0, j0]) * (1 - fj)[:, None]
        + (res[i0 + 1, j0 + 1] - res[i0, j0 + 1]) * fj[:, None]
    ) / gy
    dx = (
        (res[i0, j0 + 1] - res[i0, j0]) * (1 - fi)[:, None]
        + (res[i0 + 1, j0 + 1] - res[i0 + 1, j0]) * fi[:, None]
    ) / gx
    cell = (i0, j0, w00, w01, w10, w11)
    return val, dy, dx, cell


def _res_scatter(spec: WarpSpec, cell, g: np.ndarray) -> np.ndarray:
    """Adjoint of the bilinear residual interpolation."""
    G = spec.res_nodes
    i0, j0, w00, w01, w10, w11 = cell
    out = np.zeros((G, G, 2))
    for di, dj, w in ((0, 0, w00), (0, 1, w01), (1, 0, w10), (1, 1, w11)):
        np.add.at(out, (i0 + di, j0 + dj), w[:, None] * g)
    return out


def warp_forward_np(spec: WarpSpec, theta: np.ndarray, res: np.ndarray, pts: np.ndarray):
    """phi(points): lattice (row, col) -> percept-space (row, col)."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    d = flat - spec.center
    r = np.hypot(d[:, 0], d[:, 1])
    rho, _ = _rho_and_slope(spec, theta, r)
    scale = np.where(r > 1e-12, rho / np.maximum(r, 1e-12), _slopes(spec, theta)[0])
    rval, _, _, _ = _res_interp(spec, res, flat)
    out = spec.center + scale[:, None] * d + rval
    return out.reshape(pts.shape)


def warp_jacobian_np(spec: WarpSpec, theta: np.ndarray, res: np.ndarray, pts: np.ndarray):
    """Analytic 2x2 Jacobian of phi at each point, shape (M, 2, 2)."""
    flat = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    d = flat - spec.center
    r = np.hypot(d[:, 0], d[:, 1])
    rho, slope = _rho_and_slope(spec, theta, r)
    s0 = _slopes(spec, theta)[0]
    scale = np.where(r > 1e-12, rho / np.maximum(r, 1e-12), s0)
    safe_r = np.maximum(r, 1e-12)
    dhat = d / safe_r[:, None]
    J = np.zeros((flat.shape[0], 2, 2))
    J[:, 0, 0] = scale
    J[:, 1, 1] = scale
    coef = np.where(r > 1e-12, slope - scale, 0.0)
    J += coef[:, None, None] * dhat[:, :, None] * dhat[:, None, :]
    _, dy, dx, _ = _res_interp(spec, res, flat)
    J[:, :, 0] += dy
    J[:, :, 1] += dx
    return J


def warp_inverse_np(
    spec: WarpSpec,
    theta: np.ndarray,
    res: np.ndarray,
    pts: np.ndarray,
    tol: float = 1e-13,
    max_iter: int = 60,
):
    """phi^{-1}(points) via exact radial inversion plus fixed-point residual."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)

    def radial_inv(q):
        dd = q - spec.center
        s = np.hypot(dd[:, 0], dd[:, 1])
        r = _rho_inverse(spec, theta, s)
        ratio = np.where(s > 1e-12, r / np.maximum(s, 1e-12), 1.0 / _slopes(spec, theta)[0])
        return spec.center + ratio[:, None] * dd

    u = radial_inv(flat)
    for _ in range(max_iter):
        rval, _, _, _ = _res_interp(spec, res, u)
        nxt = radial_inv(flat - rval)
        delta = np.abs(nxt - u).max()
        u = nxt
        if delta < tol:
            break
    return u.reshape(pts.shape)


def jacobian_det_positive(
    spec: WarpSpec, theta: np.ndarray, res: np.ndarray, step: float = 0.5
) -> bool:
    """Bijectivity probe: forward Jacobian determinant on a dense lattice grid."""
    V, U = spec.lattice_shape
    yy, xx = np.mgrid[0 : V - 1 + 1e-9 : step, 0 : U - 1 + 1e-9 : step]
    pts = np.stack([yy.ravel(), xx.ravel()], axis=-1)
    J = warp_jacobian_np(spec, theta, res, pts)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return bool(det.min() > 0.0)


# ---------------------------------------------------------------------------
# Tape primitives
# ---------------------------------------------------------------------------


def _theta_vjp(spec: WarpSpec, theta: np.ndarray, u_flat: np.ndarray, h: np.ndarray):
    """Accumulate sum_m h_m . d phi(u_m)/d theta, given per-point 2-vectors h."""
    d = u_flat - spec.center
    r = np.hypot(d[:, 0], d[:, 1])
    safe_r = np.maximum(r, 1e-12)
    dhat = d / safe_r[:, None]
    proj = np.sum(h * dhat, axis=1) * (r > 1e-12)
    lens = _dlen_dtheta(spec, r)
    sig = 1.0 / (1.0 + np.exp(-theta))
    return (proj @ lens) * sig


def warp_forward(spec: WarpSpec, theta: ad.Tensor, res: ad.Tensor, pts: ad.Tensor) -> ad.Tensor:
    tape = theta.tape
    out_d = warp_forward_np(spec, theta.data, res.data, pts.data)
    out = ad.Tensor(out_d, tape)
    flat = pts.data.reshape(-1, 2)

    def back(g):
        gf = g.reshape(-1, 2)
        g_theta = _theta_vjp(spec, theta.data, flat, gf)
        _, _, _, cell = _res_interp(spec, res.data, flat)
        g_res = _res_scatter(spec, cell, gf)
        g_pts = None
        if pts.requires_grad:
            J = warp_jacobian_np(spec, theta.data, res.data, flat)
            g_pts = np.einsum("mij,mi->mj", J, gf).reshape(pts.data.shape)
        return g_theta, g_res, g_pts

    tape.record(out, (theta, res, pts), back)
    return out


def warp_inverse(spec: WarpSpec, theta: ad.Tensor, res: ad.Tensor, pts: ad.Tensor) -> ad.Tensor:
    tape = theta.tape
    u_d = warp_inverse_np(spec, theta.data, res.data, pts.data)
    out = ad.Tensor(u_d, tape)
    u_flat = u_d.reshape(-1, 2)

    def back(g):
        gf = g.reshape(-1, 2)
        J = warp_jacobian_np(spec, theta.data, res.data, u_flat)
        # h = J^{-T} g, per point
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        inv_t = np.empty_like(J)
        inv_t[:, 0, 0] = J[:, 1, 1]
        inv_t[:, 1, 1] = J[:, 0, 0]
        inv_t[:, 0, 1] = -J[:, 0, 1]
        inv_t[:, 1, 0] = -J[:, 1, 0]
        h = np.einsum("mji,mj->mi", inv_t / det[:, None, None], gf)
        g_theta = -_theta_vjp(spec, theta.data, u_flat, h)
        _, _, _, cell = _res_interp(spec, res.data, u_flat)
        g_res = -_res_scatter(spec, cell, h)
        g_pts = h.reshape(pts.data.shape) if pts.requires_grad else None
        return g_theta, g_res, g_pts

    tape.record(out, (theta, res, pts), back)
    return out
