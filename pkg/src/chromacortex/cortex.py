"""Self-supervised cortical model: decode, translate, re-encode.

The model owns five parameter buckets, each holding its inferred guess of one
retinal invariant or helper function:

  C      per-pixel unit N-vectors: believed spectral identity of each input line
  W      complex Fourier image of the believed lateral-inhibition kernel
  P      invertible spatial warp (radial profile + bounded residual field)
  D      weights of a small convolutional color interpolator
  M      motion head extras (the learnable part of motion estimation is P;
         M keeps a bias correction, with the low-pass filter fixed)

Decoding runs W-inversion in the Fourier domain, lifts scalars to N-vectors
through C, interpolates color with D, and unwarps through P. Re-encoding is
the reverse. Prediction translates the percept by the estimated eye motion
between two optic nerve frames and is trained to match the later frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from chromacortex import autodiff as ad
from chromacortex import warp as wp
from chromacortex.warp import InvalidWarpError, WarpSpec


class CortexError(Exception):
    pass


LN2 = math.log(2.0)


@dataclass(frozen=True)
class CortexConfig:
    lattice_shape: tuple[int, int] = (48, 48)
    n_channels: int = 8  # percept dimensionality; must exceed the cone-type count
    demosaic_layers: int = 3
    demosaic_kernel: int = 5
    demosaic_identity: bool = False  # ablation: color interpolator bypassed
    n_knots: int = 16
    res_nodes: int = 6
    res_bound: float = 0.75
    min_slope: float = 0.25
    eps_w_frac: float = 1e-3
    lowpass_sigma: float = 1.0  # fixed half-band blur used by the motion head
    motion_temperature: float = 0.01
    motion_conf_floor: float = 0.10
    init_seed: int = 0

    @property
    def warp_spec(self) -> WarpSpec:
        return WarpSpec(
            lattice_shape=self.lattice_shape,
            n_knots=self.n_knots,
            res_nodes=self.res_nodes,
            res_bound=self.res_bound,
            min_slope=self.min_slope,
        )


def _gauss_kernel_2d(sigma: float) -> np.ndarray:
    half = int(np.ceil(3 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _hermitian_project(w: np.ndarray) -> np.ndarray:
    flipped = np.conj(w[::-1, ::-1])
    flipped = np.roll(np.roll(flipped, 1, axis=0), 1, axis=1)  # index negation mod n
    return 0.5 * (w + flipped)


class CorticalModel:
    """Parameter buckets plus the constraint projections applied after updates."""

    def __init__(self, cfg: CortexConfig):
        self.cfg = cfg
        V, U = cfg.lattice_shape
        N = cfg.n_channels
        rng = np.random.default_rng(cfg.init_seed)
        spec = cfg.warp_spec

        c = rng.standard_normal((V, U, N))
        c /= np.linalg.norm(c, axis=-1, keepdims=True)
        self.params: dict[str, np.ndarray] = {
            "C": c,
            "W_re": np.ones((V, U)),
            "W_im": np.zeros((V, U)),
            "P_theta": spec.identity_theta(),
            "P_res": spec.zero_residual(),
            "M_bias": np.zeros(2),
        }
        kk = cfg.demosaic_kernel
        mid = kk // 2
        for layer in range(cfg.demosaic_layers):
            k = 0.03 * rng.standard_normal((kk, kk, N, N))
            gain = 1.0 if layer == cfg.demosaic_layers - 1 else 2.0
            k[mid, mid] += gain * np.eye(N)
            self.params[f"D_k{layer}"] = k
            self.params[f"D_b{layer}"] = np.zeros(N)

        self.eps_w = cfg.eps_w_frac  # refreshed between steps, constant on a tape
        self._lowpass = _gauss_kernel_2d(cfg.lowpass_sigma)[:, :, None, None]
        yy, xx = np.mgrid[0:V, 0:U].astype(np.float64)
        self._lattice_grid = np.stack([yy, xx], axis=-1)
        self.refresh_eps()
        self.project_constraints()

    # -- parameter bookkeeping -------------------------------------------------

    @property
    def spec(self) -> WarpSpec:
        return self.cfg.warp_spec

    def leaves(self, tape: ad.Tape) -> dict[str, ad.Tensor]:
        return {k: tape.var(v) for k, v in self.params.items()}

    def grads_of(self, leaves: dict[str, ad.Tensor]) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in leaves.items() if t.grad is not None}

    def refresh_eps(self):
        mag = np.hypot(self.params["W_re"], self.params["W_im"]).max()
        self.eps_w = self.cfg.eps_w_frac * max(mag, 1e-12)

    def project_constraints(self):
        """Applied after every optimizer step: C back to unit norm, W back to a
        Hermitian spectrum with its DC term bounded away from zero, residual
        displacements clipped to the bijectivity budget."""
        c = self.params["C"]
        norms = np.linalg.norm(c, axis=-1, keepdims=True)
        np.divide(c, np.maximum(norms, 1e-12), out=c)

        w = _hermitian_project(self.params["W_re"] + 1j * self.params["W_im"])
        if w[0, 0].real < self.eps_w:
            w[0, 0] = self.eps_w
        self.params["W_re"][:] = w.real
        self.params["W_im"][:] = w.imag

        np.clip(
            self.params["P_res"],
            -self.cfg.res_bound,
            self.cfg.res_bound,
            out=self.params["P_res"],
        )

    def check_warp_valid(self):
        if not wp.jacobian_det_positive(self.spec, self.params["P_theta"], self.params["P_res"]):
            raise InvalidWarpError("warp parameters no longer define a bijection")

    def clone(self) -> "CorticalModel":
        other = CorticalModel(self.cfg)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.refresh_eps()
        return other


@dataclass
class Percept:
    """Grid of N-vectors, tagged with the frame that produced it."""

    values: np.ndarray  # (B, H, W, N)
    frame: str  # "warped" or "euclidean"
    oversample: int = 1


# ---------------------------------------------------------------------------
# W stage: lateral-inhibition inversion / re-application in the Fourier domain
# ---------------------------------------------------------------------------


def phi_w(model: CorticalModel, leaves, O: ad.Tensor) -> ad.Tensor:
    """Believed cone activations from an optic nerve image (regularized inverse)."""
    ore, oim = ad.fft2(O)
    are, aim = ad.cdiv_reg(ore, oim, leaves["W_re"], leaves["W_im"], model.eps_w)
    return ad.ifft2_real(are, aim)


def psi_w(model: CorticalModel, leaves, A: ad.Tensor) -> ad.Tensor:
    """Re-apply the believed lateral inhibition (multiplication by W)."""
    are, aim = ad.fft2(A)
    wre, wim = leaves["W_re"], leaves["W_im"]
    ore = ad.sub(ad.mul(are, wre), ad.mul(aim, wim))
    oim = ad.add(ad.mul(are, wim), ad.mul(aim, wre))
    return ad.ifft2_real(ore, oim)


# ---------------------------------------------------------------------------
# C / D stage: scalar <-> N-vector color
# ---------------------------------------------------------------------------


def demosaic(model: CorticalModel, leaves, x: ad.Tensor) -> ad.Tensor:
    if model.cfg.demosaic_identity:
        return x
    n_layers = model.cfg.demosaic_layers
    for layer in range(n_layers):
        x = ad.conv2d(x, leaves[f"D_k{layer}"], pad="reflect")
        x = ad.add(x, leaves[f"D_b{layer}"])
        if layer < n_layers - 1:
            x = ad.add(ad.softplus(x), x.tape.const(-LN2))  # zero-centered softplus
    return x


def phi_c(model: CorticalModel, leaves, A: ad.Tensor) -> ad.Tensor:
    """Lift scalar activations along the believed spectral identities, then
    interpolate color spatially."""
    B, V, U = A.shape
    lifted = ad.mul(ad.reshape(A, (B, V, U, 1)), leaves["C"])
    return demosaic(model, leaves, lifted)


def psi_c(model: CorticalModel, leaves, Vt: ad.Tensor) -> ad.Tensor:
    """Project N-vector percepts back to per-line scalars (dot with C)."""
    return ad.dot_lastaxis(Vt, leaves["C"])


# ---------------------------------------------------------------------------
# P stage: unwarp / rewarp
# ---------------------------------------------------------------------------


def phi_p(model: CorticalModel, leaves, Vt: ad.Tensor, oversample: int = 1) -> ad.Tensor:
    """Materialize the Euclidean percept on a regular grid over the lattice box."""
    model.check_warp_valid()
    V, U = model.cfg.lattice_shape
    q = oversample
    yy, xx = np.mgrid[0 : V - 1 : (q * (V - 1) + 1) * 1j, 0 : U - 1 : (q * (U - 1) + 1) * 1j]
    grid = np.stack([yy, xx], axis=-1)
    coords = wp.warp_inverse(model.spec, leaves["P_theta"], leaves["P_res"], Vt.tape.const(grid))
    coords = ad.reshape(coords, (1,) + coords.shape)
    return ad.bilinear_warp(Vt, coords)


def psi_p(model: CorticalModel, leaves, Veu: ad.Tensor, oversample: int = 1) -> ad.Tensor:
    """Sample the Euclidean percept at the warped positions of the lattice."""
    pts = wp.warp_forward(
        model.spec, leaves["P_theta"], leaves["P_res"], Veu.tape.const(model._lattice_grid)
    )
    if oversample != 1:
        pts = ad.mul(pts, Veu.tape.const(float(oversample)))
    coords = ad.reshape(pts, (1,) + pts.shape)
    return ad.bilinear_warp(Veu, coords)


# ---------------------------------------------------------------------------
# Translation
# ---------------------------------------------------------------------------


def translate(percept: ad.Tensor, delta) -> ad.Tensor:
    """Shift a Euclidean-frame percept by (drow, dcol), reflected boundary."""
    tape = percept.tape
    B, H, W = percept.shape[0], percept.shape[1], percept.shape[2]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = tape.const(np.stack([yy, xx], axis=-1)[None])
    if not isinstance(delta, ad.Tensor):
        delta = tape.const(np.asarray(delta, dtype=np.float64))
    dshape = (B, 1, 1, 2) if delta.data.size == 2 * B else (1, 1, 1, 2)
    coords = ad.add(grid, ad.reshape(delta, dshape))
    return ad.bilinear_warp(percept, coords)


# ---------------------------------------------------------------------------
# Motion estimation
# ---------------------------------------------------------------------------


def _lowpass(model: CorticalModel, leaves, O: ad.Tensor) -> ad.Tensor:
    B, V, U = O.shape
    x = ad.reshape(O, (B, V, U, 1))
    return ad.conv2d(x, O.tape.const(model._lowpass), pad="reflect")


def _apod_window(V: int, U: int) -> np.ndarray:
    wy = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(V) / (V - 1))
    wx = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(U) / (U - 1))
    return np.sqrt(np.outer(wy, wx))


@dataclass
class MotionEstimate:
    delta: ad.Tensor  # (B, 2) float motion in percept-frame units
    confidence: np.ndarray  # (B,) peak correlation score


def estimate_motion(
    model: CorticalModel, leaves, O_t: ad.Tensor, O_dt: ad.Tensor, window: int
) -> MotionEstimate:
    """Soft-argmax of windowed normalized cross-correlation between the two
    dewarped, low-passed optic nerve images. Differentiable in W-free parts of
    the pipeline, so gradient reaches P through the dewarping."""
    tape = O_t.tape
    B, V, U = O_t.shape
    inv_grid = wp.warp_inverse(
        model.spec, leaves["P_theta"], leaves["P_res"], tape.const(model._lattice_grid)
    )
    coords = ad.reshape(inv_grid, (1, V, U, 2))
    apod = tape.const(_apod_window(V, U)[None, :, :, None])

    def dewarp(O):
        d = ad.bilinear_warp(_lowpass(model, leaves, O), coords)
        return ad.mul(d, apod)

    a = ad.reshape(dewarp(O_t), (B, V, U))
    b = ad.reshape(dewarp(O_dt), (B, V, U))
    # circular cross-correlation via the Fourier domain, all shifts at once
    ar, ai = ad.fft2(a)
    br, bi = ad.fft2(b)
    xr = ad.add(ad.mul(ar, br), ad.mul(ai, bi))  # a * conj(b)
    xi = ad.sub(ad.mul(ai, br), ad.mul(ar, bi))
    xc = ad.ifft2_real(xr, xi)

    na = ad.powc(sum_spatial(ad.mul(a, a)), 0.5)
    nb = ad.powc(sum_spatial(ad.mul(b, b)), 0.5)
    denom = ad.add(ad.mul(na, nb), tape.const(1e-12))
    inv_denom = ad.powc(denom, -1.0)

    # xc[k] = sum_n a[n + k] b[n], which peaks at the content shift; gather the
    # +-window block around zero offset with an exact integer-coordinate warp
    offs = np.arange(-window, window + 1)
    gy, gx = np.meshgrid(np.mod(offs, V), np.mod(offs, U), indexing="ij")
    gather = tape.const(np.stack([gy, gx], axis=-1)[None].astype(np.float64))
    w1 = 2 * window + 1
    scores = ad.reshape(
        ad.bilinear_warp(ad.reshape(xc, (B, V, U, 1)), gather), (B, w1, w1)
    )
    scores = ad.mul(scores, ad.reshape(inv_denom, (B, 1, 1)))

    flat = ad.reshape(scores, (B, w1 * w1))
    peak = flat.data.max(axis=1)
    shifted = ad.sub(flat, tape.const(peak[:, None]))  # detached max; softmax-safe
    e = ad.exp(ad.mul(shifted, tape.const(1.0 / model.cfg.motion_temperature)))
    wsum = ad.powc(sum_axis_keep(e), -1.0)
    w = ad.mul(e, wsum)
    oy, ox = np.meshgrid(offs.astype(np.float64), offs.astype(np.float64), indexing="ij")
    dy = ad.sum_axis(ad.mul(w, tape.const(oy.ravel()[None, :])), 1)
    dx = ad.sum_axis(ad.mul(w, tape.const(ox.ravel()[None, :])), 1)
    delta = ad.add(ad.stack([dy, dx], axis=1), ad.reshape(leaves["M_bias"], (1, 2)))
    return MotionEstimate(delta=delta, confidence=peak)


def sum_spatial(t: ad.Tensor) -> ad.Tensor:
    """(B, H, W) -> (B,)"""
    return ad.sum_axis(ad.sum_axis(t, 2), 1)


def sum_axis_keep(t: ad.Tensor) -> ad.Tensor:
    """(B, M) -> (B, 1) sum with kept axis."""
    return ad.reshape(ad.sum_axis(t, 1), (t.shape[0], 1))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def decode(model: CorticalModel, leaves, O: ad.Tensor) -> ad.Tensor:
    """Warped-frame percept from an optic nerve image."""
    return phi_c(model, leaves, phi_w(model, leaves, O))


def reencode(model: CorticalModel, leaves, Vt: ad.Tensor) -> ad.Tensor:
    return psi_w(model, leaves, psi_c(model, leaves, Vt))


def flow_grid(model: CorticalModel, leaves, delta: ad.Tensor, batch: int) -> ad.Tensor:
    """Composed warped-frame flow: inverse(forward(lattice) + delta)."""
    tape = delta.tape
    fwd = wp.warp_forward(
        model.spec, leaves["P_theta"], leaves["P_res"], tape.const(model._lattice_grid)
    )
    fwd = ad.reshape(fwd, (1,) + fwd.shape)
    dshape = (batch, 1, 1, 2) if delta.data.size == 2 * batch else (1, 1, 1, 2)
    shifted = ad.add(fwd, ad.reshape(delta, dshape))
    if shifted.shape[0] != batch:
        shifted = ad.add(shifted, tape.const(np.zeros((batch, 1, 1, 2))))
    return wp.warp_inverse(model.spec, leaves["P_theta"], leaves["P_res"], shifted)


def predict(
    model: CorticalModel,
    leaves,
    O_t: ad.Tensor,
    delta: ad.Tensor,
    mode: str = "efficient",
) -> ad.Tensor:
    """Predicted next optic nerve image.

    `naive` runs the three percept-space stages with lazily composed
    coordinates (unwarp, translate, rewarp as separate evaluations); the
    `efficient` mode builds one fused flow grid in the warped frame. Both
    compute the same map and must agree to round-off.
    """
    B = O_t.shape[0]
    Vt = decode(model, leaves, O_t)
    if mode == "efficient":
        grid = flow_grid(model, leaves, delta, B)
        Vt_next = ad.bilinear_warp(Vt, grid)
    elif mode == "naive":
        tape = O_t.tape
        lattice = tape.const(model._lattice_grid)
        rewarp_pts = wp.warp_forward(model.spec, leaves["P_theta"], leaves["P_res"], lattice)
        rewarp_pts = ad.reshape(rewarp_pts, (1,) + rewarp_pts.shape)
        dshape = (B, 1, 1, 2) if delta.data.size == 2 * B else (1, 1, 1, 2)
        translated = ad.add(rewarp_pts, ad.reshape(delta, dshape))  # percept translation
        if translated.shape[0] != B:
            translated = ad.add(translated, tape.const(np.zeros((B, 1, 1, 2))))
        unwarp_pts = wp.warp_inverse(model.spec, leaves["P_theta"], leaves["P_res"], translated)
        Vt_next = ad.bilinear_warp(Vt, unwarp_pts)
    else:
        raise CortexError(f"unknown prediction mode {mode!r}")
    return reencode(model, leaves, Vt_next)


def prediction_loss(
    model: CorticalModel,
    leaves,
    O_t: ad.Tensor,
    O_dt: ad.Tensor,
    delta: ad.Tensor,
    weights: np.ndarray | None = None,
    mode: str = "efficient",
) -> ad.Tensor:
    """Mean squared prediction error, optionally weighting batch items."""
    O_hat = predict(model, leaves, O_t, delta, mode=mode)
    if weights is None:
        return ad.mse(O_hat, O_dt)
    tape = O_t.tape
    w = np.asarray(weights, dtype=np.float64)
    per_item = w[:, None, None] / (max(w.sum(), 1e-12) * O_t.data[0].size)
    diff = ad.sub(O_hat, O_dt)
    return ad.tsum(ad.mul(ad.mul(diff, diff), tape.const(per_item)))


def motion_loss(
    model: CorticalModel,
    leaves,
    O_t: ad.Tensor,
    O_dt: ad.Tensor,
    delta: ad.Tensor,
    weights: np.ndarray | None = None,
) -> ad.Tensor:
    """Low-passed prediction objective that couples motion and positions."""
    B = O_t.shape[0]
    V, U = model.cfg.lattice_shape
    lp_t = ad.reshape(_lowpass(model, leaves, O_t), (B, V, U))
    lp_dt = ad.reshape(_lowpass(model, leaves, O_dt), (B, V, U))
    grid = flow_grid(model, leaves, delta, B)
    pred = ad.bilinear_warp(ad.reshape(lp_t, (B, V, U, 1)), grid)
    pred = ad.reshape(pred, (B, V, U))
    if weights is None:
        return ad.mse(pred, lp_dt)
    tape = O_t.tape
    w = np.asarray(weights, dtype=np.float64)
    per_item = w[:, None, None] / (max(w.sum(), 1e-12) * lp_t.data[0].size)
    diff = ad.sub(pred, lp_dt)
    return ad.tsum(ad.mul(ad.mul(diff, diff), tape.const(per_item)))


# ---------------------------------------------------------------------------
# Time averaging of spike streams
# ---------------------------------------------------------------------------


def time_average(frames, gain: float) -> np.ndarray:
    """Recombine on/off spike counts and average over the window."""
    frames = list(frames)
    if not frames:
        raise CortexError("empty spike stream")
    acc = np.zeros_like(frames[0].on, dtype=np.float64)
    for f in frames:
        acc += (f.on - f.off) / f.T
    return gain * acc / len(frames)


# ---------------------------------------------------------------------------
# Alignment with the generating retina (evaluation only)
# ---------------------------------------------------------------------------


def inferred_invariants_report(model: CorticalModel, mosaic, kernel: np.ndarray) -> dict:
    """How well the buckets recovered the ground-truth invariants.

    C: accuracy of the best linear map from learned vectors to one-hot types.
    P: RMS position error after the optimal similarity transform.
    W: cosine similarity between learned and true kernel magnitude spectra.
    """
    V, U = model.cfg.lattice_shape
    c = model.params["C"].reshape(-1, model.cfg.n_channels)
    types = mosaic.types.reshape(-1)
    K = mosaic.n_classes
    onehot = np.eye(K)[types]
    coef, *_ = np.linalg.lstsq(c, onehot, rcond=None)
    pred = np.argmax(c @ coef, axis=1)
    accuracy = float(np.mean(pred == types))

    spec = model.spec
    grid = model._lattice_grid.reshape(-1, 2)
    learned = wp.warp_forward_np(spec, model.params["P_theta"], model.params["P_res"], grid)
    true = mosaic.positions.reshape(-1, 2)
    x = learned - learned.mean(axis=0)
    y = true - true.mean(axis=0)
    cov = x.T @ y
    uu, ss, vvt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(uu @ vvt))
    rot = uu @ np.diag([1.0, d]) @ vvt
    scale = (ss[0] + d * ss[1]) / np.maximum((x * x).sum(), 1e-12)
    aligned = scale * (x @ rot)
    rms = float(np.sqrt(np.mean(np.sum((aligned - y) ** 2, axis=1))))

    w_learned = np.abs(model.params["W_re"] + 1j * model.params["W_im"]).ravel()
    kpad = np.zeros((V, U))
    kh, kw = kernel.shape
    kpad[:kh, :kw] = kernel
    kpad = np.roll(kpad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    w_true = np.abs(np.fft.fft2(kpad)).ravel()
    cos = float(
        np.dot(w_learned, w_true)
        / max(np.linalg.norm(w_learned) * np.linalg.norm(w_true), 1e-12)
    )
    return {
        "type_accuracy": accuracy,
        "position_rms": rms,
        "position_scale": float(scale),
        "kernel_cosine": cos,
    }


def oracle_init(model: CorticalModel, mosaic, kernel: np.ndarray):
    """Overwrite buckets with the generating retina's ground truth. The color
    interpolator has no analytic ground truth; callers combine this with the
    identity-interpolator configuration for single-type retinas."""
    V, U = model.cfg.lattice_shape
    N = model.cfg.n_channels
    K = mosaic.n_classes
    if K > N:
        raise CortexError("percept dimension below cone-type count")
    basis = np.eye(N)[:K]
    model.params["C"] = basis[mosaic.types].astype(np.float64)

    kpad = np.zeros((V, U))
    kh, kw = kernel.shape
    kpad[:kh, :kw] = kernel
    kpad = np.roll(kpad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    w = np.fft.fft2(kpad)
    model.params["W_re"] = w.real.copy()
    model.params["W_im"] = w.imag.copy()

    spec = model.spec
    knots = np.linspace(0, spec.r_corner, spec.n_knots + 1)
    prof = mosaic.radial_profile(knots)
    slopes = np.diff(prof) / spec.dr
    model.params["P_theta"] = spec.theta_for_slopes(slopes)
    model.params["P_res"] = spec.zero_residual()
    model.params["M_bias"] = np.zeros(2)
    model.refresh_eps()
    model.project_constraints()
