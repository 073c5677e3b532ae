"""Retina encoder: scene stimulus in, optic nerve image out.

The encoder owns three invariants that stay fixed for one eye: cone positions
(a foveated, jittered lattice), cone spectral types, and the center-surround
inhibition kernel. Encoding is spectral sampling at each cone position under
the current gaze, photon-noise corruption, difference-of-Gaussians lateral
inhibition on the cone lattice, and optionally on/off rectification with
leaky integrate-and-fire spiking.

Positions are stored as (row, col) scene coordinates. All stochastic steps
take an explicit generator or seed, so encoding is a pure function of its
arguments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve as nd_convolve

from chromacortex.spectral import BandGrid, DEFAULT_GRID, SpectralImage, Spectrum


class RetinaError(Exception):
    pass


class MosaicError(RetinaError):
    pass


class OutOfFieldError(RetinaError):
    pass


# ---------------------------------------------------------------------------
# Spectral response templates
# ---------------------------------------------------------------------------

TEMPLATE_LOG_BANDWIDTH = 0.07  # log-wavelength sigma; high L/M overlap, separated S


def spectral_response(
    peak_nm: float, grid: BandGrid = DEFAULT_GRID, bandwidth: float = TEMPLATE_LOG_BANDWIDTH
) -> Spectrum:
    """Log-Gaussian sensitivity template, unit peak at the band nearest peak_nm."""
    if not (380.0 <= peak_nm <= 720.0):
        raise RetinaError(f"template peak {peak_nm} nm outside [380, 720]")
    lam = grid.centers
    curve = np.exp(-0.5 * (np.log(lam / peak_nm) / bandwidth) ** 2)
    nearest = int(np.argmin(np.abs(lam - peak_nm)))
    return Spectrum(curve / curve[nearest], grid)


# ---------------------------------------------------------------------------
# Cone mosaic
# ---------------------------------------------------------------------------

LMS_PEAKS = (560.0, 530.0, 419.0)
LMS_PROBS = (0.63, 0.32, 0.05)


@dataclass(frozen=True)
class MosaicConfig:
    grid_size: int = 64
    scene_size: int = 96
    type_probabilities: tuple = LMS_PROBS
    spectral_peaks: tuple = LMS_PEAKS
    density_gain: float = 0.35  # cubic growth of radius mapping; 0 = uniform density
    jitter_amplitude: float = 0.25  # fraction of local spacing
    margin: float = 6.0
    seed: int = 0
    template_bandwidth: float = TEMPLATE_LOG_BANDWIDTH


@dataclass
class ConeMosaic:
    """Immutable retinal invariants for one eye."""

    config: MosaicConfig
    positions: np.ndarray  # (V, U, 2) scene (row, col)
    types: np.ndarray  # (V, U) uint8 class indices
    responses: np.ndarray  # (K, B) per-class templates
    cone_responses: np.ndarray  # (V, U, B); class template or therapy override
    kernel_sigma_center: float = 0.15
    kernel_sigma_surround: float = 0.9
    kernel_mean: float = 0.09
    grid: BandGrid = DEFAULT_GRID

    @property
    def shape(self) -> tuple[int, int]:
        return self.types.shape

    @property
    def n_classes(self) -> int:
        return self.responses.shape[0]

    @property
    def scene_size(self) -> int:
        return self.config.scene_size

    @property
    def max_gaze(self) -> int:
        lo = self.positions.min()
        hi = self.config.scene_size - 1 - self.positions.max()
        return int(np.floor(min(lo, hi) - 1.0))

    def radial_profile(self, r_lattice: np.ndarray) -> np.ndarray:
        """True lattice-radius to scene-radius map used at construction."""
        cfg = self.config
        n = cfg.grid_size
        r_corner = np.hypot((n - 1) / 2.0, (n - 1) / 2.0)
        r_max_scene = cfg.scene_size / 2.0 - cfg.margin
        s0 = r_max_scene / (r_corner * (1.0 + cfg.density_gain))
        return s0 * r_lattice * (1.0 + cfg.density_gain * (r_lattice / r_corner) ** 2)


def _value_noise(rng: np.random.Generator, shape: tuple[int, int], base_nodes: int, octaves: int):
    """Multi-octave smooth noise field in [-1, 1]-ish units, unit variance."""
    V, U = shape
    total = np.zeros((V, U, 2))
    amp_sq = 0.0
    for o in range(octaves):
        nodes = base_nodes * (2**o) + 1
        grid = rng.standard_normal((nodes, nodes, 2))
        gi = np.linspace(0, nodes - 1, V)
        gj = np.linspace(0, nodes - 1, U)
        i0 = np.clip(gi.astype(int), 0, nodes - 2)
        j0 = np.clip(gj.astype(int), 0, nodes - 2)
        fi = (gi - i0)[:, None, None]
        fj = (gj - j0)[None, :, None]
        up = (
            grid[i0][:, j0] * (1 - fi) * (1 - fj)
            + grid[i0][:, j0 + 1] * (1 - fi) * fj
            + grid[i0 + 1][:, j0] * fi * (1 - fj)
            + grid[i0 + 1][:, j0 + 1] * fi * fj
        )
        amp = 0.6**o
        total += amp * up
        amp_sq += amp * amp * 0.45  # bilinear smoothing shrinks node variance
    return total / np.sqrt(amp_sq)


def _retinotopy_ok(positions: np.ndarray) -> bool:
    """Each interior cone must sit inside the quadrilateral of the midpoints
    to its four lattice neighbors (local ordering is never scrambled)."""
    p = positions
    mid_l = 0.5 * (p[1:-1, 1:-1] + p[1:-1, :-2])
    mid_r = 0.5 * (p[1:-1, 1:-1] + p[1:-1, 2:])
    mid_u = 0.5 * (p[1:-1, 1:-1] + p[:-2, 1:-1])
    mid_d = 0.5 * (p[1:-1, 1:-1] + p[2:, 1:-1])
    quad = [mid_l, mid_u, mid_r, mid_d]
    c = p[1:-1, 1:-1]
    sign = None
    for a, b in zip(quad, quad[1:] + quad[:1]):
        e = b - a
        v = c - a
        cross = e[..., 0] * v[..., 1] - e[..., 1] * v[..., 0]
        if sign is None:
            sign = np.sign(cross)
        if np.any(cross * sign <= 0):
            return False
    return True


def build_mosaic(cfg: MosaicConfig, grid: BandGrid = DEFAULT_GRID) -> ConeMosaic:
    """Deterministic mosaic: density-warped lattice plus smooth bounded jitter."""
    if cfg.grid_size < 8:
        raise MosaicError(f"grid {cfg.grid_size} < 8")
    probs = np.asarray(cfg.type_probabilities, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise MosaicError(f"type probabilities sum to {probs.sum()}, not 1")
    if len(probs) != len(cfg.spectral_peaks):
        raise MosaicError("one probability per spectral peak required")

    n = cfg.grid_size
    rng = np.random.default_rng(cfg.seed)

    ii, jj = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2.0
    dv, du = ii - c, jj - c
    r = np.hypot(dv, du)
    r_corner = np.hypot(c, c)
    r_max_scene = cfg.scene_size / 2.0 - cfg.margin
    if r_max_scene <= 0:
        raise MosaicError("scene too small for the requested margin")
    s0 = r_max_scene / (r_corner * (1.0 + cfg.density_gain))
    rho = s0 * r * (1.0 + cfg.density_gain * (r / r_corner) ** 2)
    scale = np.where(r > 1e-12, rho / np.maximum(r, 1e-12), s0)
    center = (cfg.scene_size - 1) / 2.0
    positions = np.stack([center + scale * dv, center + scale * du], axis=-1)

    if cfg.jitter_amplitude > 0:
        local_spacing = s0 * (1.0 + 3.0 * cfg.density_gain * (r / r_corner) ** 2)
        noise = _value_noise(rng, (n, n), base_nodes=4, octaves=3)
        positions = positions + cfg.jitter_amplitude * local_spacing[..., None] * noise
    else:
        rng.standard_normal(2)  # keep the type draw aligned across jitter settings

    if not _retinotopy_ok(positions):
        raise MosaicError(
            f"jitter amplitude {cfg.jitter_amplitude} breaks retinotopy; not clipping"
        )
    if positions.min() < 1.0 or positions.max() > cfg.scene_size - 2.0:
        raise MosaicError("mosaic spills outside the scene margin")

    types = rng.choice(len(probs), size=(n, n), p=probs).astype(np.uint8)
    responses = np.stack(
        [spectral_response(p, grid, cfg.template_bandwidth).values for p in cfg.spectral_peaks]
    )
    cone_responses = responses[types]
    return ConeMosaic(
        config=cfg,
        positions=positions,
        types=types,
        responses=responses,
        cone_responses=cone_responses,
        grid=grid,
    )


# ---------------------------------------------------------------------------
# Fixational drift
# ---------------------------------------------------------------------------


@dataclass
class GazeState:
    offset: np.ndarray  # (2,) int (row, col) scene pixels
    rng: np.random.Generator

    @classmethod
    def fresh(cls, seed: int, offset=(0, 0)) -> "GazeState":
        return cls(np.asarray(offset, dtype=np.int64), np.random.default_rng(seed))


def drift_step(state: GazeState, bound: int, max_offset: int | None = None) -> GazeState:
    """Uniform integer step in [-bound, bound]^2, clamped to keep cones in-field."""
    if bound < 0:
        raise RetinaError("drift bound must be >= 0")
    step = state.rng.integers(-bound, bound + 1, size=2)
    new = state.offset + step
    if max_offset is not None:
        new = np.clip(new, -max_offset, max_offset)
    return GazeState(new, state.rng)


# ---------------------------------------------------------------------------
# Spectral sampling and noise
# ---------------------------------------------------------------------------


def sample_scene_bilinear(scene: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample (S, S, B) scene at float (row, col) points (..., 2)."""
    S = scene.shape[0]
    rr = points[..., 0]
    cc = points[..., 1]
    if rr.min() < 0 or cc.min() < 0 or rr.max() > S - 1 or cc.max() > S - 1:
        raise OutOfFieldError("sample point outside the scene")
    i0 = np.clip(np.floor(rr).astype(np.int64), 0, S - 2)
    j0 = np.clip(np.floor(cc).astype(np.int64), 0, S - 2)
    fi = (rr - i0)[..., None]
    fj = (cc - j0)[..., None]
    flat = scene.reshape(-1, scene.shape[-1])
    base = i0 * S + j0
    return (
        flat[base] * (1 - fi) * (1 - fj)
        + flat[base + 1] * (1 - fi) * fj
        + flat[base + S] * fi * (1 - fj)
        + flat[base + S + 1] * fi * fj
    )


def cone_activations(
    mosaic: ConeMosaic,
    scene: SpectralImage,
    gaze_offset=(0, 0),
    snr: float | None = 100.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-cone photocurrent: spectrum at the gazed position dotted with the
    cone's response template, times band spacing, with multiplicative shot
    noise of relative sigma 1/snr. snr=None disables noise."""
    pts = mosaic.positions + np.asarray(gaze_offset, dtype=np.float64)
    spectra = sample_scene_bilinear(scene.data, pts)
    act = np.einsum("vub,vub->vu", spectra, mosaic.cone_responses) * mosaic.grid.spacing
    if snr is not None:
        if rng is None:
            raise RetinaError("noise requested without a generator")
        act = act * (1.0 + rng.standard_normal(act.shape) / snr)
    return act


# ---------------------------------------------------------------------------
# Lateral inhibition
# ---------------------------------------------------------------------------


def _gaussian2d(sigma: float, support: int) -> np.ndarray:
    half = support // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g1, g1)
    return k / k.sum()


def dog_kernel(
    sigma_center: float = 0.15,
    sigma_surround: float = 0.9,
    mean: float = 0.09,
    support: int | None = None,
) -> np.ndarray:
    """Difference of unit-mass Gaussians; surround weight chosen so the kernel
    sums to `mean` exactly."""
    if sigma_center >= sigma_surround:
        raise RetinaError(f"center sigma {sigma_center} must be < surround {sigma_surround}")
    min_support = 2 * int(np.ceil(3 * sigma_surround)) + 1
    if support is None:
        support = min_support
    if support % 2 == 0 or support < min_support:
        raise RetinaError(f"support {support} must be odd and >= {min_support}")
    center = _gaussian2d(sigma_center, support)
    surround = _gaussian2d(sigma_surround, support)
    return center - (1.0 - mean) * surround


def lateral_inhibition(frame: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D convolution on the cone lattice with reflective boundary."""
    return nd_convolve(frame, kernel, mode="mirror")


def split_on_off(frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(frame, 0.0), np.maximum(-frame, 0.0)


# ---------------------------------------------------------------------------
# Spiking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LifParams:
    tau_m: float = 10.0  # substeps
    v_thresh: float = 1.0
    v_reset: float = 0.0
    dt: float = 1.0
    input_gain: float = 0.7  # drive is pre-normalized; this sets the rate range
    noise_sigma: float = 0.0


def lif_spikes(
    rates: np.ndarray, T: int, params: LifParams = LifParams(), seed: int = 0
) -> np.ndarray:
    """Spike counts over T substeps of a leaky integrate-and-fire lattice."""
    if T < 1:
        raise RetinaError("T must be >= 1")
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise RetinaError("rates must be finite and non-negative")
    rng = np.random.default_rng(seed)
    drive = params.input_gain * rates
    v = np.zeros_like(rates)
    counts = np.zeros(rates.shape, dtype=np.int64)
    for _ in range(T):
        inp = drive
        if params.noise_sigma > 0:
            inp = drive + params.noise_sigma * rng.standard_normal(rates.shape)
        v = v + (-v / params.tau_m + inp) * params.dt
        fired = v >= params.v_thresh
        counts += fired
        v = np.where(fired, params.v_reset, v)
    return counts


@dataclass
class SpikeFrame:
    """On/off spike counts over a window of T substeps."""

    on: np.ndarray
    off: np.ndarray
    T: int


@lru_cache(maxsize=8)
def calibrate_rate_gain(params: LifParams, T: int) -> float:
    """Least-squares gain mapping (on-off)/T spike rates back to normalized
    drive units, fitted on a held-out random frame."""
    rng = np.random.default_rng(123321)
    x = rng.uniform(-1.2, 1.2, size=(41, 41))
    x /= np.quantile(np.abs(x), 0.95)
    on, off = split_on_off(x)
    c = (
        lif_spikes(on, T, params, seed=1).astype(np.float64)
        - lif_spikes(off, T, params, seed=2)
    ) / T
    denom = float(np.dot(c.ravel(), c.ravel()))
    if denom == 0.0:
        raise RetinaError("calibration frame produced no spikes")
    return float(np.dot(x.ravel(), c.ravel()) / denom)


# ---------------------------------------------------------------------------
# Full encode
# ---------------------------------------------------------------------------


@dataclass
class RetinaEngine:
    """Bundles one eye's invariants with its noise and spiking settings.

    The engine's spiking path enables membrane noise by default: it dithers
    the deterministic firing-period staircase so the time-averaged rate tracks
    the drive nearly linearly. Runs stay reproducible through the spike seed.
    """

    mosaic: ConeMosaic
    snr: float | None = 100.0
    lif: LifParams = field(default_factory=lambda: LifParams(noise_sigma=0.2))
    kernel: np.ndarray = None

    def __post_init__(self):
        if self.kernel is None:
            self.kernel = dog_kernel(
                self.mosaic.kernel_sigma_center,
                self.mosaic.kernel_sigma_surround,
                self.mosaic.kernel_mean,
            )

    def activations(self, scene, gaze_offset=(0, 0), rng=None):
        return cone_activations(self.mosaic, scene, gaze_offset, self.snr, rng)

    def bipolar(self, scene, gaze_offset=(0, 0), rng=None):
        return lateral_inhibition(self.activations(scene, gaze_offset, rng), self.kernel)

    def spike_frame(self, scene, gaze_offset=(0, 0), T: int = 1024, rng=None,
                    spike_seed: int = 0, ref: float | None = None) -> SpikeFrame:
        """On/off LIF spike counts for one normalized drive frame."""
        drive = self.bipolar(scene, gaze_offset, rng)
        if ref is None:
            ref = float(np.quantile(np.abs(drive), 0.95))
        on, off = split_on_off(drive / max(ref, 1e-12))
        return SpikeFrame(
            on=lif_spikes(on, T, self.lif, seed=spike_seed),
            off=lif_spikes(off, T, self.lif, seed=spike_seed + 1),
            T=T,
        )

    def encode(self, scene, gaze_offset=(0, 0), mode: str = "averaged", T: int = 1024,
               rng=None, spike_seed: int = 0):
        """`averaged` returns the bipolar drive, the deterministic fixed point
        of spiking plus time averaging. `spiking` normalizes the drive to its
        95th-percentile magnitude, runs on/off LIF trains, and rescales
        (on-off)/T by the calibrated rate gain and the normalization."""
        drive = self.bipolar(scene, gaze_offset, rng)
        if mode == "averaged":
            return drive
        if mode != "spiking":
            raise RetinaError(f"unknown encode mode {mode!r}")
        ref = float(np.quantile(np.abs(drive), 0.95))
        if ref <= 0.0:
            return np.zeros_like(drive)
        on, off = split_on_off(drive / ref)
        counts_on = lif_spikes(on, T, self.lif, seed=spike_seed)
        counts_off = lif_spikes(off, T, self.lif, seed=spike_seed + 1)
        gain = calibrate_rate_gain(self.lif, T)
        return ref * gain * (counts_on - counts_off).astype(np.float64) / T


# ---------------------------------------------------------------------------
# MOSA1 serialization
# ---------------------------------------------------------------------------

_MOSA_MAGIC = b"MOSA1\x00"


def save_mosaic(mosaic: ConeMosaic, path: str | Path) -> None:
    cfg = mosaic.config
    V, U = mosaic.shape
    K = mosaic.n_classes
    with open(path, "wb") as fh:
        fh.write(_MOSA_MAGIC)
        fh.write(struct.pack("<IIII", U, V, K, cfg.scene_size))
        fh.write(struct.pack(f"<{K}f", *cfg.spectral_peaks))
        fh.write(struct.pack(f"<{K}f", *cfg.type_probabilities))
        fh.write(
            struct.pack(
                "<ffff fI",
                mosaic.kernel_sigma_center,
                mosaic.kernel_sigma_surround,
                mosaic.kernel_mean,
                cfg.density_gain,
                cfg.jitter_amplitude,
                cfg.seed,
            )
        )
        fh.write(np.ascontiguousarray(mosaic.positions, dtype="<f4").tobytes())
        fh.write(mosaic.types.astype(np.uint8).tobytes())
        custom = not np.array_equal(mosaic.cone_responses, mosaic.responses[mosaic.types])
        fh.write(struct.pack("<BI", int(custom), mosaic.grid.bands))
        if custom:
            fh.write(np.ascontiguousarray(mosaic.cone_responses, dtype="<f4").tobytes())


def load_mosaic(path: str | Path, grid: BandGrid = DEFAULT_GRID) -> ConeMosaic:
    raw = Path(path).read_bytes()
    if raw[: len(_MOSA_MAGIC)] != _MOSA_MAGIC:
        raise MosaicError(f"{path}: bad magic")
    off = len(_MOSA_MAGIC)
    U, V, K, scene_size = struct.unpack_from("<IIII", raw, off)
    off += 16
    peaks = struct.unpack_from(f"<{K}f", raw, off)
    off += 4 * K
    probs = struct.unpack_from(f"<{K}f", raw, off)
    off += 4 * K
    sc, ss, mean, dgain, jitter, seed = struct.unpack_from("<ffff fI", raw, off)
    off += 24
    pos = np.frombuffer(raw, dtype="<f4", count=V * U * 2, offset=off).astype(np.float64)
    off += V * U * 2 * 4
    types = np.frombuffer(raw, dtype=np.uint8, count=V * U, offset=off).copy()
    off += V * U
    custom, bands = struct.unpack_from("<BI", raw, off)
    off += 5
    if bands != grid.bands:
        raise MosaicError(f"{path}: stored for {bands} bands, run grid has {grid.bands}")
    psum = sum(probs)
    cfg = MosaicConfig(
        grid_size=U,
        scene_size=scene_size,
        type_probabilities=tuple(float(p) / psum for p in probs),
        spectral_peaks=tuple(float(p) for p in peaks),
        density_gain=float(dgain),
        jitter_amplitude=float(jitter),
        seed=int(seed),
    )
    responses = np.stack([spectral_response(p, grid).values for p in cfg.spectral_peaks])
    types = types.reshape(V, U)
    if custom:
        cone_resp = (
            np.frombuffer(raw, dtype="<f4", count=V * U * bands, offset=off)
            .astype(np.float64)
            .reshape(V, U, bands)
        )
    else:
        cone_resp = responses[types]
    return ConeMosaic(
        config=cfg,
        positions=pos.reshape(V, U, 2),
        types=types,
        responses=responses,
        cone_responses=cone_resp,
        kernel_sigma_center=float(sc),
        kernel_sigma_surround=float(ss),
        kernel_mean=float(mean),
        grid=grid,
    )
