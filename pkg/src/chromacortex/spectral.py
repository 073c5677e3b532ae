"""Hyperspectral scene stimuli: loading, synthesis, projection and RGB rendering.

Every stimulus is a raster of per-pixel spectral power distributions sampled on
a single global band grid (default 31 bands, 400..700 nm at 10 nm spacing).
RGB test imagery is lifted to spectra through a simulated three-channel
projector, and spectra are rendered back to RGB through the bundled CIE 1931
2-degree observer followed by a fixed linear sRGB matrix (no gamma).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


class SpectralError(Exception):
    """Base class for stimulus format and construction errors."""


class MalformedHeaderError(SpectralError):
    pass


class TruncatedPayloadError(SpectralError):
    pass


class BandGridMismatchError(SpectralError):
    pass


class SceneRecipeError(SpectralError):
    pass


@dataclass(frozen=True)
class BandGrid:
    """Evenly spaced wavelength band centers shared by all spectra in a run."""

    lam_min: float = 400.0
    lam_max: float = 700.0
    bands: int = 31

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.lam_min, self.lam_max, self.bands)

    @property
    def spacing(self) -> float:
        return (self.lam_max - self.lam_min) / (self.bands - 1)

    def matches(self, other: "BandGrid") -> bool:
        return (
            self.bands == other.bands
            and abs(self.lam_min - other.lam_min) < 1e-6
            and abs(self.lam_max - other.lam_max) < 1e-6
        )


DEFAULT_GRID = BandGrid()


@dataclass(frozen=True)
class Spectrum:
    """Non-negative radiance samples, one per band."""

    values: np.ndarray
    grid: BandGrid = DEFAULT_GRID

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.shape != (self.grid.bands,):
            raise BandGridMismatchError(
                f"spectrum has {v.shape} values, grid has {self.grid.bands} bands"
            )
        if np.any(v < 0):
            raise SpectralError("negative radiance sample")


@dataclass
class SpectralImage:
    """Row-major raster of per-pixel spectra, stored as (height, width, bands)."""

    data: np.ndarray
    grid: BandGrid = DEFAULT_GRID

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != self.grid.bands:
            raise BandGridMismatchError(
                f"image shape {self.data.shape} does not match {self.grid.bands} bands"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def pixel(self, x: int, y: int) -> Spectrum:
        return Spectrum(self.data[y, x].copy(), self.grid)


@dataclass
class RgbImage:
    """Float RGB raster; values are only clamped to [0, 1] when emitted."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise SpectralError(f"rgb image must be (h, w, 3), got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def clamped_u8(self) -> np.ndarray:
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class ProjectorSpd:
    """Per-channel spectral power distributions of a simulated RGB projector."""

    red: Spectrum
    green: Spectrum
    blue: Spectrum
    canonical: bool = False  # default SPDs are plausible, not from measurement

    def __post_init__(self):
        for ch in (self.red, self.green, self.blue):
            if not ch.grid.matches(self.red.grid):
                raise BandGridMismatchError("projector channels on different grids")
            if not np.any(ch.values > 0):
                raise SpectralError("projector channel must be non-zero")

    @property
    def grid(self) -> BandGrid:
        return self.red.grid


def _gaussian_band(center: float, sigma: float, grid: BandGrid) -> Spectrum:
    lam = grid.centers
    return Spectrum(np.exp(-0.5 * ((lam - center) / sigma) ** 2), grid)


def default_projector(grid: BandGrid = DEFAULT_GRID) -> ProjectorSpd:
    """Plausible Gaussian-band projector SPDs (non-canonical defaults)."""
    return ProjectorSpd(
        red=_gaussian_band(610.0, 30.0, grid),
        green=_gaussian_band(540.0, 30.0, grid),
        blue=_gaussian_band(460.0, 30.0, grid),
        canonical=False,
    )


# ---------------------------------------------------------------------------
# SPEC1 binary format
#
# magic "SPEC1\0", little-endian u32 width, u32 height, u32 bands,
# f32 lam_min, f32 lam_max, then width*height*bands f32 samples in
# row-major, band-fastest order. Sample storage is f32.
# ---------------------------------------------------------------------------

_SPEC1_MAGIC = b"SPEC1\x00"
_SPEC1_HEADER = struct.Struct("<III ff")


def save_spectral_image(img: SpectralImage, path: str | Path) -> None:
    path = Path(path)
    payload = img.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_SPEC1_MAGIC)
        fh.write(
            _SPEC1_HEADER.pack(
                img.width, img.height, img.grid.bands, img.grid.lam_min, img.grid.lam_max
            )
        )
        fh.write(payload)


def load_spectral_image(path: str | Path, grid: BandGrid = DEFAULT_GRID) -> SpectralImage:
    """Read a SPEC1 file, rejecting band grids that differ from `grid`."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(_SPEC1_MAGIC) + _SPEC1_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than SPEC1 header")
    if raw[: len(_SPEC1_MAGIC)] != _SPEC1_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic")
    w, h, bands, lam_min, lam_max = _SPEC1_HEADER.unpack_from(raw, len(_SPEC1_MAGIC))
    if w == 0 or h == 0 or bands == 0:
        raise MalformedHeaderError(f"{path}: zero dimension in header")
    file_grid = BandGrid(float(lam_min), float(lam_max), int(bands))
    if not file_grid.matches(grid):
        raise BandGridMismatchError(
            f"{path}: file grid {bands}@[{lam_min},{lam_max}] != run grid "
            f"{grid.bands}@[{grid.lam_min},{grid.lam_max}]"
        )
    body = raw[len(_SPEC1_MAGIC) + _SPEC1_HEADER.size :]
    expected = w * h * bands * 4
    if len(body) < expected:
        raise TruncatedPayloadError(f"{path}: payload {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body[:expected], dtype="<f4").astype(np.float64)
    return SpectralImage(data.reshape(h, w, bands), grid)


# ---------------------------------------------------------------------------
# Scene synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRecipe:
    """Recipe for a synthetic patchwork scene.

    smoothness is in [0, 1]: 0 gives hard patch boundaries, 1 degenerates to a
    spatially constant image.
    """

    size: int = 96
    patch_count: int = 6
    smoothness: float = 0.35
    seed: int = 0


def _random_smooth_spectrum(rng: np.random.Generator, grid: BandGrid) -> np.ndarray:
    """Mixture of broad Gaussian bumps plus a floor; bounded second difference."""
    lam = grid.centers
    n_bumps = int(rng.integers(1, 4))
    s = np.full(grid.bands, 0.05 + 0.1 * rng.random())
    for _ in range(n_bumps):
        center = rng.uniform(grid.lam_min - 20.0, grid.lam_max + 20.0)
        sigma = rng.uniform(25.0, 80.0)
        amp = rng.uniform(0.2, 1.0)
        s = s + amp * np.exp(-0.5 * ((lam - center) / sigma) ** 2)
    return s / max(s.max(), 1e-12)


def synth_scene(recipe: SceneRecipe, grid: BandGrid = DEFAULT_GRID) -> SpectralImage:
    """Deterministic patchwork of smooth spectra; stand-in for captured scenes."""
    if recipe.size < 8:
        raise SceneRecipeError(f"size {recipe.size} < 8")
    if recipe.patch_count < 1:
        raise SceneRecipeError(f"patch count {recipe.patch_count} < 1")
    if not (0.0 <= recipe.smoothness <= 1.0):
        raise SceneRecipeError(f"smoothness {recipe.smoothness} outside [0, 1]")

    rng = np.random.default_rng(recipe.seed)
    n, k = recipe.size, recipe.patch_count
    spectra = np.stack([_random_smooth_spectrum(rng, grid) for _ in range(k)])
    seeds = rng.uniform(0, n, size=(k, 2))

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    d2 = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    masks = np.zeros((k, n, n))
    masks[np.argmin(d2, axis=0), yy.astype(int), xx.astype(int)] = 1.0

    if recipe.smoothness >= 1.0:
        weights = np.full((k, n, n), 1.0 / k)
    else:
        sigma = recipe.smoothness / (1.0 - recipe.smoothness) * (n / 8.0)
        if sigma > 0:
            masks = np.stack([gaussian_filter(m, sigma, mode="reflect") for m in masks])
        weights = masks / np.maximum(masks.sum(axis=0, keepdims=True), 1e-12)

    data = np.einsum("kij,kb->ijb", weights, spectra)
    return SpectralImage(np.maximum(data, 0.0), grid)


# ---------------------------------------------------------------------------
# Projection between RGB and spectra
# ---------------------------------------------------------------------------


def rgb_to_spectral(img: RgbImage, spd: ProjectorSpd) -> SpectralImage:
    """Per pixel: R*spd_R + G*spd_G + B*spd_B."""
    basis = np.stack([spd.red.values, spd.green.values, spd.blue.values])
    data = np.einsum("ijc,cb->ijb", img.data, basis)
    return SpectralImage(data, spd.grid)


@dataclass(frozen=True)
class CieTable:
    """Standard-observer color matching functions resampled to a band grid."""

    xyz: np.ndarray  # (bands, 3)
    grid: BandGrid
    version: str = "cie1931_2deg_10nm_v1"

    def __post_init__(self):
        if self.xyz.shape != (self.grid.bands, 3):
            raise BandGridMismatchError(
                f"CIE table shape {self.xyz.shape} does not fit grid with {self.grid.bands} bands"
            )


def load_cie_table(grid: BandGrid = DEFAULT_GRID) -> CieTable:
    """Load the bundled observer table and linearly resample it onto `grid`."""
    path = Path(__file__).parent / "data" / "cie1931_2deg_10nm_v1.csv"
    raw = np.loadtxt(path, delimiter=",", comments="#")
    lam = grid.centers
    xyz = np.stack([np.interp(lam, raw[:, 0], raw[:, j]) for j in (1, 2, 3)], axis=1)
    return CieTable(xyz, grid)


# Linear sRGB primaries, D65 white point; applied without gamma.
XYZ_TO_SRGB = np.array(
    [
        [3.2406, -1.5372, -0.4986],
        [-0.9689, 1.8758, 0.0415],
        [0.0557, -0.2040, 1.0570],
    ]
)


def spectral_to_xyz(img: SpectralImage, cmf: CieTable) -> np.ndarray:
    if not cmf.grid.matches(img.grid):
        raise BandGridMismatchError("CIE table grid does not match image grid")
    return np.einsum("ijb,bc->ijc", img.data, cmf.xyz) * img.grid.spacing


def spectral_to_rgb_cie(img: SpectralImage, cmf: CieTable) -> RgbImage:
    """CIEXYZ integration then the fixed linear sRGB matrix; clamp at emission only."""
    xyz = spectral_to_xyz(img, cmf)
    return RgbImage(xyz @ XYZ_TO_SRGB.T)


# ---------------------------------------------------------------------------
# Test lights
# ---------------------------------------------------------------------------


def monochromatic_spectrum(
    lam: float, intensity: float, grid: BandGrid = DEFAULT_GRID
) -> Spectrum:
    """Energy `intensity` split by linear interpolation over the bracketing bands."""
    if not (grid.lam_min <= lam <= grid.lam_max):
        raise SpectralError(f"wavelength {lam} nm outside [{grid.lam_min}, {grid.lam_max}]")
    if intensity <= 0:
        raise SpectralError("intensity must be positive")
    values = np.zeros(grid.bands)
    pos = (lam - grid.lam_min) / grid.spacing
    lo = int(np.floor(pos))
    hi = min(lo + 1, grid.bands - 1)
    frac = pos - lo
    values[lo] += intensity * (1.0 - frac)
    if hi != lo:
        values[hi] += intensity * frac
    return Spectrum(values, grid)


def uniform_patch(spectrum: Spectrum, width: int, height: int) -> SpectralImage:
    data = np.broadcast_to(spectrum.values, (height, width, spectrum.grid.bands)).copy()
    return SpectralImage(data, spectrum.grid)


def monochromatic_patch(
    lam: float, intensity: float, width: int, height: int, grid: BandGrid = DEFAULT_GRID
) -> SpectralImage:
    return uniform_patch(monochromatic_spectrum(lam, intensity, grid), width, height)


def weighted_spectrum(weights, primaries: list[Spectrum]) -> Spectrum:
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(primaries):
        raise SpectralError(f"{len(weights)} weights for {len(primaries)} primaries")
    if np.any(weights < 0):
        raise SpectralError("negative mixture weight")
    grid = primaries[0].grid if primaries else DEFAULT_GRID
    values = np.zeros(grid.bands)
    for w, p in zip(weights, primaries):
        if not p.grid.matches(grid):
            raise BandGridMismatchError("primaries on different grids")
        values += w * p.values
    return Spectrum(values, grid)


def weighted_patch(weights, primaries: list[Spectrum], width: int, height: int) -> SpectralImage:
    return uniform_patch(weighted_spectrum(weights, primaries), width, height)


# ---------------------------------------------------------------------------
# PPM emission
# ---------------------------------------------------------------------------


def save_ppm(img: RgbImage, path: str | Path) -> None:
    """Binary 8-bit P6; the only place RGB values are clamped."""
    u8 = img.clamped_u8()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode())
        fh.write(u8.tobytes())


def load_ppm(path: str | Path) -> RgbImage:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise SpectralError(f"{path}: not a binary PPM")
    w, h = (int(t) for t in parts[1].split())
    data = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).astype(np.float64) / 255.0
    return RgbImage(data.reshape(h, w, 3))
