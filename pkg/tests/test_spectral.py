import numpy as np
import pytest

from chromacortex import spectral as sp


GRID = sp.DEFAULT_GRID


def _rand_image(rng, h=2, w=2):
    data = rng.random((h, w, GRID.bands))
    # keep values exactly representable at file precision
    data = data.astype(np.float32).astype(np.float64)
    return sp.SpectralImage(data, GRID)


class TestSpec1Format:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        img = _rand_image(rng)
        path = tmp_path / "fixture.spec1"
        sp.save_spectral_image(img, path)
        back = sp.load_spectral_image(path)
        assert back.height == 2 and back.width == 2
        assert np.array_equal(back.data, img.data)
        assert np.array_equal(back.pixel(0, 0).values, img.data[0, 0])

    def test_band_grid_mismatch(self, tmp_path):
        img = sp.SpectralImage(np.ones((2, 2, 16)), sp.BandGrid(400, 700, 16))
        path = tmp_path / "b16.spec1"
        sp.save_spectral_image(img, path)
        with pytest.raises(sp.BandGridMismatchError):
            sp.load_spectral_image(path, GRID)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(4)
        img = _rand_image(rng)
        path = tmp_path / "trunc.spec1"
        sp.save_spectral_image(img, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])  # one float short
        with pytest.raises(sp.TruncatedPayloadError):
            sp.load_spectral_image(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.spec1"
        path.write_bytes(b"NOTSPEC" + b"\x00" * 64)
        with pytest.raises(sp.MalformedHeaderError):
            sp.load_spectral_image(path)


class TestSynthScene:
    def test_deterministic(self):
        a = sp.synth_scene(sp.SceneRecipe(size=24, patch_count=4, seed=7))
        b = sp.synth_scene(sp.SceneRecipe(size=24, patch_count=4, seed=7))
        assert np.array_equal(a.data, b.data)

    def test_degenerate_recipe_constant(self):
        img = sp.synth_scene(sp.SceneRecipe(size=16, patch_count=1, smoothness=1.0, seed=1))
        assert np.allclose(img.data, img.data[0, 0][None, None, :])

    def test_non_negative(self):
        img = sp.synth_scene(sp.SceneRecipe(size=16, patch_count=5, seed=11))
        assert img.data.min() >= 0.0

    def test_spectra_smooth(self):
        img = sp.synth_scene(sp.SceneRecipe(size=16, patch_count=5, seed=2))
        d2 = np.abs(np.diff(img.data, n=2, axis=2))
        assert d2.max() <= 0.25 * img.data.max() + 1e-12

    def test_bad_recipe(self):
        with pytest.raises(sp.SceneRecipeError):
            sp.synth_scene(sp.SceneRecipe(size=4))
        with pytest.raises(sp.SceneRecipeError):
            sp.synth_scene(sp.SceneRecipe(patch_count=0))


class TestRgbToSpectral:
    def setup_method(self):
        self.spd = sp.default_projector()

    def test_black_is_zero(self):
        img = sp.RgbImage(np.zeros((2, 2, 3)))
        out = sp.rgb_to_spectral(img, self.spd)
        assert np.all(out.data == 0)

    def test_pure_red_is_spd(self):
        img = sp.RgbImage(np.broadcast_to([1.0, 0, 0], (2, 2, 3)).copy())
        out = sp.rgb_to_spectral(img, self.spd)
        assert np.allclose(out.data[1, 1], self.spd.red.values)

    def test_half_mix_against_per_band_arithmetic(self):
        img = sp.RgbImage(np.broadcast_to([0.5, 0.5, 0.0], (1, 1, 3)).copy())
        out = sp.rgb_to_spectral(img, self.spd)
        for b in range(GRID.bands):
            expect = 0.5 * self.spd.red.values[b] + 0.5 * self.spd.green.values[b]
            assert out.data[0, 0, b] == pytest.approx(expect, rel=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        p = sp.RgbImage(rng.random((3, 3, 3)))
        q = sp.RgbImage(rng.random((3, 3, 3)))
        a, b = 0.7, -0.2
        lhs = sp.rgb_to_spectral(sp.RgbImage(a * p.data + b * q.data), self.spd).data
        rhs = a * sp.rgb_to_spectral(p, self.spd).data + b * sp.rgb_to_spectral(q, self.spd).data
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14)


class TestCieRendering:
    def setup_method(self):
        self.cmf = sp.load_cie_table()

    def test_zero_spectrum_black(self):
        img = sp.SpectralImage(np.zeros((2, 2, GRID.bands)))
        out = sp.spectral_to_rgb_cie(img, self.cmf)
        assert np.all(out.data == 0)

    def test_equal_energy_y_is_one(self):
        ybar = self.cmf.xyz[:, 1]
        c = 1.0 / (GRID.spacing * ybar.sum())
        img = sp.SpectralImage(np.full((1, 1, GRID.bands), c))
        xyz = sp.spectral_to_xyz(img, self.cmf)[0, 0]
        assert xyz[1] == pytest.approx(1.0, rel=1e-12)
        # oracle: independent direct summation over the bundled table
        assert xyz[0] == pytest.approx(sum(c * v * GRID.spacing for v in self.cmf.xyz[:, 0]), rel=1e-12)
        assert xyz[2] == pytest.approx(sum(c * v * GRID.spacing for v in self.cmf.xyz[:, 2]), rel=1e-12)

    def test_metamers_render_identically(self):
        rng = np.random.default_rng(9)
        base = rng.random(GRID.bands) + 0.5
        # build a metameric partner by adding a null-space direction of the table
        _, _, vt = np.linalg.svd(self.cmf.xyz.T)
        null = vt[3:]
        direction = null.T @ rng.standard_normal(null.shape[0])
        scale = 0.4 * base.min() / np.abs(direction).max()
        partner = base + scale * direction
        assert partner.min() >= 0
        a = sp.SpectralImage(base[None, None, :])
        b = sp.SpectralImage(partner[None, None, :])
        ra = sp.spectral_to_rgb_cie(a, self.cmf).data
        rb = sp.spectral_to_rgb_cie(b, self.cmf).data
        assert np.allclose(ra, rb, atol=1e-10)

    def test_bad_table_size(self):
        with pytest.raises(sp.BandGridMismatchError):
            sp.CieTable(np.ones((7, 3)), GRID)


class TestPatches:
    def test_on_grid_single_band(self):
        img = sp.monochromatic_patch(550.0, 2.0, 3, 3)
        px = img.data[0, 0]
        assert np.count_nonzero(px) == 1
        assert px[np.argmax(px)] == pytest.approx(2.0)
        assert GRID.centers[np.argmax(px)] == 550.0

    def test_midpoint_split(self):
        img = sp.monochromatic_patch(555.0, 1.0, 1, 1)
        px = img.data[0, 0]
        i550 = int((550 - 400) / 10)
        assert px[i550] == pytest.approx(0.5)
        assert px[i550 + 1] == pytest.approx(0.5)

    def test_energy_conservation(self):
        rng = np.random.default_rng(12)
        for lam in rng.uniform(400, 700, size=100):
            s = sp.monochromatic_spectrum(float(lam), 1.7)
            assert s.values.sum() == pytest.approx(1.7, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(sp.SpectralError):
            sp.monochromatic_patch(390.0, 1.0, 1, 1)

    def test_weighted_zero_and_basis(self):
        prims = [sp.monochromatic_spectrum(lam, 1.0) for lam in (450, 550, 650)]
        zero = sp.weighted_patch([0, 0, 0], prims, 2, 2)
        assert np.all(zero.data == 0)
        one = sp.weighted_patch([0, 1, 0], prims, 1, 1)
        assert np.allclose(one.data[0, 0], prims[1].values)

    def test_weighted_against_scalar_oracle(self):
        rng = np.random.default_rng(13)
        prims = [sp.Spectrum(rng.random(GRID.bands)) for _ in range(4)]
        w = rng.random(4)
        img = sp.weighted_patch(w, prims, 1, 1)
        for b in range(GRID.bands):
            expect = sum(w[i] * prims[i].values[b] for i in range(4))
            assert img.data[0, 0, b] == pytest.approx(expect, rel=1e-12)

    def test_weighted_errors(self):
        prims = [sp.monochromatic_spectrum(500, 1.0)]
        with pytest.raises(sp.SpectralError):
            sp.weighted_patch([1.0, 2.0], prims, 1, 1)
        with pytest.raises(sp.SpectralError):
            sp.weighted_patch([-0.1], prims, 1, 1)


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(21)
    img = sp.RgbImage(rng.random((4, 5, 3)))
    path = tmp_path / "out.ppm"
    sp.save_ppm(img, path)
    back = sp.load_ppm(path)
    assert back.height == 4 and back.width == 5
    assert np.abs(back.data - np.clip(img.data, 0, 1)).max() <= 0.5 / 255 + 1e-9
