import numpy as np
import pytest
from scipy import stats

from chromacortex import retina as rt
from chromacortex import spectral as sp


def small_cfg(**kw):
    base = dict(grid_size=16, scene_size=48, jitter_amplitude=0.2, seed=3)
    base.update(kw)
    return rt.MosaicConfig(**base)


def flat_scene(size=48, level=1.0):
    return sp.SpectralImage(np.full((size, size, sp.DEFAULT_GRID.bands), level))


class TestTemplates:
    def test_peak_placement(self):
        s = rt.spectral_response(560.0)
        assert sp.DEFAULT_GRID.centers[np.argmax(s.values)] == 560.0
        assert s.values.max() == pytest.approx(1.0)

    def test_unimodal(self):
        for peak in (419.0, 530.0, 560.0, 506.0, 545.0):
            d = np.diff(rt.spectral_response(peak).values)
            signs = np.sign(d[np.abs(d) > 1e-12])
            flips = np.count_nonzero(np.diff(signs))
            assert flips <= 1

    def test_lm_overlap_exceeds_ls(self):
        L = rt.spectral_response(560.0).values
        M = rt.spectral_response(530.0).values
        S = rt.spectral_response(419.0).values

        def overlap(a, b):
            return np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))

        assert overlap(L, M) > overlap(L, S)

    def test_range_check(self):
        with pytest.raises(rt.RetinaError):
            rt.spectral_response(900.0)


class TestMosaic:
    def test_deterministic_per_seed(self):
        a = rt.build_mosaic(small_cfg())
        b = rt.build_mosaic(small_cfg())
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.types, b.types)

    def test_zero_jitter_positions_seed_free(self):
        a = rt.build_mosaic(small_cfg(jitter_amplitude=0.0, seed=1))
        b = rt.build_mosaic(small_cfg(jitter_amplitude=0.0, seed=2))
        assert np.array_equal(a.positions, b.positions)
        assert not np.array_equal(a.types, b.types)

    def test_lms_defaults(self):
        m = rt.build_mosaic(rt.MosaicConfig(grid_size=16, scene_size=48))
        assert m.config.spectral_peaks == (560.0, 530.0, 419.0)
        assert m.config.type_probabilities == (0.63, 0.32, 0.05)

    def test_retinotopy_invariant(self):
        m = rt.build_mosaic(small_cfg(grid_size=24, jitter_amplitude=0.3))
        assert rt._retinotopy_ok(m.positions)

    def test_excessive_jitter_rejected(self):
        with pytest.raises(rt.MosaicError):
            rt.build_mosaic(small_cfg(grid_size=24, jitter_amplitude=3.0))

    def test_bad_probabilities(self):
        with pytest.raises(rt.MosaicError):
            rt.build_mosaic(small_cfg(type_probabilities=(0.6, 0.3, 0.05)))

    def test_density_decreases_with_eccentricity(self):
        m = rt.build_mosaic(rt.MosaicConfig(grid_size=48, scene_size=128, seed=5))
        pos = m.positions.reshape(-1, 2)
        center = pos.mean(axis=0)
        rad = np.linalg.norm(pos - center, axis=1)
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        nn = np.sqrt(d2.min(axis=1))
        edges = np.quantile(rad, [0.0, 0.25, 0.5, 0.75, 1.0])
        means = [nn[(rad >= lo) & (rad < hi)].mean() for lo, hi in zip(edges[:-1], edges[1:])]
        assert all(a < b for a, b in zip(means[:-1], means[1:]))

    def test_type_frequencies_multinomial(self):
        # pooled over 10 seeds, each class count within 3 sigma of the binomial
        counts = np.zeros(3)
        n_total = 0
        for seed in range(10):
            m = rt.build_mosaic(rt.MosaicConfig(grid_size=64, scene_size=160, seed=seed))
            for k in range(3):
                counts[k] += np.sum(m.types == k)
            n_total += m.types.size
        for k, p in enumerate((0.63, 0.32, 0.05)):
            sigma = np.sqrt(n_total * p * (1 - p))
            assert abs(counts[k] - n_total * p) <= 3 * sigma

    def test_mosa1_round_trip(self, tmp_path):
        m = rt.build_mosaic(small_cfg())
        path = tmp_path / "eye.mosa1"
        rt.save_mosaic(m, path)
        back = rt.load_mosaic(path)
        assert np.array_equal(back.types, m.types)
        assert np.abs(back.positions - m.positions).max() < 1e-5
        assert back.config.spectral_peaks == m.config.spectral_peaks
        assert np.allclose(back.cone_responses, m.cone_responses, atol=1e-6)


class TestDrift:
    def test_paper_scale_default_bound(self):
        # the full-scale drift bound is 15 scene pixels; desk scale uses 3
        state = rt.GazeState.fresh(0)
        out = rt.drift_step(state, bound=15)
        assert np.all(np.abs(out.offset) <= 15)

    def test_zero_bound(self):
        state = rt.GazeState.fresh(1, offset=(2, -1))
        out = rt.drift_step(state, bound=0)
        assert np.array_equal(out.offset, [2, -1])

    def test_steps_uniform_chi2(self):
        state = rt.GazeState.fresh(7)
        bound = 3
        deltas = []
        for _ in range(10**5):
            new = rt.drift_step(state, bound)
            deltas.append(new.offset - state.offset)
            state = rt.GazeState(np.zeros(2, dtype=np.int64), new.rng)
        deltas = np.asarray(deltas)
        for axis in range(2):
            observed = np.bincount(deltas[:, axis] + bound, minlength=2 * bound + 1)
            _, p = stats.chisquare(observed)
            assert p > 0.01

    def test_clamped(self):
        state = rt.GazeState.fresh(3, offset=(5, 5))
        out = rt.drift_step(state, bound=3, max_offset=5)
        assert np.all(np.abs(out.offset) <= 5)


class TestActivations:
    def setup_method(self):
        self.mosaic = rt.build_mosaic(small_cfg())

    def test_zero_scene_zero_activations(self):
        scene = sp.SpectralImage(np.zeros((48, 48, 31)))
        rng = np.random.default_rng(0)
        act = rt.cone_activations(self.mosaic, scene, (0, 0), snr=100.0, rng=rng)
        assert np.all(act == 0.0)

    def test_noiseless_matches_per_cone_oracle(self):
        scene = sp.synth_scene(sp.SceneRecipe(size=48, patch_count=4, seed=9))
        act = rt.cone_activations(self.mosaic, scene, (1, -2), snr=None)
        V, U = self.mosaic.shape
        rng = np.random.default_rng(4)
        for _ in range(20):
            v, u = rng.integers(0, V), rng.integers(0, U)
            p = self.mosaic.positions[v, u] + [1, -2]
            sample = rt.sample_scene_bilinear(scene.data, p[None, :])[0]
            expect = float(np.dot(sample, self.mosaic.cone_responses[v, u])) * 10.0
            assert act[v, u] == pytest.approx(expect, rel=1e-12)

    def test_snr_hundred(self):
        scene = flat_scene()
        rng = np.random.default_rng(11)
        v, u = 8, 8
        vals = []
        for _ in range(10_000):
            act = rt.cone_activations(self.mosaic, scene, (0, 0), snr=100.0, rng=rng)
            vals.append(act[v, u])
        vals = np.asarray(vals)
        rel = vals.std() / vals.mean()
        assert 0.009 <= rel <= 0.011

    def test_linearity_noiseless(self):
        a = sp.synth_scene(sp.SceneRecipe(size=48, patch_count=3, seed=1))
        b = sp.synth_scene(sp.SceneRecipe(size=48, patch_count=3, seed=2))
        mix = sp.SpectralImage(0.3 * a.data + 0.6 * b.data)
        lhs = rt.cone_activations(self.mosaic, mix, snr=None)
        rhs = 0.3 * rt.cone_activations(self.mosaic, a, snr=None) + 0.6 * rt.cone_activations(
            self.mosaic, b, snr=None
        )
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-13)

    def test_out_of_field(self):
        scene = flat_scene()
        with pytest.raises(rt.OutOfFieldError):
            rt.cone_activations(self.mosaic, scene, (40, 0), snr=None)


class TestDogKernel:
    def test_sum_equals_mean_exactly(self):
        k = rt.dog_kernel(0.15, 0.9, 0.09)
        assert abs(k.sum() - 0.09) <= 1e-12

    def test_dc_response(self):
        k = rt.dog_kernel(0.15, 0.9, 0.09)
        frame = np.full((20, 20), 1.7)
        out = rt.lateral_inhibition(frame, k)
        assert np.allclose(out, 1.7 * 0.09, atol=1e-12)

    def test_center_dominates(self):
        k = rt.dog_kernel(0.15, 0.9, 0.09)
        c = k.shape[0] // 2
        center = k[c, c]
        surround = np.abs(k[k != center])
        assert center > surround.max()

    def test_invalid_params(self):
        with pytest.raises(rt.RetinaError):
            rt.dog_kernel(0.9, 0.15, 0.09)
        with pytest.raises(rt.RetinaError):
            rt.dog_kernel(0.15, 0.9, 0.09, support=4)

    def test_impulse_response(self):
        k = rt.dog_kernel(0.2, 0.8, 0.1)
        frame = np.zeros((15, 15))
        frame[7, 7] = 1.0
        out = rt.lateral_inhibition(frame, k)
        h = k.shape[0] // 2
        assert np.allclose(out[7 - h : 7 + h + 1, 7 - h : 7 + h + 1], k, atol=1e-14)

    def test_against_naive_convolution(self):
        rng = np.random.default_rng(5)
        frame = rng.standard_normal((12, 12))
        k = rt.dog_kernel(0.15, 0.9, 0.09)
        out = rt.lateral_inhibition(frame, k)
        h = k.shape[0] // 2
        padded = np.pad(frame, h, mode="reflect")
        ref = np.zeros_like(frame)
        for i in range(12):
            for j in range(12):
                win = padded[i : i + k.shape[0], j : j + k.shape[1]]
                ref[i, j] = np.sum(win * k[::-1, ::-1])
        assert np.abs(out - ref).max() <= 1e-10


class TestOnOff:
    def test_values(self):
        on, off = rt.split_on_off(np.array([0.5, -0.3, 0.0]))
        assert np.allclose(on, [0.5, 0, 0])
        assert np.allclose(off, [0, 0.3, 0])

    def test_reconstruction_identity(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((17, 17))
        on, off = rt.split_on_off(x)
        assert np.array_equal(on - off, x)


class TestLif:
    def test_zero_input_zero_spikes(self):
        counts = rt.lif_spikes(np.zeros((4, 4)), T=64)
        assert np.all(counts == 0)

    def test_counts_bounded_by_T(self):
        counts = rt.lif_spikes(np.full((3, 3), 10.0), T=32)
        assert counts.max() <= 32

    def test_monotone_in_input(self):
        levels = np.linspace(0.0, 0.8, 25)
        counts = [rt.lif_spikes(np.full((1, 1), x), T=512)[0, 0] for x in levels]
        assert all(a <= b for a, b in zip(counts[:-1], counts[1:]))

    def test_pairwise_order_same_seed(self):
        a = rt.lif_spikes(np.full((2, 2), 0.1), T=256, seed=9)
        b = rt.lif_spikes(np.full((2, 2), 0.3), T=256, seed=9)
        assert np.all(a <= b)

    def test_rejects_bad_input(self):
        with pytest.raises(rt.RetinaError):
            rt.lif_spikes(np.array([[np.nan]]), T=4)
        with pytest.raises(rt.RetinaError):
            rt.lif_spikes(np.array([[-0.1]]), T=4)


class TestEncode:
    def setup_method(self):
        self.engine = rt.RetinaEngine(rt.build_mosaic(small_cfg()), snr=None)
        self.scene = sp.synth_scene(sp.SceneRecipe(size=48, patch_count=5, seed=21))

    def test_averaged_equals_stage_composition(self):
        out = self.engine.encode(self.scene, (1, 1), mode="averaged")
        ref = rt.lateral_inhibition(
            rt.cone_activations(self.engine.mosaic, self.scene, (1, 1), snr=None),
            self.engine.kernel,
        )
        assert np.array_equal(out, ref)

    def test_spiking_correlates_with_averaged(self):
        avg = self.engine.encode(self.scene, mode="averaged")
        spk = self.engine.encode(self.scene, mode="spiking", T=1024)
        r = np.corrcoef(avg.ravel(), spk.ravel())[0, 1]
        assert r >= 0.99

    def test_same_seed_identical(self):
        a = self.engine.encode(self.scene, mode="spiking", T=128, spike_seed=5)
        b = self.engine.encode(self.scene, mode="spiking", T=128, spike_seed=5)
        assert np.array_equal(a, b)

    def test_noise_determinism_via_rng(self):
        eng = rt.RetinaEngine(self.engine.mosaic, snr=100.0)
        a = eng.encode(self.scene, rng=np.random.default_rng(3))
        b = eng.encode(self.scene, rng=np.random.default_rng(3))
        assert np.array_equal(a, b)
