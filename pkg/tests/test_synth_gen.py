import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_intervals.errors import FormatError
from latent_intervals.synth_gen import (
    DOWNSAMPLE_FACTORS,
    CorruptionPolicy,
    CorruptionSpec,
    Generator,
    apply_corruption,
    corrupt_downsample,
    corrupt_mask,
    load_dataset,
    make_dataset,
    make_samples,
    sample_latent,
    save_dataset,
    split_sizes,
    substream,
)

latents = arrays(np.float64, 8, elements=st.floats(-6, 6, allow_nan=False))


class TestRender:
    def test_origin_is_centred_disc(self, gen):
        img = gen.render(np.zeros(8))[..., 0]
        v = gen.factors(np.zeros(8))
        assert v[0] == pytest.approx(16.0) and v[1] == pytest.approx(16.0)
        # mirror symmetry about the vertical axis through the centre
        np.testing.assert_array_equal(img, img[:, ::-1])
        assert img[16, 16] == pytest.approx(v[3])

    def test_factors_at_midpoints(self, gen):
        lo, hi = gen.factor_ranges().T
        np.testing.assert_allclose(gen.factors(np.zeros(8)), 0.5 * (lo + hi))

    def test_shape_and_dtype(self, gen):
        assert gen.render(np.zeros(8)).shape == (32, 32, 1)
        assert gen.render(np.zeros((5, 8))).shape == (5, 32, 32, 1)

    @given(latents)
    def test_pixels_in_unit_interval(self, z):
        img = Generator().render(z)
        assert img.min() >= 0.0 and img.max() <= 1.0

    @given(latents)
    def test_pure(self, z):
        g = Generator()
        np.testing.assert_array_equal(g.render(z), g.render(z.copy()))

    def test_radius_change_confined_to_annulus(self, gen):
        z = np.zeros(8)
        z2 = z.copy()
        z2[2] = 1.5
        a, b = gen.render(z)[..., 0], gen.render(z2)[..., 0]
        v, v2 = gen.factors(z), gen.factors(z2)
        ys, xs = np.mgrid[0:32, 0:32] + 0.5
        dist = np.hypot(xs - v[0], ys - v[1])
        # smoothstep edge spans r +- soft/2 around each radius
        inner = min(v[2], v2[2]) - v[5] / 2
        outer = max(v[2], v2[2]) + v[5] / 2
        outside = (dist < inner) | (dist > outer)
        diff = a != b
        assert diff.any()
        assert not (diff & outside).any()

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_spatial_factors_local(self, gen, k):
        z = np.zeros(8)
        z2 = z.copy()
        z2[k] = 0.4
        diff = gen.render(z) != gen.render(z2)
        # only pixels near the disc change; far corners do not
        assert diff.any()
        assert not diff[0, 0] and not diff[-1, -1] and not diff[0, -1]

    def test_extra_dims_inert(self):
        g = Generator(dim=10)
        z = np.zeros(10)
        z2 = z.copy()
        z2[8:] = 3.0
        np.testing.assert_array_equal(g.render(z), g.render(z2))

    def test_rejects_bad_latent(self, gen):
        with pytest.raises(ValueError):
            gen.render(np.zeros(7))
        with pytest.raises(ValueError):
            gen.render(np.full(8, np.nan))

    def test_jacobian_matches_finite_differences(self, gen):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((3, 8))
        _, jac = gen.render_with_jacobian(z)
        h = 1e-6
        for k in range(8):
            e = np.zeros(8)
            e[k] = h
            fd = (gen.render(z + e) - gen.render(z - e)) / (2 * h)
            np.testing.assert_allclose(jac[:, k], fd, atol=1e-6)

    def test_vjp_matches_jacobian(self, gen):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((4, 8))
        target = gen.render(rng.standard_normal((4, 8)))
        loss, g = gen.recon_vjp(z, target)
        img, jac = gen.render_with_jacobian(z)
        np.testing.assert_allclose(loss, np.abs(img - target).mean(axis=(1, 2, 3)))
        sign = np.where(img - target >= 0, 1.0, -1.0)
        ref = (jac * sign[:, None]).mean(axis=(2, 3, 4))
        np.testing.assert_allclose(g, ref, atol=1e-12)


class TestSampleLatent:
    def test_deterministic(self):
        a = sample_latent(np.random.default_rng(42))
        b = sample_latent(np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (8,) and np.all(np.isfinite(a))

    def test_seeds_differ(self):
        assert not np.array_equal(sample_latent(np.random.default_rng(1)), sample_latent(np.random.default_rng(2)))

    def test_standard_normal_moments(self):
        rng = np.random.default_rng(0)
        z = np.array([sample_latent(rng) for _ in range(100_000)])
        assert np.all(np.abs(z.mean(axis=0)) < 0.02)
        assert np.all(np.abs(z.var(axis=0) - 1.0) < 0.05)


class TestDownsample:
    def test_factor_one_identity(self, gen):
        y = gen.render(np.ones(8)).astype(np.float32)
        out = corrupt_downsample(y, 1)
        np.testing.assert_array_equal(out, y)
        assert out is not y

    def test_full_block_is_global_mean(self, gen):
        y = gen.render(np.ones(8))
        out = corrupt_downsample(y, 32)
        np.testing.assert_allclose(out, np.full_like(y, y.mean()), rtol=0, atol=1e-15)

    def test_ramp_block_means(self):
        y = np.arange(64, dtype=np.float64).reshape(8, 8, 1)
        out = corrupt_downsample(y, 4)[..., 0]
        # block (0,0) holds rows 0-3, cols 0-3: mean of 8r + c = 8*1.5 + 1.5
        expected = np.array([[13.5, 17.5], [45.5, 49.5]])
        np.testing.assert_array_equal(out, np.kron(expected, np.ones((4, 4))))

    @pytest.mark.parametrize("factor", DOWNSAMPLE_FACTORS)
    def test_idempotent_and_in_range(self, gen, factor):
        y = gen.render(np.random.default_rng(factor).standard_normal(8))
        once = corrupt_downsample(y, factor)
        np.testing.assert_allclose(corrupt_downsample(once, factor), once, atol=1e-15)
        assert once.min() >= 0 and once.max() <= 1

    def test_bad_factor(self, gen):
        with pytest.raises(ValueError):
            corrupt_downsample(gen.render(np.zeros(8)), 3)
        with pytest.raises(ValueError):
            CorruptionSpec("downsample", downsample_factor=0)


class TestMask:
    def test_threshold_zero(self, gen):
        y = gen.render(np.zeros(8))
        out, m = corrupt_mask(y, 0.0, np.random.default_rng(0))
        assert not m.any()
        np.testing.assert_array_equal(out, y)

    def test_threshold_one(self, gen):
        out, m = corrupt_mask(gen.render(np.zeros(8)), 1.0, np.random.default_rng(0))
        assert m.all() and not out.any()

    def test_fraction_concentrates(self):
        y = np.full((100, 100, 1), 0.5)
        _, m = corrupt_mask(y, 0.6, np.random.default_rng(7))
        # 3 sigma of Binomial(10^4, 0.6) / 10^4 is about 0.0147
        assert abs(m.mean() - 0.6) <= 0.02

    @given(st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_mask_channel_and_range(self, t, seed):
        y = Generator().render(np.zeros(8))
        out, m = corrupt_mask(y, t, np.random.default_rng(seed))
        assert set(np.unique(m)) <= {0.0, 1.0}
        np.testing.assert_array_equal(out[m[..., 0] == 1], 0.0)
        np.testing.assert_array_equal(out[m[..., 0] == 0], y[m[..., 0] == 0])
        assert out.min() >= 0 and out.max() <= 1

    def test_appended_channel(self, gen):
        y = gen.render(np.zeros(8))
        x = apply_corruption(y, CorruptionSpec("mask", mask_threshold=0.6), np.random.default_rng(0))
        assert x.shape == (32, 32, 2)
        x = apply_corruption(y, CorruptionSpec("downsample", downsample_factor=4), np.random.default_rng(0))
        assert x.shape == (32, 32, 1)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            CorruptionSpec("mask", mask_threshold=1.5)


class TestPolicy:
    def test_json_round_trip(self):
        p = CorruptionPolicy("mask", (1, 2), (0.3, 0.9))
        assert CorruptionPolicy.from_json(p.to_json()) == p

    def test_draws_from_support(self):
        rng = np.random.default_rng(0)
        p = CorruptionPolicy("downsample")
        seen = {p.draw(rng).downsample_factor for _ in range(200)}
        assert seen == set(DOWNSAMPLE_FACTORS)

    def test_channels(self):
        assert CorruptionPolicy("mask").input_channels() == 2
        assert CorruptionPolicy("downsample").input_channels() == 1

    def test_labels(self):
        assert CorruptionSpec("downsample", downsample_factor=8).label() == "8x"
        assert CorruptionSpec("mask", mask_threshold=0.3).label() == "mask0.3"
        assert CorruptionSpec().label() == "clean"


class TestDataset:
    def test_split_80_10_10(self):
        split = make_dataset(100, seed=1)
        assert split.sizes == (80, 10, 10)
        assert split_sizes(100_000) == (80_000, 10_000, 10_000)

    def test_too_small(self):
        with pytest.raises(ValueError):
            make_dataset(5)

    def test_splits_disjoint(self):
        split = make_dataset(50, seed=2)
        zs = np.concatenate([split.train.z, split.calibration.z, split.validation.z])
        assert len({row.tobytes() for row in zs}) == 50

    def test_labels_render_inputs(self):
        split = make_dataset(20, policy=CorruptionPolicy("downsample", factors=(1,)), seed=3)
        g = split.generator
        np.testing.assert_allclose(split.train.x, g.render(split.train.z.astype(np.float64)), atol=1e-6)

    def test_mask_channel_layout(self):
        split = make_dataset(20, policy=CorruptionPolicy("mask"), seed=0)
        s = split.train[0]
        assert s.x.shape[-1] == 2 and s.corruption.kind == "mask"

    def test_sample_independent_of_batch(self, gen):
        p = CorruptionPolicy("mask")
        a = make_samples(10, gen, p, seed=5)
        b = make_samples(4, gen, p, seed=5)
        np.testing.assert_array_equal(a.x[:4], b.x)

    def test_substreams_independent(self):
        assert substream(0, 1, 0).random() != substream(0, 1, 1).random()
        assert substream(0, 1, 0).random() == substream(0, 1, 0).random()

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(make_dataset(40, seed=9, policy=CorruptionPolicy("mask")), tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_round_trip(self, tmp_path):
        split = make_dataset(30, seed=4)
        save_dataset(split, tmp_path / "d.bin")
        back = load_dataset(tmp_path / "d.bin")
        assert back.sizes == split.sizes and back.seed == 4 and back.policy == split.policy
        for a, b in zip((split.train, split.calibration, split.validation), (back.train, back.calibration, back.validation)):
            np.testing.assert_array_equal(a.x, b.x)
            np.testing.assert_array_equal(a.z, b.z)
            np.testing.assert_array_equal(a.kinds, b.kinds)
            np.testing.assert_array_equal(a.params, b.params)

    def test_sidecar_rows(self, tmp_path):
        save_dataset(make_dataset(20, seed=0), tmp_path / "d.bin")
        lines = (tmp_path / "d.bin.csv").read_text().splitlines()
        assert lines[0] == "index,split,corruption,parameter"
        assert len(lines) == 21 and lines[1].startswith("0,train,downsample,")

    @pytest.mark.parametrize("damage", ["truncate", "magic", "payload"])
    def test_corrupt_file(self, tmp_path, damage):
        path = tmp_path / "d.bin"
        save_dataset(make_dataset(20, seed=0), path, sidecar=False)
        blob = bytearray(path.read_bytes())
        if damage == "truncate":
            blob = blob[:10]
        elif damage == "magic":
            blob[0] ^= 0xFF
        else:
            blob = blob[:-4]
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_dataset(path)
