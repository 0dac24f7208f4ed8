import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent_intervals.encoder import (
    EncoderParams,
    TrainConfig,
    check_mask,
    forward,
    full_mask,
    grad,
    init_params,
    kink_signature,
    load_checkpoint,
    loss_and_grad,
    loss_terms,
    pinball_loss,
    point_loss,
    predict,
    read_trace,
    recon_loss,
    save_checkpoint,
    total_loss,
    train,
    write_trace,
    zeros_like,
)
from latent_intervals.errors import FormatError, TrainingError
from latent_intervals.synth_gen import CorruptionPolicy, Generator, make_dataset

reals = st.floats(-50, 50, allow_nan=False)
levels = st.floats(0.01, 0.99)


def small_params(seed=0, input_size=32 * 32, dim=8, hidden=(16, 8)):
    return init_params(input_size, dim, hidden, seed)


def bias_only(dim, point, lo, hi, input_size=32 * 32, hidden=(4,)):
    """Params with zero weights: every head outputs its bias."""
    p = zeros_like(init_params(input_size, dim, hidden, 0))
    p.heads["point"] = (p.heads["point"][0], np.asarray(point, float))
    p.heads["lower"] = (p.heads["lower"][0], np.asarray(lo, float))
    p.heads["upper"] = (p.heads["upper"][0], np.asarray(hi, float))
    return p


@pytest.fixture(scope="module")
def batch():
    split = make_dataset(40, seed=11)
    return split.train.x[:12], split.train.z[:12].astype(np.float64)


class TestForward:
    def test_zero_params_zero_output(self):
        p = zeros_like(small_params())
        out = forward(p, np.random.default_rng(0).random((3, 32, 32, 1)))
        for a in (out.point, out.q_lo, out.q_hi):
            np.testing.assert_array_equal(a, 0.0)

    def test_shapes(self):
        p = small_params()
        x = np.random.default_rng(0).random((5, 32, 32, 1))
        out = forward(p, x)
        assert out.point.shape == out.q_lo.shape == out.q_hi.shape == (5, 8)
        assert forward(p, x[0]).point.shape == (8,)

    def test_pure(self):
        p = small_params()
        x = np.random.default_rng(0).random((2, 32, 32, 1))
        np.testing.assert_array_equal(forward(p, x).point, forward(p, x).point)

    def test_one_pixel_matters(self):
        p = small_params()
        x = np.random.default_rng(0).random((32, 32, 1))
        x2 = x.copy()
        x2[5, 7, 0] += 0.5
        assert not np.array_equal(forward(p, x).point, forward(p, x2).point)

    def test_predict_matches_forward(self):
        p = small_params()
        x = np.random.default_rng(1).random((7, 32, 32, 1))
        a, b = forward(p, x), predict(p, x, batch_size=3)
        np.testing.assert_allclose(a.q_hi, b.q_hi, rtol=1e-14)

    def test_wrong_input_size(self):
        with pytest.raises(ValueError):
            forward(small_params(), np.zeros((2, 16, 16, 1)))

    def test_init_deterministic_and_zero_bias(self):
        a, b = small_params(3), small_params(3)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)
        assert all(not bias.any() for _, bias in a.trunk)
        assert not np.array_equal(small_params(4).trunk[0][0], a.trunk[0][0])


class TestLosses:
    def test_pinball_examples(self):
        assert pinball_loss(1.0, 1.0, 0.3) == 0.0
        assert pinball_loss(0.0, 1.0, 0.95) == pytest.approx(0.95)
        assert pinball_loss(0.0, -1.0, 0.95) == pytest.approx(0.05)

    @given(reals, reals, levels)
    def test_pinball_nonnegative_zero_iff_equal(self, q, z, beta):
        v = pinball_loss(q, z, beta)
        assert v >= 0
        assert (v == 0) == (q == z)

    @given(reals, reals, reals, levels)
    def test_pinball_convex_in_q(self, q1, q2, z, beta):
        mid = pinball_loss(0.5 * (q1 + q2), z, beta)
        assert mid <= 0.5 * (pinball_loss(q1, z, beta) + pinball_loss(q2, z, beta)) + 1e-9

    def test_pinball_bad_level(self):
        with pytest.raises(ValueError):
            pinball_loss(0.0, 1.0, 1.0)

    def test_pinball_grid_minimiser_is_empirical_quantile(self):
        sample = np.arange(1, 101, dtype=float)
        grid = np.arange(0.0, 101.0, 0.5)
        losses = pinball_loss(grid[:, None], sample[None, :], 0.9).mean(axis=1)
        q = grid[np.argmin(losses)]
        # mean pinball at level 0.9 is flat between the 90th and 91st order statistics
        assert 90 - 0.5 <= q <= 91 + 0.5

    def test_point_loss_examples(self):
        z = np.random.default_rng(0).standard_normal(8)
        assert point_loss(z, z) == 0
        e = np.zeros(8)
        e[0] = 1
        assert point_loss(z + e, z) == pytest.approx(1.0)
        assert point_loss(z + np.tile([0.5, -0.5], 4), z) == pytest.approx(4.0)

    def test_recon_loss_examples(self):
        a = np.zeros((4, 4, 1))
        assert recon_loss(a, a) == 0
        assert recon_loss(a, np.ones_like(a)) == 1.0
        b = a.copy()
        b[:2] = 0.5
        assert recon_loss(a, b) == pytest.approx(0.25)

    def test_mask_validation(self):
        with pytest.raises(ValueError):
            check_mask(np.zeros(8, bool), 8)
        with pytest.raises(ValueError):
            check_mask(np.ones(4, bool), 8)
        with pytest.raises(ValueError):
            TrainConfig(alpha=1.0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)


class TestTotalLoss:
    def test_perfect_predictor(self, batch):
        x, z = batch
        cfg = TrainConfig(recon_weight=0.0)
        p = bias_only(8, z[0], z[0], z[0])
        terms = loss_terms(p, (x[0], z[0]), full_mask(8), cfg)
        assert terms["point"] == terms["pinball_lo"] == terms["pinball_hi"] == terms["total"] == 0.0

    def test_decomposition_without_recon(self, batch):
        x, z = batch
        p = small_params(1)
        cfg = TrainConfig(recon_weight=0.0)
        t = loss_terms(p, (x, z), full_mask(8), cfg)
        assert t["total"] == t["point"] + t["pinball_lo"] + t["pinball_hi"]

    def test_hand_summed_single_sample(self):
        g = Generator()
        z = np.zeros(8)
        f = np.full(8, 0.5)
        lo = np.full(8, 1.0)
        hi = np.full(8, 1.0)
        cfg = TrainConfig(alpha=0.1, recon_weight=10.0)
        p = bias_only(8, f, lo, hi)
        x = np.zeros((32, 32, 1))
        point = 8 * 0.5
        # z < q for both quantiles, so each dim pays (q - z)(1 - beta)
        pin_lo = 8 * 1.0 * (1 - 0.05)
        pin_hi = 8 * 1.0 * (1 - 0.95)
        recon = np.abs(g.render(f) - g.render(z)).mean()
        expected = point + pin_lo + pin_hi + 10.0 * recon
        assert total_loss(p, (x, z), full_mask(8), cfg, g) == pytest.approx(expected, rel=1e-12)

    def test_masked_dims_excluded_from_quantile_terms(self):
        cfg = TrainConfig(recon_weight=0.0)
        p = bias_only(8, np.zeros(8), np.ones(8), np.ones(8))
        x, z = np.zeros((32, 32, 1)), np.zeros(8)
        mask = np.zeros(8, bool)
        mask[:3] = True
        t = loss_terms(p, (x, z), mask, cfg)
        assert t["pinball_lo"] == pytest.approx(3 * 0.95)
        assert t["pinball_hi"] == pytest.approx(3 * 0.05)


class TestGradient:
    def test_bias_gradient_by_hand(self):
        # zero params: every output is 0; z is fixed so each sign is known
        p = zeros_like(small_params())
        x = np.zeros((2, 32, 32, 1))
        z = np.array([[1.0, -1.0] * 4, [1.0, -2.0] * 4])
        cfg = TrainConfig(alpha=0.2, recon_weight=0.0)
        g = grad(p, (x, z), full_mask(8), cfg)
        # d|f - z|/df at f = 0 is -1 for z > 0 and +1 for z < 0
        np.testing.assert_allclose(g.heads["point"][1], np.tile([-1.0, 1.0], 4))
        # lower level 0.1: -0.1 when z > q, 0.9 otherwise
        np.testing.assert_allclose(g.heads["lower"][1], np.tile([-0.1, 0.9], 4))
        np.testing.assert_allclose(g.heads["upper"][1], np.tile([-0.9, 0.1], 4))
        # zero weights downstream: no signal reaches the trunk
        assert all(not a.any() for a in g.trunk[0])

    def test_duplicated_batch_same_gradient(self, batch):
        x, z = batch
        p = small_params(2)
        cfg = TrainConfig()
        g1 = grad(p, (x, z), full_mask(8), cfg)
        g2 = grad(p, (np.concatenate([x, x]), np.concatenate([z, z])), full_mask(8), cfg)
        for a, b in zip(g1.arrays(), g2.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)

    def test_masked_dims_get_no_quantile_gradient(self, batch):
        x, z = batch
        mask = np.array([1, 0, 1, 0, 0, 1, 0, 0], bool)
        g = grad(small_params(5), (x, z), mask, TrainConfig())
        for head in ("lower", "upper"):
            W, b = g.heads[head]
            np.testing.assert_array_equal(W[:, ~mask], 0.0)
            np.testing.assert_array_equal(b[~mask], 0.0)
            assert np.abs(b[mask]).sum() > 0

    def test_loss_matches_terms(self, batch):
        x, z = batch
        p = small_params(6)
        cfg = TrainConfig()
        terms, _ = loss_and_grad(p, (x, z), full_mask(8), cfg)
        ref = loss_terms(p, (x, z), full_mask(8), cfg)
        assert terms["total"] == pytest.approx(ref["total"], rel=1e-12)

    @pytest.mark.parametrize("recon_weight", [0.0, 10.0])
    def test_finite_differences_small_net(self, batch, recon_weight):
        x, z = batch
        p = small_params(7)
        cfg = TrainConfig(recon_weight=recon_weight)
        mask = full_mask(8)
        g = grad(p, (x, z), mask, cfg)
        flat = [(i, a) for i, a in enumerate(p.arrays())]
        rng = np.random.default_rng(0)
        checked = 0
        h = 1e-5
        for _ in range(200):
            i, a = flat[rng.integers(len(flat))]
            j = tuple(rng.integers(s) for s in a.shape)

            def shifted(d):
                q = p.copy()
                q.arrays()[i][j] += d
                return q

            up, down = shifted(h), shifted(-h)
            sig = kink_signature(p, (x, z), mask, cfg)
            if not (np.array_equal(sig, kink_signature(up, (x, z), mask, cfg))
                    and np.array_equal(sig, kink_signature(down, (x, z), mask, cfg))):
                continue
            fd = (total_loss(up, (x, z), mask, cfg) - total_loss(down, (x, z), mask, cfg)) / (2 * h)
            an = g.arrays()[i][j]
            assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-6)
            checked += 1
            if checked == 40:
                break
        assert checked == 40


class TestTrain:
    def test_zero_epochs_returns_init(self):
        split = make_dataset(20, seed=0)
        cfg = TrainConfig(epochs=0, hidden=(8,))
        res = train(split.train, full_mask(8), cfg)
        for a, b in zip(res.params.arrays(), res.init.arrays()):
            np.testing.assert_array_equal(a, b)
        assert len(res.trace) == 1

    def test_deterministic(self):
        split = make_dataset(40, seed=1)
        cfg = TrainConfig(epochs=2, hidden=(8,), batch_size=8)
        a = train(split.train, full_mask(8), cfg)
        b = train(split.train, full_mask(8), cfg)
        for x, y in zip(a.params.arrays(), b.params.arrays()):
            np.testing.assert_array_equal(x, y)
        assert a.trace == b.trace

    def test_trace_finite_and_decreasing(self):
        split = make_dataset(300, seed=2)
        res = train(split.train, full_mask(8), TrainConfig(epochs=5, hidden=(32, 16)))
        totals = [r["total"] for r in res.trace]
        assert all(np.isfinite(totals))
        assert totals[-1] < totals[0]

    def test_clean_point_error_drops_below_fifth(self):
        # 500 uncorrupted samples; error measured on the same samples before/after
        split = make_dataset(500, policy=CorruptionPolicy("none"), seed=0, ratios=(1.0, 0.0, 0.0))
        data = split.train
        cfg = TrainConfig(epochs=300, batch_size=16, recon_weight=0.0)
        res = train(data, full_mask(8), cfg)
        before = np.abs(predict(res.init, data.x).point - data.z).mean()
        after = np.abs(predict(res.params, data.x).point - data.z).mean()
        assert after < 0.2 * before

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        split = make_dataset(40, seed=3)
        cfg = TrainConfig(epochs=3, lr=1e200, hidden=(8,))
        with pytest.raises(TrainingError) as err:
            train(split.train, full_mask(8), cfg)
        assert err.value.epoch >= 1

    def test_trace_round_trip(self, tmp_path):
        split = make_dataset(20, seed=4)
        res = train(split.train, full_mask(8), TrainConfig(epochs=2, hidden=(8,)))
        write_trace(res.trace, tmp_path / "t.csv")
        back = read_trace(tmp_path / "t.csv")
        assert back == res.trace


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = small_params(3)
        save_checkpoint(p, tmp_path / "c.bin", {"note": "x"})
        q, meta = load_checkpoint(tmp_path / "c.bin")
        assert meta == {"note": "x"} and isinstance(q, EncoderParams)
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a.astype(np.float32), b)
        assert q.leaky_slope == p.leaky_slope

    def test_bytes_stable(self, tmp_path):
        save_checkpoint(small_params(3), tmp_path / "a")
        save_checkpoint(small_params(3), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    @pytest.mark.parametrize("cut", [4, 40, -3])
    def test_truncated(self, tmp_path, cut):
        save_checkpoint(small_params(3), tmp_path / "c")
        blob = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c")
