import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmi.datasets import (
    DropConfig,
    SpiralConfig,
    WavePacketConfig,
    dataset_paths,
    ellipse_axes,
    gen_liquid_drop,
    gen_spiral,
    gen_wave_packet,
    generate,
    inside_ellipse,
    lj_potential,
    load_dataset,
    place_particles,
    relax_drop,
    save_dataset,
    spiral_twist,
)


class TestSpiral:
    def test_alpha_zero_is_gaussian(self):
        x = gen_spiral(100_000, SpiralConfig(alpha=0.0), seed=0)
        c = np.asarray(SpiralConfig().covariance)
        np.testing.assert_allclose(np.cov(x.T), c, rtol=0.03, atol=0.03 * 0.64)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.integers(0, 10_000))
    def test_radius_preserved(self, alpha, seed):
        xp = np.random.default_rng(seed).standard_normal((200, 2)) * 3
        x = spiral_twist(xp, alpha)
        np.testing.assert_allclose(np.hypot(*x.T), np.hypot(*xp.T), rtol=0, atol=1e-12)

    def test_mean_near_zero(self):
        x = gen_spiral(100_000, seed=1)
        assert np.all(np.abs(x.mean(axis=0)) <= 0.02)

    def test_reproducible(self):
        np.testing.assert_array_equal(gen_spiral(50, seed=3), gen_spiral(50, seed=3))

    def test_bad_covariance(self):
        with pytest.raises(ValueError):
            SpiralConfig(covariance=((1.0, 2.0), (2.0, 1.0)))


class TestWavePacket:
    def test_noiseless_peak(self):
        x, c = gen_wave_packet(3, WavePacketConfig(noise_std=0.0), seed=0, centers=50.0)
        assert np.all(np.argmax(x, axis=1) == 49)
        np.testing.assert_array_equal(x[:, 49], 1.0)

    def test_width_sites(self):
        x, _ = gen_wave_packet(1, WavePacketConfig(noise_std=0.0), centers=50.0)
        assert x[0, 49 - 9] == pytest.approx(math.exp(-1))
        assert x[0, 49 + 9] == pytest.approx(math.exp(-1))

    def test_site_variance(self):
        cfg = WavePacketConfig()
        x, c = gen_wave_packet(10_000, cfg, seed=2)
        assert np.all((c >= 30) & (c <= 70))
        # independent Monte-Carlo estimate of the bump's variance
        rng = np.random.default_rng(12345)
        j = np.arange(1, 101)
        cc = rng.uniform(30, 70, size=200_000)
        bump_var = np.exp(-((j[None, :] - cc[:, None]) ** 2) / 81.0).var(axis=0)
        np.testing.assert_allclose(x.var(axis=0), cfg.noise_std ** 2 + bump_var, rtol=0.05)

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            WavePacketConfig(center_range=(0.0, 70.0))


class TestDropPhysics:
    def test_lj_values(self):
        cfg = DropConfig()
        assert lj_potential(cfg.d_eq, cfg) == pytest.approx(0.5)
        assert lj_potential(1e6, cfg) == pytest.approx(0.5)

    def test_lj_continuous_at_cutoff(self):
        cfg = DropConfig()
        lo = lj_potential(np.nextafter(cfg.d_coll, 0), cfg)
        hi = lj_potential(cfg.d_coll, cfg)
        assert abs(lo - hi) <= 1e-12 * max(1.0, abs(hi))

    @settings(max_examples=50)
    @given(st.floats(0.0, 0.8), st.floats(0.1, 3.0))
    def test_area_fixed(self, dr, radius):
        a, b = ellipse_axes(dr, radius)
        assert a * b == pytest.approx(radius ** 2, rel=1e-15)

    def test_circle_placement(self):
        pos = place_particles(0.0, 1.3, DropConfig(), seed=4)
        assert pos.shape == (60, 2)
        assert np.all(np.hypot(*pos.T) <= 1.0)

    def test_placement_inside_rotated_ellipse(self):
        pos = place_particles(0.6, 0.7, DropConfig(), seed=5)
        a, b = ellipse_axes(0.6)
        assert np.all(inside_ellipse(pos, a, b, 0.7))

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            DropConfig(d_coll=0.3)

    def test_relax_reduces_energy(self):
        from rmi.datasets import drop_energy
        cfg = DropConfig()
        pos = place_particles(0.3, 0.2, cfg, seed=6)
        a, b = ellipse_axes(0.3)
        out = relax_drop(pos, 0.3, 0.2, cfg, temperature=0.0)
        assert drop_energy(out, a, b, 0.2, cfg) < drop_energy(pos, a, b, 0.2, cfg)


@pytest.fixture(scope="module")
def drops():
    return gen_liquid_drop(100, seed=7)


class TestLiquidDrop:
    def test_shapes_and_labels(self, drops):
        x, labels = drops
        assert x.shape == (100, 120)
        assert np.all((labels[:, 0] >= 0) & (labels[:, 0] <= 0.8))
        assert np.all((labels[:, 1] >= 0) & (labels[:, 1] <= math.pi))

    def test_inside_fraction(self, drops):
        x, labels = drops
        frac = []
        for row, (dr, th) in zip(x, labels):
            a, b = ellipse_axes(dr)
            frac.append(inside_ellipse(row.reshape(-1, 2), a, b, th).mean())
        assert np.mean(frac) >= 0.95

    def test_min_distance(self, drops):
        x, _ = drops
        ok = []
        for row in x:
            p = row.reshape(-1, 2)
            d = np.hypot(*(p[:, None, :] - p[None, :, :]).transpose(2, 0, 1))
            d[np.diag_indices(60)] = np.inf
            ok.append(d.min() >= 0.5 * 0.27)
        assert np.mean(ok) >= 0.9

    def test_per_sample_streams(self, drops):
        x, labels = drops
        # sample i depends only on (seed, i)
        tail, tail_labels = gen_liquid_drop(3, seed=7)
        np.testing.assert_array_equal(tail, x[:3])
        np.testing.assert_array_equal(tail_labels, labels[:3])


class TestFiles:
    def test_roundtrip(self, tmp_path):
        x, labels, cfg = generate("wavepacket", 20, 1, {"noise_std": 0.1})
        paths = save_dataset(tmp_path / "wp.csv", x, {"config": cfg}, labels, ["center"])
        assert [p.name for p in paths] == ["wp.csv", "wp.meta.json", "wp.labels.csv"]
        x2, l2, meta = load_dataset(tmp_path / "wp")
        np.testing.assert_array_equal(x, x2)
        np.testing.assert_array_equal(labels, l2)
        assert meta["config"]["noise_std"] == 0.1

    def test_paths(self):
        assert dataset_paths("a/b.csv")[1].name == "b.meta.json"

    def test_unknown_system(self):
        with pytest.raises(ValueError):
            generate("galaxy", 5, 0)
