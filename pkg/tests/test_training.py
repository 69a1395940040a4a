import math

import numpy as np
import pytest

from rmi.core import DegenerateFeatureError, compute_rmi
from rmi.datasets import SpiralConfig, gen_spiral, gen_wave_packet
from rmi.entropy import GridSpec
from rmi.features import Layer, Mlp, pca_fit
from rmi.training import (
    PRESETS,
    Adam,
    RMSprop,
    SGD,
    TrainingAborted,
    TrainingConfig,
    TrainingHistory,
    cost_gradient,
    make_optimizer,
    particle_shuffle_sampler,
    preset,
    read_history,
    schedule_factor,
    total_cost,
    train_feature,
    whitening_frame,
)


def linear_model(w):
    return Mlp([Layer(np.atleast_2d(w), np.zeros(1), "linear")])


class TestConfig:
    def test_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            TrainingConfig.from_dict({"learning_rte": 1e-3})

    @pytest.mark.parametrize("kw", [
        dict(learning_rate=0.0),
        dict(optimizer="lbfgs"),
        dict(reg_A=1.0, reg_tau=0.0),
        dict(reg_B=1.0, sigma_target=0.0),
        dict(dtype="float16"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainingConfig(**kw)

    def test_presets(self):
        sizes, act, cfg = preset("wavepacket")
        assert sizes == [100, 70, 70, 1] and act == "tanh"
        assert (cfg.optimizer, cfg.learning_rate, cfg.batch_size) == ("adam", 5e-3, 700)
        assert (cfg.reg_A, cfg.reg_tau, cfg.reg_B) == (100.0, 1000.0, 5.0)
        assert PRESETS["drop"]["sizes"] == [120, 800, 2]
        assert preset("spiral", steps=7)[2].steps == 7

    def test_desk_scale(self):
        cfg = preset("drop", desk=True)[2]
        assert (cfg.batch_size, cfg.steps, cfg.learning_rate) == (2000, 10_000, 1e-3)
        assert cfg.optimizer == "rmsprop" and cfg.reg_A == 15.0 and cfg.whiten
        assert not preset("drop")[2].whiten
        assert preset("drop", desk=True, steps=3)[2].steps == 3


class TestParticleShuffle:
    """Pool sampler that relabels particles."""

    def test_rows_are_relabeled_pool_rows(self):
        pool = np.random.default_rng(0).standard_normal((10, 12))
        x = particle_shuffle_sampler(pool)(np.random.default_rng(1), 4)
        assert x.shape == (4, 12)
        for row in x:
            parts = {tuple(p) for p in row.reshape(6, 2)}
            hits = [i for i, r in enumerate(pool) if {tuple(p) for p in r.reshape(6, 2)} == parts]
            assert len(hits) == 1

    def test_pair_structure_kept(self):
        # coordinates of one particle stay together
        pool = np.tile(np.arange(8.0), (5, 1))
        x = particle_shuffle_sampler(pool)(np.random.default_rng(2), 5)
        np.testing.assert_array_equal(x[:, 1::2], x[:, 0::2] + 1)
        assert not np.all(x == pool)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            particle_shuffle_sampler(np.zeros((3, 5)))


class TestCost:
    @pytest.fixture(scope="class")
    @staticmethod
    def batch():
        return gen_wave_packet(700, seed=0)[0]

    @pytest.fixture(scope="class")
    @staticmethod
    def model():
        return Mlp.init([100, 70, 70, 1], "tanh", np.random.default_rng(0))

    def test_regularizers_off(self, batch, model):
        cfg = TrainingConfig(reg_A=0.0, reg_B=0.0)
        t = total_cost(model, batch, 0, cfg)
        assert t.cost == -t.rmi
        assert t.rmi == pytest.approx(compute_rmi(batch, model, t.grid).value, abs=1e-12)

    def test_schedule(self):
        cfg = TrainingConfig(reg_A=100.0, reg_tau=1000.0)
        assert schedule_factor(1000, cfg) == pytest.approx(100 * math.exp(-1))
        assert schedule_factor(10**6, cfg) < 1e-300 + 1e-12

    def test_grad_pen_uses_frobenius(self, batch, model):
        cfg = TrainingConfig(reg_A=100.0, reg_tau=1000.0)
        t = total_cost(model, batch, 1000, cfg)
        frob = np.sqrt(np.sum(model.jacobian(batch) ** 2, axis=(1, 2)))
        assert t.grad_pen == pytest.approx(100 * math.exp(-1) * frob.mean())

    def test_kl_closed_form(self, batch, model):
        cfg = TrainingConfig(reg_B=1.0, sigma_target=2.0)
        t = total_cost(model, batch, 0, cfg)
        y = model.value(batch)
        expect = -t.entropy + np.mean(y ** 2) / 8 + 0.5 * np.log(2 * np.pi * 4)
        assert t.kl == pytest.approx(expect)

    def test_full_gradient_fd(self, batch, model):
        cfg = TrainingConfig(reg_A=100.0, reg_tau=1000.0, reg_B=5.0)
        m = model.copy()
        grid = total_cost(m, batch, 10, cfg).grid
        grads = cost_gradient(m, batch, cfg, 10, grid)
        rng = np.random.default_rng(1)
        h = 1e-6
        for _ in range(10):
            li = rng.integers(len(grads))
            p, g = m.parameters()[li], grads[li]
            idx = tuple(rng.integers(0, s) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            up = total_cost(m, batch, 10, cfg, grid).cost
            p[idx] = old - h
            down = total_cost(m, batch, 10, cfg, grid).cost
            p[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(g[idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)

    def test_penalty_gradient_linear(self):
        """-ln||w|| has gradient -w/||w||^2."""
        w = np.array([[3.0, -1.0, 2.0]])
        m = linear_model(w)
        x = np.random.default_rng(2).standard_normal((50, 3))
        cache = m.forward(x, jacobian=True)
        jac = cache["jac"]
        djac = -np.linalg.solve(jac @ np.swapaxes(jac, 1, 2), jac) / len(x)
        grads, _ = m.backward(cache, djac=djac)
        np.testing.assert_allclose(grads[0], -w / np.sum(w ** 2), rtol=1e-12)

    def test_output_rescaling_direction(self, batch, model):
        cfg = TrainingConfig()
        delta = 1e-4
        vals = []
        for c in (1 - delta, 1 + delta):
            m = model.copy()
            m.layers[-1].weight *= c
            m.layers[-1].bias *= c
            vals.append(total_cost(m, batch, 0, cfg).rmi)
        assert abs(vals[1] - vals[0]) / (2 * delta) <= 1e-3

    def test_float32_close_to_float64(self, batch, model):
        cfg = TrainingConfig(reg_A=1.0, reg_B=1.0)
        a = total_cost(model, batch, 0, cfg)
        b = total_cost(model.astype(np.float32), batch, 0, cfg, a.grid)
        assert b.rmi == pytest.approx(a.rmi, abs=1e-3)


class TestWhitenedEntropy:
    """Entropy binned in the batch's decorrelated frame."""

    @staticmethod
    def correlated(rho, n=20_000, seed=3):
        c = np.array([[1.0, rho], [rho, 1.0]])
        x = np.random.default_rng(seed).multivariate_normal([0, 0], c, size=n)
        h = np.log(2 * np.pi * np.e) + 0.5 * np.log(np.linalg.det(c))
        return x, h

    def test_resolves_thin_direction(self):
        x, h = self.correlated(0.9995)
        model = Mlp([Layer(np.eye(2), np.zeros(2), "linear")])
        plain = total_cost(model, x, 0, TrainingConfig())
        white = total_cost(model, x, 0, TrainingConfig(whiten=True))
        # the axis-aligned grid smooths the thin direction and overestimates
        assert plain.entropy - h > 0.5
        assert white.entropy == pytest.approx(h, abs=0.05)

    def test_frame(self):
        x, _ = self.correlated(0.6)
        fr = whitening_frame(x)
        z = (x - fr.mu) @ fr.w
        np.testing.assert_allclose(z.T @ z / len(z), np.eye(2), atol=1e-10)
        assert fr.log_det_w == pytest.approx(np.log(abs(np.linalg.det(fr.w))))

    def test_collinear(self):
        t = np.linspace(-1, 1, 50)
        with pytest.raises(DegenerateFeatureError):
            whitening_frame(np.stack([t, 2 * t], axis=1))

    def test_scale_invariant(self):
        x = np.random.default_rng(4).standard_normal((500, 5))
        model = Mlp.init([5, 8, 2], "tanh", np.random.default_rng(5))
        cfg = TrainingConfig(whiten=True)
        a = total_cost(model, x, 0, cfg).rmi
        model.layers[-1].weight *= 3.0
        model.layers[-1].bias *= 3.0
        assert total_cost(model, x, 0, cfg).rmi == pytest.approx(a, abs=1e-9)

    def test_ignored_in_1d(self):
        x = np.random.default_rng(6).standard_normal((300, 3))
        model = Mlp.init([3, 4, 1], "tanh", np.random.default_rng(7))
        a = total_cost(model, x, 0, TrainingConfig())
        b = total_cost(model, x, 0, TrainingConfig(whiten=True))
        assert a.rmi == b.rmi and b.frame is None

    @pytest.mark.parametrize("k,whiten", [(1, False), (2, False), (2, True)])
    def test_fitted_grid_gradient_fd(self, k, whiten):
        """Auto-fitted grid and frame are differentiated too."""
        x = np.random.default_rng(10).standard_normal((200, 4))
        m = Mlp.init([4, 6, k], "tanh", np.random.default_rng(11))
        cfg = TrainingConfig(whiten=whiten, reg_B=0.5)
        grads = cost_gradient(m, x, cfg)
        h = 1e-6
        for li, p in enumerate(m.parameters()):
            for idx in list(np.ndindex(p.shape))[:6]:
                old = p[idx]
                p[idx] = old + h
                up = total_cost(m, x, 0, cfg).cost
                p[idx] = old - h
                down = total_cost(m, x, 0, cfg).cost
                p[idx] = old
                fd = (up - down) / (2 * h)
                assert abs(grads[li][idx] - fd) <= 1e-5 * max(abs(fd), 1e-3)

    def test_no_scale_drift(self):
        """Rescaling the output leaves -I~ flat along the scale direction."""
        x = np.random.default_rng(12).standard_normal((400, 5))
        m = Mlp.init([5, 8, 2], "tanh", np.random.default_rng(13))
        for whiten in (False, True):
            _, g = total_cost(m, x, 0, TrainingConfig(whiten=whiten), with_grad=True)
            last = m.layers[-1]
            along = np.sum(g[-2] * last.weight) + np.sum(g[-1] * last.bias)
            assert abs(along) <= 1e-9 * np.sqrt(sum(np.sum(a * a) for a in g))

    def test_given_frame_gradient_fd(self):
        x = np.random.default_rng(8).standard_normal((300, 6))
        m = Mlp.init([6, 10, 2], "tanh", np.random.default_rng(9))
        cfg = TrainingConfig(whiten=True, reg_A=2.0, reg_B=0.5)
        t = total_cost(m, x, 0, cfg)
        grads = cost_gradient(m, x, cfg, 0, t.grid, t.frame)
        h = 1e-6
        for li, p in enumerate(m.parameters()):
            idx = (0,) * p.ndim
            old = p[idx]
            p[idx] = old + h
            up = total_cost(m, x, 0, cfg, t.grid, frame=t.frame).cost
            p[idx] = old - h
            down = total_cost(m, x, 0, cfg, t.grid, frame=t.frame).cost
            p[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(grads[li][idx] - fd) <= 1e-5 * max(abs(fd), 1e-3)


class TestOptimizers:
    def test_sgd_step(self):
        theta = np.array([1.0])
        SGD(0.1).step([theta], [2 * theta])
        assert theta[0] == pytest.approx(0.8)

    @pytest.mark.parametrize("g", [3.0, -1e-3, 250.0])
    def test_adam_first_step(self, g):
        theta = np.array([0.5])
        Adam(0.01).step([theta], [np.array([g])])
        assert theta[0] - 0.5 == pytest.approx(-0.01 * np.sign(g), rel=1e-4)

    def test_rmsprop_converges(self):
        theta = np.array([1.0])
        opt = RMSprop(1e-2)
        for _ in range(500):
            opt.step([theta], [2 * theta])
        assert theta[0] ** 2 <= 1e-4

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError):
            make_optimizer("adam", 1e-3).step([np.zeros(2)], [np.array([np.nan, 0.0])])


class TestTrainFeature:
    def test_zero_steps(self):
        cfg = TrainingConfig(steps=0, seed=3)
        m, hist = train_feature(np.zeros((10, 2)), [2, 4, 1], cfg)
        ref = Mlp.init([2, 4, 1], "tanh", np.random.default_rng(np.random.SeedSequence(3).spawn(2)[0]))
        assert len(hist) == 0
        for a, b in zip(m.parameters(), ref.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_degenerate_aborts(self):
        m = Mlp([Layer(np.zeros((3, 2)), np.zeros(3), "tanh"), Layer(np.zeros((1, 3)), np.zeros(1), "linear")])
        x = np.random.default_rng(4).standard_normal((200, 2))
        with pytest.raises(TrainingAborted):
            train_feature(x, m, TrainingConfig(steps=50, batch_size=20))

    def test_reproducible(self):
        cfg = TrainingConfig(steps=30, batch_size=50, seed=5)
        src = lambda rng, n: gen_spiral(n, seed=rng)
        m1, h1 = train_feature(src, [2, 8, 1], cfg)
        m2, h2 = train_feature(src, [2, 8, 1], cfg)
        assert h1.rmi == h2.rmi
        for a, b in zip(m1.parameters(), m2.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_history_roundtrip(self, tmp_path):
        cfg = TrainingConfig(steps=20, batch_size=50)
        _, hist = train_feature(gen_spiral(500, seed=1), [2, 6, 2], cfg)
        assert len(hist) == 20
        path = tmp_path / "h.csv"
        hist.to_csv(path)
        back = read_history(path)
        assert list(back) == hist.header()
        assert "grid_lo_2" in back
        np.testing.assert_array_equal(back["rmi"], hist.rmi)
        assert np.all(np.isfinite(back["cost"]))

    def test_spiral_beats_pca(self):
        sizes, act, cfg = preset("spiral", steps=5000, seed=0)
        src = lambda rng, n: gen_spiral(n, seed=rng)
        model, hist = train_feature(src, sizes, cfg, act)
        x = gen_spiral(10_000, seed=99)
        nn = compute_rmi(x, model).value
        pca = compute_rmi(x, pca_fit(x, 1)).value
        assert nn >= pca - 0.05


class TestHistory:
    def test_degenerate_rows_are_nan(self):
        h = TrainingHistory()
        h.record(0, None, 1)
        assert h.degenerate == [True]
        assert math.isnan(h.rmi[0])
