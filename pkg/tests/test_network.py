import numpy as np
import pytest

from gnsm import autograd as ag
from gnsm.categorical import CategoricalSchema, block_sum
from gnsm.network import (
    ModelConfig,
    backward,
    film,
    forward,
    forward_taped,
    fourier_noise_embedding,
    init_parameters,
    load_checkpoint,
    network_scores,
    parameter_shapes,
    save_checkpoint,
    score_from_epsilon,
)
from gnsm.training import AdamState, categorical_loss


def _tiny(dtype="float64", **kw):
    cfg = dict(input_dim=5, n_scales=3, width=8, n_blocks=2, time_embedding_size=8, dtype=dtype)
    cfg.update(kw)
    return ModelConfig(**cfg)


def _randomize(params, seed, scale=0.3):
    # break the zero/identity init so every branch carries gradient
    rng = np.random.default_rng(seed)
    for w in params.weights.values():
        w += scale * rng.standard_normal(w.shape)
    return params


class TestAutograd:
    def test_single_product(self):
        x, w = ag.Var(np.array(3.0)), ag.Var(np.array(2.0), requires_grad=True)
        (g,) = ag.backward(x * w, [w])
        assert g == pytest.approx(3.0)

    def test_constant_loss_zero_grads(self):
        w = ag.Var(np.ones((2, 2)), requires_grad=True)
        loss = ag.sum_all(ag.Var(np.ones(3)))
        (g,) = ag.backward(loss, [w])
        np.testing.assert_array_equal(g, 0.0)

    def test_non_scalar_rejected(self):
        w = ag.Var(np.ones(3), requires_grad=True)
        with pytest.raises(ag.TapeError):
            ag.backward(w * 2.0, [w])

    def test_untaped_loss_rejected(self):
        w = ag.Var(np.ones(3), requires_grad=True)
        with pytest.raises(ag.TapeError):
            ag.backward(np.float64(1.0), [w])

    @pytest.mark.parametrize("op", ["gelu", "leaky", "ln", "softmax", "logsoftmax"])
    def test_fused_ops_match_finite_differences(self, op):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((3, 5))
        c = rng.standard_normal((3, 5))
        starts, sizes = np.array([0, 2]), np.array([2, 3])
        fns = {
            "gelu": ag.gelu,
            "leaky": lambda v: ag.leaky_relu(v, 0.1),
            "ln": ag.layer_norm,
            "softmax": lambda v: ag.segment_softmax(v, starts, sizes),
            "logsoftmax": lambda v: ag.segment_log_softmax(v, starts, sizes),
        }

        def f(v):
            return ag.sum_all(fns[op](v) * c)

        x = ag.Var(x0.copy(), requires_grad=True)
        (g,) = ag.backward(f(x), [x])
        h = 1e-6
        fd = np.empty_like(x0)
        for idx in np.ndindex(x0.shape):
            e = np.zeros_like(x0)
            e[idx] = h
            fd[idx] = (f(ag.Var(x0 + e)).value - f(ag.Var(x0 - e)).value) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)

    def test_scalar_keeps_float32(self):
        x = ag.Var(np.ones(3, dtype=np.float32), requires_grad=True)
        y = ag.sum_all(x * 2.0 + 1.0)
        assert y.value.dtype == np.float32


class TestEmbedding:
    def test_unit_temperature(self):
        p = init_parameters(_tiny(), seed=0)
        e = fourier_noise_embedding(1.0, p)
        np.testing.assert_array_equal(e[:4], 0.0)
        np.testing.assert_array_equal(e[4:], 1.0)

    def test_pythagorean(self):
        p = init_parameters(_tiny(time_embedding_size=128), seed=0)
        e = fourier_noise_embedding(np.array([2.0, 7.3, 20.0]), p)
        np.testing.assert_allclose(e[:, :64] ** 2 + e[:, 64:] ** 2, 1.0, atol=1e-6)

    def test_distinct_temperatures(self):
        p = init_parameters(_tiny(time_embedding_size=128), seed=0)
        e = fourier_noise_embedding(np.array([2.0, 2.2575]), p)
        assert not np.allclose(e[0], e[1])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            fourier_noise_embedding(0.0, init_parameters(_tiny(), 0))


class TestFilm:
    def setup_method(self):
        self.cfg = _tiny()
        self.params = init_parameters(self.cfg, seed=1)
        self.t = fourier_noise_embedding(np.array([3.0]), self.params)

    def test_identity_init(self):
        h = np.random.default_rng(0).standard_normal((4, 8))
        np.testing.assert_allclose(film(h, self.t, self.params.weights, "blk0."), h)

    def test_zero_input_isolates_shift(self):
        P = _randomize(self.params.copy(), 2).weights
        shift = self.t @ P["blk0.film.shift.W"] + P["blk0.film.shift.b"]
        np.testing.assert_allclose(film(np.zeros((1, 8)), self.t, P, "blk0."), shift)

    def test_affine(self):
        P = _randomize(self.params.copy(), 3).weights
        rng = np.random.default_rng(1)
        h1, h2 = rng.standard_normal((2, 1, 8))
        f = lambda h: film(h, self.t, P, "blk0.")  # noqa: E731
        np.testing.assert_allclose(f(h1 + h2) - f(h1) - f(h2) + f(np.zeros((1, 8))), 0.0, atol=1e-6)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            film(np.zeros((1, 7)), self.t, self.params.weights, "blk0.")


class TestForward:
    def test_shape_and_determinism(self):
        cfg = _tiny(dtype="float32")
        p = _randomize(init_parameters(cfg, 0), 0)
        x = np.random.default_rng(0).standard_normal((6, 5))
        a = forward(x, 2.0, p, cfg)
        assert a.shape == (6, 5)
        np.testing.assert_array_equal(a, forward(x, 2.0, p, cfg))

    def test_input_width_checked(self):
        cfg = _tiny()
        with pytest.raises(ValueError):
            forward(np.zeros((1, 4)), 2.0, init_parameters(cfg, 0), cfg)

    def test_zero_init_head_outputs_zero(self):
        cfg = _tiny()
        x = np.random.default_rng(0).standard_normal((3, 5))
        np.testing.assert_array_equal(forward(x, 5.0, init_parameters(cfg, 0), cfg), 0.0)

    def test_zero_branch_oracle(self):
        cfg = _tiny()
        p = _randomize(init_parameters(cfg, 0), 5)
        for i in range(cfg.n_blocks):
            p.weights[f"blk{i}.dense2.W"][:] = 0.0
            p.weights[f"blk{i}.dense2.b"][:] = 0.0
        P = p.weights
        x = np.random.default_rng(1).standard_normal((4, 5))
        h = x @ P["in.W"] + P["in.b"]
        mu = h.mean(-1, keepdims=True)
        z = (h - mu) / np.sqrt(h.var(-1, keepdims=True) + 1e-5) * P["head.ln.g"] + P["head.ln.b"]
        z = np.where(z > 0, z, 0.01 * z)
        np.testing.assert_allclose(forward(x, 3.0, p, cfg), z @ P["head.out.W"] + P["head.out.b"],
                                   rtol=1e-12, atol=1e-12)

    def test_noise_conditioning_is_effective(self):
        cfg = _tiny(time_embedding_size=16)
        p = _randomize(init_parameters(cfg, 0), 6)
        x = np.random.default_rng(2).standard_normal((1, 5))
        assert not np.allclose(forward(x, 2.0, p, cfg), forward(x, 20.0, p, cfg))

    def test_per_row_temperatures_match_scalar_calls(self):
        cfg = _tiny()
        p = _randomize(init_parameters(cfg, 0), 7)
        x = np.random.default_rng(3).standard_normal((4, 5))
        lam = np.array([2.0, 5.0, 2.0, 20.0])
        rows = np.concatenate([forward(x[i:i + 1], lam[i], p, cfg) for i in range(4)])
        np.testing.assert_allclose(forward(x, lam, p, cfg), rows, rtol=1e-12)


class TestInit:
    def test_same_seed_same_params(self):
        cfg = _tiny()
        a, b = init_parameters(cfg, 3), init_parameters(cfg, 3)
        np.testing.assert_array_equal(a.flat, b.flat)
        np.testing.assert_array_equal(a.fourier, b.fourier)
        np.testing.assert_array_equal(a.ema_flat, a.flat)

    def test_he_variance(self):
        cfg = ModelConfig(input_dim=1024, n_scales=2, width=1024, n_blocks=1, time_embedding_size=8)
        w = init_parameters(cfg, 0).weights["blk0.dense1.W"]
        assert w.size >= 10**6
        assert abs(w.var() / (2 / 1024) - 1) < 0.1

    def test_shapes_follow_config(self):
        cfg = _tiny()
        p = init_parameters(cfg, 0)
        for k, shape in parameter_shapes(cfg).items():
            assert p.weights[k].shape == shape
            assert p.ema[k].shape == shape


class TestScores:
    def test_constant_block_gives_zero(self):
        s = CategoricalSchema.from_sizes([3, 2])
        np.testing.assert_allclose(score_from_epsilon(np.full((1, 5), 4.2), 7.0, s), 0.0, atol=1e-14)

    def test_hand_example(self):
        s = CategoricalSchema.from_sizes([2])
        np.testing.assert_allclose(score_from_epsilon(np.array([np.log(3.0), 0.0]), 2.0, s),
                                   [[1.0, -1.0]], atol=1e-14)

    def test_zero_sum(self):
        s = CategoricalSchema.from_sizes([2, 3, 7])
        rng = np.random.default_rng(0)
        sc = score_from_epsilon(5 * rng.standard_normal((1000, 12)), rng.uniform(2, 20, (1000,)), s)
        assert np.max(np.abs(block_sum(sc, s))) < 1e-10

    def test_continuous_scores_divide_by_sigma(self):
        s = CategoricalSchema.from_sizes([2], n_continuous=1)
        out = np.array([[0.0, 0.0, 0.5]])
        np.testing.assert_allclose(network_scores(out, 2.0, s, 0.25)[0, 2], 2.0)


def test_gradient_matches_finite_differences():
    schema = CategoricalSchema.from_sizes([2, 3])
    cfg = _tiny()
    p = _randomize(init_parameters(cfg, 0), 9)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 5))
    lam = np.array([2.0, 6.0, 20.0])
    eps = rng.standard_normal((3, 5))

    def loss_of(params):
        return categorical_loss(forward(x, lam, params, cfg), eps, lam, schema)

    out, leaves = forward_taped(x, lam, p, cfg)
    grads = backward(categorical_loss(out, eps, lam, schema), leaves)
    h = 1e-6
    for name, w in p.weights.items():
        fd = np.empty_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            up = loss_of(p)
            w[idx] = old - h
            down = loss_of(p)
            w[idx] = old
            fd[idx] = (up - down) / (2 * h)
        err = np.max(np.abs(fd - grads[name])) / max(np.max(np.abs(grads[name])), 1.0)
        assert err < 1e-4, name


def test_checkpoint_round_trip(tmp_path):
    cfg = _tiny(dtype="float32")
    p = _randomize(init_parameters(cfg, 0), 1)
    p.ema_flat[:] = p.flat * 0.5
    opt = AdamState(np.arange(p.flat.size, dtype=np.float32), np.ones(p.flat.size, dtype=np.float32), 7)
    path = tmp_path / "c.npz"
    save_checkpoint(path, cfg, p, "abc", 12, opt.to_tree(), {"note": 1})
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.schema_hash == "abc" and ck.step == 12 and ck.extra == {"note": 1}
    for k in p.weights:
        np.testing.assert_array_equal(ck.params.weights[k], p.weights[k])
        np.testing.assert_array_equal(ck.params.ema[k], p.ema[k])
    np.testing.assert_array_equal(ck.params.fourier, p.fourier)
    st = AdamState.from_tree(ck.optimizer)
    np.testing.assert_array_equal(st.m, opt.m)
    assert st.step == 7
