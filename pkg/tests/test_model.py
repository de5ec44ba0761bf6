import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from atlbp import kernels
from atlbp import model as mdl
from atlbp import numgrad as ng
from atlbp.errors import ConfigError, DataError, NumericDomainError, UsageError

SMALL = dict(dim_psi=5, dim_rho=12, dim_xi=8, dim_ca=3, dim_cv=3, hidden_units=7, num_classes=3)


def make_segment(rng, cfg, T, label=0, seg_id="u/s/0"):
    return SimpleNamespace(
        psi=rng.normal(size=(T, cfg.dim_psi)),
        rho=rng.normal(size=(T, cfg.dim_rho)),
        xi=rng.normal(size=(T, cfg.dim_xi)),
        label=label,
        segment_id=seg_id,
    )


def random_params(cfg, seed, scale=0.5):
    params = mdl.ModelParams(cfg)
    params.flat[:] = np.random.default_rng(seed).normal(scale=scale, size=params.flat.size)
    return params


# --------------------------------------------------------------------------
# independent scalar oracles

def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def oracle_cell(W, U, b, x, h, c):
    H = len(h)
    a = [sum(W[r][j] * x[j] for j in range(len(x))) + sum(U[r][k] * h[k] for k in range(H)) + b[r]
         for r in range(4 * H)]
    i = [sig(a[k]) for k in range(H)]
    f = [sig(a[H + k]) for k in range(H)]
    g = [math.tanh(a[2 * H + k]) for k in range(H)]
    o = [sig(a[3 * H + k]) for k in range(H)]
    c2 = [f[k] * c[k] + i[k] * g[k] for k in range(H)]
    h2 = [o[k] * math.tanh(c2[k]) for k in range(H)]
    return h2, c2


def oracle_probs(params, seg):
    cfg = params.config
    P = {n: params[n].tolist() for n in params.names()}
    xs = []
    for t in range(len(seg.psi)):
        x = list(seg.psi[t])
        if cfg.uses_affect:
            x += [sum(P["ca.W"][r][j] * seg.rho[t][j] for j in range(cfg.dim_rho)) + P["ca.b"][r] for r in range(cfg.dim_ca)]
        if cfg.uses_identity:
            x += [sum(P["cv.W"][r][j] * seg.xi[t][j] for j in range(cfg.dim_xi)) + P["cv.b"][r] for r in range(cfg.dim_cv)]
        xs.append(x)
    for l in range(1, cfg.num_layers + 1):
        h = [0.0] * cfg.hidden_units
        c = [0.0] * cfg.hidden_units
        outs = []
        for x in xs:
            h, c = oracle_cell(P[f"lstm{l}.W"], P[f"lstm{l}.U"], P[f"lstm{l}.b"], x, h, c)
            outs.append(h)
        xs = outs
    top = xs[-1]
    logits = [sum(P["head.W"][r][k] * top[k] for k in range(cfg.hidden_units)) + P["head.b"][r]
              for r in range(cfg.num_classes)]
    e = [math.exp(z) for z in logits]
    return [v / sum(e) for v in e]


# --------------------------------------------------------------------------
# configuration and shapes

class TestConfig:
    def test_default_fused_dimension(self):
        assert mdl.ModelConfig().fused_dim == 149

    def test_mode_dimensions(self):
        assert mdl.ModelConfig(embedding_mode="none").fused_dim == 49
        assert mdl.ModelConfig(embedding_mode="affect_only").fused_dim == 149
        assert mdl.ModelConfig(embedding_mode="identity_only").fused_dim == 149
        assert mdl.ModelConfig(embedding_mode="affect_only", dim_ca=50).fused_dim == 99

    def test_replace_reresolves_dims(self):
        cfg = mdl.ModelConfig().replace(embedding_mode="affect_only")
        assert cfg.dim_ca == 100

    @pytest.mark.parametrize("mode", mdl.EMBEDDING_MODES)
    @pytest.mark.parametrize("layers", [1, 2, 3])
    def test_param_count_matches_layout(self, mode, layers):
        cfg = mdl.ModelConfig(embedding_mode=mode, num_layers=layers, hidden_units=11)
        assert mdl.ModelParams(cfg).flat.size == mdl.param_count(cfg)

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            mdl.ModelConfig(batch_size=4)
        with pytest.raises(ConfigError):
            mdl.ModelConfig(embedding_mode="face")
        with pytest.raises(ConfigError):
            mdl.ModelConfig(hidden_units=0)
        with pytest.raises(ConfigError):
            mdl.ModelConfig.from_dict({"hidden": 3})


class TestBlocks:
    def test_zero_compression(self):
        params = mdl.ModelParams(mdl.ModelConfig(**SMALL))
        ca, cv = mdl.compress_embeddings(params, np.ones(12), np.ones(8))
        np.testing.assert_array_equal(ca, np.zeros(3))
        np.testing.assert_array_equal(cv, np.zeros(3))

    def test_full_size_compression(self):
        cfg = mdl.ModelConfig()
        params = mdl.ModelParams(cfg)
        ca, cv = mdl.compress_embeddings(params, np.ones(8192), np.ones(2622))
        assert ca.shape == (50,) and cv.shape == (50,)
        assert mdl.fuse_features(np.zeros(49), ca, cv).shape == (149,)

    def test_compression_equals_affine(self):
        cfg = mdl.ModelConfig(**SMALL)
        params = random_params(cfg, 0)
        rng = np.random.default_rng(1)
        rho, xi = rng.normal(size=12), rng.normal(size=8)
        ca, cv = mdl.compress_embeddings(params, rho, xi)
        np.testing.assert_allclose(ca, params["ca.W"] @ rho + params["ca.b"], atol=1e-12)
        np.testing.assert_allclose(cv, params["cv.W"] @ xi + params["cv.b"], atol=1e-12)

    def test_missing_required_embedding(self):
        params = mdl.ModelParams(mdl.ModelConfig(**SMALL))
        with pytest.raises(DataError):
            mdl.compress_embeddings(params, None, np.ones(8))

    def test_fuse_order(self):
        out = mdl.fuse_features(np.array([1.0]), np.array([2.0, 3.0]), np.array([4.0]))
        np.testing.assert_array_equal(out, [1, 2, 3, 4])
        np.testing.assert_array_equal(mdl.fuse_features(np.array([1.0, 2.0])), [1, 2])

    def test_zero_cell(self):
        H, D = 4, 3
        h, c = mdl.lstm_cell_step(np.zeros((4 * H, D)), np.zeros((4 * H, H)), np.zeros(4 * H),
                                  np.arange(3.0), np.zeros(H), np.zeros(H))
        np.testing.assert_array_equal(h, np.zeros(H))
        np.testing.assert_array_equal(c, np.zeros(H))

    def test_forget_gate_limit_preserves_cell(self):
        H, D = 3, 2
        b = np.zeros(4 * H)
        b[:H] = -800.0          # input gate -> 0
        b[H:2 * H] = 800.0      # forget gate -> 1
        rng = np.random.default_rng(0)
        c = rng.normal(size=H)
        h = rng.normal(size=H)
        c0 = c.copy()
        for t in range(10):
            h, c = mdl.lstm_cell_step(rng.normal(size=(4 * H, D)), rng.normal(size=(4 * H, H)), b,
                                      rng.normal(size=D), h, c, t)
            assert np.array_equal(c, c0)

    def test_cell_matches_hand_recurrence(self):
        rng = np.random.default_rng(5)
        H, D = 3, 2
        W, U, b = rng.normal(size=(4 * H, D)), rng.normal(size=(4 * H, H)), rng.normal(size=4 * H)
        h, c = np.zeros(H), np.zeros(H)
        ho, co = [0.0] * H, [0.0] * H
        for t in range(6):
            x = rng.normal(size=D)
            h, c = mdl.lstm_cell_step(W, U, b, x, h, c, t)
            ho, co = oracle_cell(W.tolist(), U.tolist(), b.tolist(), x.tolist(), ho, co)
            np.testing.assert_allclose(h, ho, atol=1e-12)
            np.testing.assert_allclose(c, co, atol=1e-12)

    def test_non_finite_state_names_timestep(self):
        H = 2
        with pytest.raises(NumericDomainError, match="timestep 4"):
            mdl.lstm_cell_step(np.zeros((8, 1)), np.zeros((8, H)), np.zeros(8), np.zeros(1),
                               np.array([np.nan, 0.0]), np.zeros(H), t=4)


class TestClassify:
    def test_zero_params_uniform(self):
        cfg = mdl.ModelConfig(**SMALL)
        seg = make_segment(np.random.default_rng(0), cfg, 6)
        np.testing.assert_allclose(mdl.classify_sequence(mdl.ModelParams(cfg), seg), np.full(3, 1 / 3), atol=1e-15)

    def test_single_frame_is_one_step(self):
        cfg = mdl.ModelConfig(**SMALL)
        params = random_params(cfg, 2)
        seg = make_segment(np.random.default_rng(3), cfg, 1)
        ca, cv = mdl.compress_embeddings(params, seg.rho[0], seg.xi[0])
        x = mdl.fuse_features(seg.psi[0], ca, cv)
        z = np.zeros(cfg.hidden_units)
        h1, _ = mdl.lstm_cell_step(params["lstm1.W"], params["lstm1.U"], params["lstm1.b"], x, z, z)
        h2, _ = mdl.lstm_cell_step(params["lstm2.W"], params["lstm2.U"], params["lstm2.b"], h1, z, z)
        expected = ng.softmax(params["head.W"] @ h2 + params["head.b"])
        np.testing.assert_allclose(mdl.classify_sequence(params, seg), expected, atol=1e-13)

    def test_unrolled_oracle(self):
        cfg = mdl.ModelConfig(dim_psi=3, dim_rho=5, dim_xi=4, dim_ca=2, dim_cv=2, hidden_units=4, num_classes=3)
        params = random_params(cfg, 7)
        seg = make_segment(np.random.default_rng(8), cfg, 5)
        np.testing.assert_allclose(mdl.classify_sequence(params, seg), oracle_probs(params, seg), atol=1e-12)

    def test_fused_features_shape(self):
        cfg = mdl.ModelConfig(**SMALL)
        seg = make_segment(np.random.default_rng(0), cfg, 4)
        assert mdl.fused_features(random_params(cfg, 0), seg).shape == (4, cfg.fused_dim)

    def test_probabilities_on_simplex(self):
        cfg = mdl.ModelConfig(**SMALL)
        rng = np.random.default_rng(4)
        for seed in range(10):
            p = mdl.classify_sequence(random_params(cfg, seed, scale=3.0), make_segment(rng, cfg, 1 + seed))
            assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12

    def test_empty_segment(self):
        cfg = mdl.ModelConfig(**SMALL)
        seg = make_segment(np.random.default_rng(0), cfg, 2)
        seg.psi = np.zeros((0, 5))
        with pytest.raises(DataError):
            mdl.classify_sequence(mdl.ModelParams(cfg), seg)

    def test_dimension_mismatch_is_config_error(self):
        cfg = mdl.ModelConfig(**SMALL)
        seg = make_segment(np.random.default_rng(0), mdl.ModelConfig(**{**SMALL, "dim_psi": 6}), 2)
        with pytest.raises(ConfigError):
            mdl.predict(mdl.ModelParams(cfg), seg)

    def test_missing_embedding_names_segment_and_frame(self):
        cfg = mdl.ModelConfig(**SMALL)
        seg = make_segment(np.random.default_rng(0), cfg, 3, seg_id="u7/s1/4")
        seg.rho[2] = np.nan
        with pytest.raises(DataError, match=r"u7/s1/4.*frame 2"):
            mdl.classify_sequence(mdl.ModelParams(cfg), seg)

    def test_decide_tie_break(self):
        assert mdl.decide(np.full(7, 1 / 7)) == 0
        assert mdl.decide(np.array([0.1, 0.8, 0.1, 0, 0, 0, 0])) == 1


# --------------------------------------------------------------------------
# gradients

GRAD_VARIANTS = [
    dict(),
    dict(pooling="mean"),
    dict(compress_activation="tanh"),
    dict(embedding_mode="none"),
    dict(embedding_mode="affect_only", dim_ca=3),
    dict(num_layers=1),
]


@pytest.mark.parametrize("variant", GRAD_VARIANTS, ids=lambda v: ",".join(f"{k}={x}" for k, x in v.items()) or "default")
def test_fused_gradient_matches_finite_differences(variant):
    cfg = mdl.ModelConfig(**{**SMALL, **variant})
    params = random_params(cfg, 11)
    seg = make_segment(np.random.default_rng(12), cfg, 4, label=1)
    _, grad = mdl.loss_and_grad(params, seg)
    fd = ng.finite_difference_gradient(lambda _: mdl.segment_loss(params, seg), params.as_dict(), 1e-6)
    assert ng.max_relative_error(grad.as_dict(), fd) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_tape_and_fused_engines_agree(seed):
    rng = np.random.default_rng(seed)
    cfg = mdl.ModelConfig(**SMALL, pooling=("last", "mean")[seed % 2])
    params = random_params(cfg, 100 + seed)
    seg = make_segment(rng, cfg, int(rng.integers(1, 7)), label=int(rng.integers(0, 3)))
    l1, g1 = mdl.loss_and_grad(params, seg)
    l2, g2 = mdl.tape_gradients(params, seg, seg.label)
    assert l1 == pytest.approx(l2, abs=1e-12)
    np.testing.assert_allclose(g1.flat, g2.flat, atol=1e-12)


def test_kernel_backends_agree():
    if kernels.numba_kernels is None:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(0)
    T, H = 9, 6
    xw, U = rng.normal(size=(T, 4 * H)), rng.normal(size=(4 * H, H)) * 0.5
    h0, c0 = rng.normal(size=H), rng.normal(size=H)
    fa = kernels.numpy_kernels.lstm_forward(xw, U, h0, c0)
    fb = kernels.numba_kernels.lstm_forward(xw, U, h0, c0)
    for a, b in zip(fa, fb):
        np.testing.assert_allclose(a, b, atol=1e-13)
    dh = rng.normal(size=(T, H))
    ba = kernels.numpy_kernels.lstm_backward(dh, *fa, U, h0, c0)
    bb = kernels.numba_kernels.lstm_backward(dh, *fb, U, h0, c0)
    for a, b in zip(ba, bb):
        np.testing.assert_allclose(a, b, atol=1e-12)
    p1, p2 = rng.normal(size=20), None
    p2 = p1.copy()
    g = rng.normal(size=20)
    m1, v1, m2, v2 = np.zeros(20), np.zeros(20), np.zeros(20), np.zeros(20)
    kernels.numpy_kernels.adam_update(p1, g, m1, v1, 0.01, 0.9, 0.999, 1e-8, 0.1, 0.001)
    kernels.numba_kernels.adam_update(p2, g, m2, v2, 0.01, 0.9, 0.999, 1e-8, 0.1, 0.001)
    np.testing.assert_allclose(p1, p2, atol=1e-15)


def test_unused_compression_gets_zero_gradient():
    cfg = mdl.ModelConfig(**SMALL)
    params = random_params(cfg, 0)
    params["lstm1.W"][:, 5:] = 0.0  # fused columns fed by c_a and c_v
    seg = make_segment(np.random.default_rng(0), cfg, 3)
    _, grad = mdl.loss_and_grad(params, seg)
    for name in ("ca.W", "ca.b", "cv.W", "cv.b"):
        assert np.array_equal(grad[name], np.zeros_like(grad[name]))


# --------------------------------------------------------------------------
# training

def separable_segments(n, cfg, seed):
    """Class k lights up psi dimension k with a ramp; otherwise small noise."""
    rng = np.random.default_rng(seed)
    segs = []
    for j in range(n):
        label = j % cfg.num_classes
        T = int(rng.integers(3, 7))
        seg = make_segment(rng, cfg, T, label=label, seg_id=f"u{j}/s/0")
        seg.psi *= 0.1
        seg.rho *= 0.1
        seg.xi *= 0.1
        seg.psi[:, label] += np.linspace(0.5, 1.5, T)
        segs.append(seg)
    return segs


class TestTrain:
    cfg = mdl.ModelConfig(**SMALL, learning_rate=1e-2, epochs=3)

    def test_step_count(self):
        cfg = self.cfg.replace(epochs=30, learning_rate=3e-5)
        res = mdl.train(cfg, separable_segments(40, cfg, 0))
        assert res.steps == 1200
        assert len(res.losses) == 30

    def test_deterministic(self):
        segs = separable_segments(12, self.cfg, 1)
        a = mdl.train(self.cfg, segs)
        b = mdl.train(self.cfg, segs)
        assert a.params.flat.tobytes() == b.params.flat.tobytes()
        assert a.losses == b.losses

    def test_seed_changes_result(self):
        segs = separable_segments(12, self.cfg, 1)
        a = mdl.train(self.cfg, segs)
        b = mdl.train(self.cfg.replace(seed=1), segs)
        assert not np.array_equal(a.params.flat, b.params.flat)

    def test_learnable(self):
        ratios = []
        for seed in range(5):
            cfg = self.cfg.replace(seed=seed, epochs=15)
            res = mdl.train(cfg, separable_segments(50, cfg, seed))
            ratios.append(res.losses[-1] / res.losses[0])
        assert np.mean(ratios) <= 0.5

    def test_init_scheme(self):
        cfg = mdl.ModelConfig(**SMALL)
        params = mdl.init_params(cfg, np.random.default_rng(0))
        H = cfg.hidden_units
        for l in (1, 2):
            b = params[f"lstm{l}.b"]
            np.testing.assert_array_equal(b[H:2 * H], 1.0)
            np.testing.assert_array_equal(np.delete(b, np.s_[H:2 * H]), 0.0)
            W = params[f"lstm{l}.W"]
            assert np.abs(W).max() <= 1 / math.sqrt(W.shape[1])

    def test_errors(self):
        with pytest.raises(UsageError):
            mdl.train(self.cfg, [])
        seg = separable_segments(1, self.cfg, 0)[0]
        seg.label = 3
        with pytest.raises(DataError):
            mdl.train(self.cfg, [seg])

    def test_predict_matches_argmax(self):
        segs = separable_segments(30, self.cfg, 2)
        params = mdl.train(self.cfg, segs).params
        for s in segs:
            label, probs = mdl.predict(params, s)
            assert label == int(np.argmax(mdl.classify_sequence(params, s)))
            assert np.array_equal(probs, mdl.classify_sequence(params, s))

    def test_tape_engine_trains_identically(self):
        segs = separable_segments(6, self.cfg, 3)
        cfg = self.cfg.replace(epochs=2)
        a = mdl.train(cfg, segs)
        b = mdl.train(cfg.replace(engine="tape"), segs)
        np.testing.assert_allclose(a.params.flat, b.params.flat, atol=1e-10)


class TestPersonalize:
    cfg = mdl.ModelConfig(**SMALL, learning_rate=1e-2, epochs=3)

    def test_zero_epochs_identity(self):
        segs = separable_segments(9, self.cfg, 0)
        base = mdl.train(self.cfg, segs).params
        tuned = mdl.personalize(base, self.cfg.replace(epochs=0), segs[:2])
        assert tuned.flat.tobytes() == base.flat.tobytes()
        assert tuned.flat is not base.flat

    def test_isolation(self):
        segs = separable_segments(12, self.cfg, 0)
        base = mdl.train(self.cfg, segs).params
        snapshot = base.flat.tobytes()
        a = mdl.personalize(base, self.cfg, segs[:3])
        b = mdl.personalize(base, self.cfg, segs[3:6])
        assert base.flat.tobytes() == snapshot
        assert not np.array_equal(a.flat, b.flat)

    def test_empty_set_warns(self):
        base = mdl.init_params(self.cfg, np.random.default_rng(0))
        with pytest.warns(mdl.PersonalizationWarning):
            out = mdl.personalize(base, self.cfg, [])
        assert out == base


def test_checkpoint_round_trip_is_exact(tmp_path):
    cfg = mdl.ModelConfig(**SMALL)
    params = random_params(cfg, 3)
    params.flat[0] = 0.1 + 0.2  # awkward decimal
    params.flat[1] = 1e-310     # subnormal
    mdl.save_checkpoint(tmp_path / "c.json", params, seed=4)
    loaded, extra = mdl.load_checkpoint(tmp_path / "c.json")
    assert loaded.flat.tobytes() == params.flat.tobytes()
    assert loaded.config == cfg
    assert extra["seed"] == 4


def test_checkpoint_rejects_bad_documents(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format_version": 2}')
    with pytest.raises(DataError):
        mdl.load_checkpoint(p)
    p.write_text("not json")
    with pytest.raises(DataError):
        mdl.load_checkpoint(p)


def test_personalize_config_mismatch():
    cfg = mdl.ModelConfig(**SMALL)
    base = mdl.ModelParams(cfg)
    seg = make_segment(np.random.default_rng(0), cfg, 2)
    with pytest.raises(ConfigError):
        mdl.personalize(base, cfg.replace(hidden_units=5), [seg])


def test_warning_free_training():
    cfg = mdl.ModelConfig(**SMALL, learning_rate=1e-2, epochs=1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mdl.train(cfg, separable_segments(5, cfg, 0))
