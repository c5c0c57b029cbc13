import numpy as np
import pytest

from crossbatch import (
    EmbeddingBatch,
    FormatError,
    InvalidConfig,
    MLPEmbedder,
    NonFiniteInput,
    Optimizer,
    OptimizerConfig,
    PairMinerConfig,
    ShapeMismatch,
    load_checkpoint,
    mine_pairs,
    save_checkpoint,
    contrastive_loss,
)
from oracles import central_diff_param_grads, relative_grad_error


def tiny_net(dims=(3, 8, 4), seed=0):
    return MLPEmbedder(dims, seed=seed)


class TestForward:
    def test_rows_unit_norm(self):
        net = tiny_net()
        x = np.random.default_rng(1).normal(size=(10, 3))
        z = net.embed(x)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), np.ones(10), atol=1e-6)

    def test_zero_depth_is_plain_normalization(self):
        net = MLPEmbedder((2,))
        z = net.embed(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(z, [[0.6, 0.8]], atol=1e-9)

    def test_deterministic(self):
        net = tiny_net()
        x = np.random.default_rng(2).normal(size=(5, 3))
        a = net.embed(x)
        b = net.embed(x)
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_init(self):
        a, b = tiny_net(seed=7), tiny_net(seed=7)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_nonfinite_input(self):
        with pytest.raises(NonFiniteInput):
            tiny_net().embed(np.array([[1.0, np.nan, 0.0]]))

    def test_wrong_width(self):
        with pytest.raises(ShapeMismatch):
            tiny_net().embed(np.zeros((2, 5)))

    def test_bad_dims(self):
        with pytest.raises(InvalidConfig):
            MLPEmbedder(())
        with pytest.raises(InvalidConfig):
            MLPEmbedder((4, 0, 2))


class TestBackward:
    def test_zero_depth_has_no_parameter_grads(self):
        net = MLPEmbedder((3,))
        z, cache = net.forward(np.array([[1.0, 2.0, 2.0]]))
        assert net.backward(cache, z.copy()) == []

    def test_radial_component_annihilated(self):
        net = tiny_net(seed=3)
        x = np.random.default_rng(3).normal(size=(4, 3))
        z, cache = net.forward(x)
        # grad_z parallel to z per row contributes nothing to any parameter
        # (exact up to the 1e-12 norm epsilon, whose residue scales as eps/s^4)
        grads = net.backward(cache, z * np.array([[2.0], [3.0], [-1.0], [0.5]]))
        for dw, db in grads:
            np.testing.assert_allclose(dw, np.zeros_like(dw), atol=1e-8)
            np.testing.assert_allclose(db, np.zeros_like(db), atol=1e-8)

    def test_zero_grad_z(self):
        net = tiny_net()
        x = np.random.default_rng(4).normal(size=(4, 3))
        z, cache = net.forward(x)
        for dw, db in net.backward(cache, np.zeros_like(z)):
            assert not dw.any() and not db.any()

    def test_shape_mismatch(self):
        net = tiny_net()
        z, cache = net.forward(np.zeros((2, 3)))
        with pytest.raises(ShapeMismatch):
            net.backward(cache, np.zeros((3, 4)))

    def test_parameter_grads_match_finite_differences(self):
        net = MLPEmbedder((3, 6, 2), seed=5)
        x = np.random.default_rng(5).normal(size=(6, 3))
        labels = np.array([0, 0, 1, 1, 2, 2])
        cfg = PairMinerConfig()

        def loss_of(embedder):
            z = embedder.embed(x)
            b = EmbeddingBatch(vectors=z, labels=labels)
            pairs = mine_pairs(b, b, cfg, self_offset=0)
            return contrastive_loss(b, b, pairs, cfg).value

        z, cache = net.forward(x)
        b = EmbeddingBatch(vectors=z, labels=labels)
        pairs = mine_pairs(b, b, cfg, self_offset=0)
        out = contrastive_loss(b, b, pairs, cfg)
        analytic = net.backward(cache, out.grad)
        numeric = central_diff_param_grads(net, loss_of)
        assert relative_grad_error(analytic, numeric) < 1e-6


class TestOptimizer:
    def test_plain_sgd_step(self):
        net = MLPEmbedder((2, 2), seed=1)
        opt = Optimizer(OptimizerConfig(kind="sgd", learning_rate=0.1), net)
        w_before = net.weights[0].copy()
        g = np.ones_like(net.weights[0])
        opt.step(net, [(g, np.zeros(2))], epoch=0)
        np.testing.assert_allclose(net.weights[0], w_before - 0.1 * g, atol=1e-15)

    def test_schedule(self):
        cfg = OptimizerConfig(kind="adamw", learning_rate=1e-4,
                              schedule_gamma=0.33, schedule_every=15)
        assert cfg.lr_at(0) == 1e-4
        assert cfg.lr_at(14) == 1e-4
        assert cfg.lr_at(15) == pytest.approx(0.33e-4)
        assert cfg.lr_at(30) == pytest.approx(0.33**2 * 1e-4)

    def test_adamw_zero_grad_fixed_point(self):
        net = MLPEmbedder((2, 2), seed=2)
        opt = Optimizer(OptimizerConfig(kind="adamw", weight_decay=0.0), net)
        w_before = net.weights[0].copy()
        opt.step(net, [(np.zeros((2, 2)), np.zeros(2))], epoch=0)
        np.testing.assert_array_equal(net.weights[0], w_before)

    def test_adamw_decoupled_weight_decay(self):
        # with zero gradient, decay shrinks parameters multiplicatively
        net = MLPEmbedder((2, 2), seed=2)
        lr, wd = 1e-2, 0.5
        opt = Optimizer(OptimizerConfig(kind="adamw", learning_rate=lr, weight_decay=wd), net)
        w_before = net.weights[0].copy()
        opt.step(net, [(np.zeros((2, 2)), np.zeros(2))], epoch=0)
        np.testing.assert_allclose(net.weights[0], w_before * (1 - lr * wd), atol=1e-15)

    def test_sgd_momentum_accumulates(self):
        net = MLPEmbedder((1, 1), seed=0)
        opt = Optimizer(OptimizerConfig(kind="sgd", learning_rate=1.0, momentum=0.5), net)
        net.weights[0][:] = 0.0
        g = np.ones((1, 1))
        opt.step(net, [(g, np.zeros(1))], epoch=0)  # buf = 1, w = -1
        opt.step(net, [(g, np.zeros(1))], epoch=0)  # buf = 1.5, w = -2.5
        assert net.weights[0][0, 0] == pytest.approx(-2.5)

    def test_invalid_kind(self):
        with pytest.raises(InvalidConfig):
            OptimizerConfig(kind="rmsprop").validate()


class TestFreeze:
    def test_frozen_layers_untouched(self):
        net = tiny_net(seed=9)
        net.freeze_all_but_last()
        opt = Optimizer(OptimizerConfig(kind="sgd", learning_rate=0.5), net)
        first_before = net.weights[0].copy()
        last_before = net.weights[-1].copy()
        grads = [(np.ones_like(w), np.ones_like(b)) for w, b in zip(net.weights, net.biases)]
        opt.step(net, grads, epoch=0)
        np.testing.assert_array_equal(net.weights[0], first_before)
        assert np.abs(net.weights[-1] - last_before).max() > 0

    def test_unfrozen_step_touches_every_layer(self):
        net = tiny_net(seed=9)
        net.freeze_all_but_last()
        net.unfreeze()
        opt = Optimizer(OptimizerConfig(kind="sgd", learning_rate=0.5), net)
        before = [w.copy() for w in net.weights]
        grads = [(np.ones_like(w), np.ones_like(b)) for w, b in zip(net.weights, net.biases)]
        opt.step(net, grads, epoch=0)
        for w_before, w_after in zip(before, net.weights):
            assert np.abs(w_after - w_before).max() > 0

    def test_trainable_layers(self):
        net = tiny_net()
        assert list(net.trainable_layers()) == [0, 1]
        net.freeze_all_but_last()
        assert list(net.trainable_layers()) == [1]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = tiny_net(seed=4)
        path = tmp_path / "net.xbnc"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.layer_dims == net.layer_dims
        for a, b in zip(net.weights, loaded.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(net.biases, loaded.biases):
            np.testing.assert_array_equal(a, b)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.xbnc"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert err.value.offset == 0

    def test_truncated(self, tmp_path):
        net = tiny_net(seed=4)
        path = tmp_path / "net.xbnc"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        net = tiny_net(seed=4)
        path = tmp_path / "net.xbnc"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestClone:
    def test_clone_is_independent(self):
        net = tiny_net(seed=6)
        other = net.clone()
        other.weights[0][0, 0] += 1.0
        assert net.weights[0][0, 0] != other.weights[0][0, 0]
        assert other.layer_dims == net.layer_dims
