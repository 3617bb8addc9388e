import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl.core import ContractViolation
from icl.nn import (
    Adam,
    AdamState,
    Dense,
    DenseNet,
    GaussianHead,
    adam_step,
    load_checkpoint,
    parameter_checksum,
    reparameterize,
    save_checkpoint,
    softmax_cross_entropy,
    squared_error,
)


def fd_param_grads(net, loss, h=1e-6):
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestForward:
    def test_identity_layer(self):
        net = DenseNet.from_layers([Dense(np.eye(3), np.zeros(3))])
        x = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_array_equal(net(x), x)

    def test_zero_relu(self):
        net = DenseNet.from_layers([Dense(np.zeros((3, 2)), np.zeros(2), "relu")])
        np.testing.assert_array_equal(net(np.ones((5, 3))), 0.0)

    def test_two_layer_hand_product(self):
        net = DenseNet((2, 2, 2), activation="relu", rng=0)
        (w1, b1), (w2, b2) = [(layer.weight, layer.bias) for layer in net.layers]
        x = np.array([[1.0, -2.0]])
        h = [max(0.0, x[0, 0] * w1[0, k] + x[0, 1] * w1[1, k] + b1[k]) for k in range(2)]
        want = [h[0] * w2[0, k] + h[1] * w2[1, k] + b2[k] for k in range(2)]
        np.testing.assert_allclose(net(x)[0], want, rtol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            DenseNet((3, 2), rng=0).forward(np.zeros((1, 4)))

    def test_layers_must_chain(self):
        with pytest.raises(ContractViolation):
            DenseNet.from_layers([Dense(np.zeros((3, 2)), np.zeros(2)),
                                  Dense(np.zeros((3, 1)), np.zeros(1))])

    def test_unknown_activation(self):
        with pytest.raises(ContractViolation):
            DenseNet((2, 2), activation="gelu")

    def test_seeded_init_is_reproducible(self):
        a, b = DenseNet((5, 8, 3), rng=7), DenseNet((5, 8, 3), rng=7)
        assert parameter_checksum(a) == parameter_checksum(b)


class TestBackward:
    def test_linear_net_at_optimum(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((3, 2))
        net = DenseNet.from_layers([Dense(w.copy(), np.zeros(2))])
        x = rng.standard_normal((6, 3))
        rec = net.forward(x)
        _, g = squared_error(rec.output, x @ w)
        grads, _ = net.backward(rec, g)
        for gp in grads:
            np.testing.assert_array_equal(gp, 0.0)

    def test_sum_loss_weight_gradient(self):
        rng = np.random.default_rng(2)
        net = DenseNet((3, 2), rng=rng)
        x = rng.standard_normal((5, 3))
        rec = net.forward(x)
        (gw, gb), _ = net.backward(rec, np.ones((5, 2)))
        np.testing.assert_allclose(gw, np.repeat(x.sum(axis=0)[:, None], 2, axis=1), rtol=1e-14)
        np.testing.assert_array_equal(gb, [5.0, 5.0])

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["relu", "tanh"]))
    def test_three_layer_finite_differences(self, seed, act):
        rng = np.random.default_rng(seed)
        net = DenseNet((4, 6, 5, 3), activation=act, rng=rng)
        x, up = rng.standard_normal((7, 4)), rng.standard_normal((7, 3))
        grads, gx = net.backward(net.forward(x), up)
        fd = fd_param_grads(net, lambda: float(np.sum(net.forward(x).output * up)))
        for g, f in zip(grads, fd):
            assert rel(g, f) <= 1e-4
        fd_x = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-6
            xm[idx] -= 1e-6
            fd_x[idx] = np.sum((net(xp) - net(xm)) * up) / 2e-6
        assert rel(gx, fd_x) <= 1e-4

    def test_batch_norm_training_path(self):
        rng = np.random.default_rng(3)
        net = DenseNet((3, 5, 2), activation="tanh", batch_norm=True, rng=rng)
        for layer in net.layers[:-1]:
            layer.gamma[:] = rng.uniform(0.5, 1.5, layer.gamma.shape)
            layer.beta[:] = rng.standard_normal(layer.beta.shape)
            layer.momentum = 0.0  # keep running statistics fixed during probing
        x, up = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
        grads, _ = net.backward(net.forward(x, training=True), up)
        fd = fd_param_grads(net, lambda: float(np.sum(net.forward(x, training=True).output * up)))
        for g, f in zip(grads, fd):
            assert np.max(np.abs(g - f)) <= 1e-6

    def test_stale_activations_rejected(self):
        net = DenseNet((2, 2), rng=0)
        rec = net.forward(np.ones((3, 2)))
        opt = Adam([net], lr=0.1)
        grads, _ = net.backward(rec, np.ones((3, 2)))
        opt.step([grads])
        with pytest.raises(ContractViolation):
            net.backward(rec, np.ones((3, 2)))

    def test_upstream_shape_checked(self):
        net = DenseNet((2, 2), rng=0)
        with pytest.raises(ContractViolation):
            net.backward(net.forward(np.ones((3, 2))), np.ones((3, 1)))


class TestGaussianHead:
    def test_gradients(self):
        rng = np.random.default_rng(4)
        head = GaussianHead((3, 5), 2, rng=rng)
        x = rng.standard_normal((6, 3))
        a, b = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))

        def loss():
            mu, lv, _ = head.forward(x)
            return float(np.sum(mu * a + lv * b))

        _, _, rec = head.forward(x)
        grads, _ = head.backward(rec, a, b)
        fd = fd_param_grads(head, loss)
        for g, f in zip(grads, fd):
            assert rel(g, f) <= 1e-6


class TestReparameterize:
    def test_zero_noise(self):
        mu = np.array([[1.0, -2.0]])
        z, _ = reparameterize(mu, np.array([[0.3, -1.0]]), np.zeros((1, 2)))
        np.testing.assert_array_equal(z, mu)

    def test_unit_variance(self):
        z, _ = reparameterize(np.array([[1.0]]), np.array([[0.0]]), np.array([[0.5]]))
        assert z[0, 0] == 1.5

    def test_doubled_std(self):
        z, _ = reparameterize(np.array([[0.0]]), np.array([[2 * math.log(2)]]), np.array([[1.0]]))
        np.testing.assert_allclose(z, 2.0, rtol=1e-15)

    def test_gradient_reaches_both_inputs(self):
        rng = np.random.default_rng(5)
        mu, lv, eps = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        up = rng.standard_normal((3, 2))
        _, back = reparameterize(mu, lv, eps)
        g_mu, g_lv = back(up)
        h = 1e-6
        fd_lv = (np.sum(reparameterize(mu, lv + h, eps)[0] * up, axis=None)
                 - np.sum(reparameterize(mu, lv - h, eps)[0] * up)) / (2 * h)
        np.testing.assert_array_equal(g_mu, up)
        np.testing.assert_allclose(g_lv.sum(), fd_lv, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            reparameterize(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = [np.array([1.0, -2.0])]
        adam_step(AdamState(lr=0.1), p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = [np.array([0.0])]
        adam_step(AdamState(lr=0.1), p, [np.array([1.0])])
        np.testing.assert_allclose(p[0], -0.1, rtol=1e-6)

    def test_bit_identical_runs(self):
        def run():
            rng = np.random.default_rng(6)
            net = DenseNet((3, 4, 1), rng=rng)
            opt = Adam([net], lr=1e-2)
            x, y = rng.standard_normal((16, 3)), rng.standard_normal((16, 1))
            for _ in range(20):
                rec = net.forward(x, training=True)
                _, g = squared_error(rec.output, y)
                grads, _ = net.backward(rec, g)
                opt.step([grads])
            return parameter_checksum(net)

        assert run() == run()

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            adam_step(AdamState(), [np.zeros(2)], [np.zeros(3)])


class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 3)), [0, 1, 2, 0])
        np.testing.assert_allclose(loss, math.log(3), rtol=1e-15)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(7)
        logits, labels = rng.standard_normal((5, 3)), rng.integers(0, 3, 5)
        _, g = softmax_cross_entropy(logits, labels)
        fd = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += 1e-6
            down[idx] -= 1e-6
            fd[idx] = (softmax_cross_entropy(up, labels)[0]
                       - softmax_cross_entropy(down, labels)[0]) / 2e-6
        assert rel(g, fd) <= 1e-6

    def test_cross_entropy_is_stable_for_large_logits(self):
        loss, g = softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
        assert loss == 0.0 and np.all(np.isfinite(g))

    def test_squared_error(self):
        loss, g = squared_error(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
        assert loss == 2.5
        np.testing.assert_array_equal(g, [[1.0, 2.0]])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        head = GaussianHead((4, 6), 3, rng=rng)
        adv = DenseNet((3, 5, 2), batch_norm=True, rng=rng)
        adv.forward(rng.standard_normal((10, 3)), training=True)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, {"encoder": head, "adversary": adv})
        loaded = load_checkpoint(path)
        assert parameter_checksum(loaded["encoder"]) == parameter_checksum(head)
        x = rng.standard_normal((4, 4))
        np.testing.assert_array_equal(loaded["encoder"].forward(x)[0], head.forward(x)[0])
        z = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(loaded["adversary"](z), adv(z))

    def test_rejects_foreign_archive(self, tmp_path):
        path = tmp_path / "other.npz"
        np.savez(path, __meta__=np.frombuffer(b'{"format": "x"}', dtype=np.uint8))
        with pytest.raises(ContractViolation):
            load_checkpoint(path)
