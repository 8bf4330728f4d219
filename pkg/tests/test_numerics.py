"""Autograd engine, optimizer, schedule, and checkpoint container."""

import numpy as np
import pytest

from casevec.numerics import autograd as ag
from casevec.numerics.autograd import (
    NonScalarLoss,
    ShapeMismatch,
    Tensor,
    grad_check,
    no_grad,
)
from casevec.numerics.optim import AdamW, lr_schedule
from casevec.numerics.serialize import CheckpointError, load_checkpoint, save_checkpoint


def rand(*shape, seed=0, scale=1.0, grad=True):
    data = np.random.default_rng(seed).normal(scale=scale, size=shape)
    return Tensor(data, requires_grad=grad)


class TestForwardValues:
    def test_softmax_symmetry(self):
        y = ag.softmax(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(y.data, [[0.5, 0.5]], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        y = ag.softmax(rand(6, 9, seed=3))
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_layer_norm_constant_row_zero(self):
        x = Tensor(np.full((2, 8), 3.7))
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        out = ag.layer_norm(x, g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_matmul_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            n = int(rng.integers(2, 8))
            a = Tensor(rng.normal(size=(n, n)))
            eye = Tensor(np.eye(n))
            np.testing.assert_array_equal(ag.matmul(a, eye).data, a.data)

    def test_uniform_logits_cross_entropy(self):
        v = 23
        logits = Tensor(np.zeros((4, v)), requires_grad=True)
        loss = ag.cross_entropy(logits, [0, 5, 11, 22])
        assert float(loss.data) == pytest.approx(np.log(v), abs=1e-9)

    def test_shape_mismatch_messages(self):
        with pytest.raises(ShapeMismatch, match=r"\(2, 3\)"):
            ag.matmul(rand(2, 3), rand(2, 3))
        with pytest.raises(ShapeMismatch):
            ag.add(rand(2, 3), rand(4, 5))


class TestBackwardRules:
    def test_sum_gives_ones(self):
        w = rand(3, 4, seed=2)
        ag.backward(ag.tensor_sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((3, 4)))

    def test_quadratic_closed_form(self):
        w = rand(5, 2, seed=4)
        ag.backward(ag.tensor_sum(ag.mul(w, w)))
        np.testing.assert_allclose(w.grad, 2 * w.data, atol=1e-14)

    def test_detached_gets_zero(self):
        w = rand(4, seed=5)
        loss = ag.tensor_sum(ag.mul(w.detach(), w.detach()))
        ag.backward(loss, params=[w])
        np.testing.assert_array_equal(w.grad, np.zeros(4))

    def test_fanout_accumulates(self):
        w = rand(3, seed=6)
        loss = ag.tensor_sum(w) + ag.tensor_sum(w)
        ag.backward(loss)
        np.testing.assert_array_equal(w.grad, 2 * np.ones(3))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(NonScalarLoss):
            ag.backward(rand(2, 2))

    def test_unreached_param_zeroed(self):
        used, unused = rand(3, seed=7), rand(4, seed=8)
        ag.backward(ag.tensor_sum(used), params=[used, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(4))

    def test_no_grad_blocks_tape(self):
        w = rand(3, seed=9)
        with no_grad():
            out = ag.tensor_sum(ag.mul(w, w))
        assert out._parents == () and not out.requires_grad


class TestGradCheck:
    def test_quadratic_form(self):
        w = rand(4, 3, seed=10)
        a = Tensor(np.random.default_rng(11).normal(size=(4, 4)))
        err = grad_check(lambda: ag.tensor_sum(ag.mul(ag.matmul(a, w), ag.matmul(a, w))), [w])
        assert err < 1e-9

    def test_constant_function(self):
        w = rand(3, seed=12)
        c = Tensor(np.zeros(()))
        err = grad_check(lambda: c + ag.tensor_sum(w.detach()) * 0.0, [w])
        assert err == 0.0

    def test_every_op_under_1e6(self):
        rng = np.random.default_rng(42)

        def t(*shape):
            return Tensor(rng.normal(size=shape), requires_grad=True)

        a, b = t(4, 5), t(4, 5)
        c, d = t(4, 5), t(5, 3)
        e = t(3, 6)
        f = t(3, 6)
        g, gm, gb = t(3, 6), Tensor(np.abs(rng.normal(size=6)) + 0.5, requires_grad=True), t(6)
        j = t(4, 4)
        k = t(8, 3)
        m = t(4, 7)
        n = t(2, 3, 4)
        o, p = t(2, 4), t(3, 4)
        emb_ids = np.array([1, 1, 5, 7])
        cols = np.array([0, 3, 6, 2])
        cases = {
            "add": (lambda: ag.tensor_sum(ag.mul(a + b, a + b)), [a, b]),
            "matmul": (lambda: ag.tensor_sum(ag.mul(ag.matmul(c, d), ag.matmul(c, d))), [c, d]),
            "softmax": (lambda: ag.tensor_sum(ag.mul(ag.softmax(e), ag.softmax(e))), [e]),
            "log_softmax": (lambda: ag.tensor_sum(ag.mul(ag.log_softmax(f), f)), [f]),
            "layer_norm": (lambda: ag.tensor_sum(ag.mul(ag.layer_norm(g, gm, gb),
                                                        ag.layer_norm(g, gm, gb))), [g, gm, gb]),
            "gelu": (lambda: ag.tensor_sum(ag.mul(ag.gelu(j), j)), [j]),
            "embedding": (lambda: ag.tensor_sum(ag.mul(ag.embedding(k, emb_ids),
                                                       ag.embedding(k, emb_ids))), [k]),
            "pick": (lambda: ag.tensor_sum(ag.mul(ag.pick(m, cols), ag.pick(m, cols))), [m]),
            "transpose_reshape": (lambda: ag.tensor_sum(
                ag.mul(ag.reshape(ag.transpose(n, (2, 0, 1)), (4, 6)),
                       ag.reshape(ag.transpose(n, (2, 0, 1)), (4, 6)))), [n]),
            "concat": (lambda: ag.tensor_sum(ag.mul(ag.concat([o, p], axis=0),
                                                    ag.concat([o, p], axis=0))), [o, p]),
            "mean": (lambda: ag.mean(ag.mul(m, m)), [m]),
        }
        for name, (fn, params) in cases.items():
            err = grad_check(fn, params, max_coords_per_param=10,
                             rng=np.random.default_rng(7))
            assert err < 1e-6, f"{name}: {err}"


class TestAdamW:
    def test_zero_grad_pure_decay(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = AdamW({"w": w}, weight_decay=0.1)
        w.grad = np.zeros(3)
        before = w.data.copy()
        opt.step(lr=0.01)
        np.testing.assert_allclose(w.data, before * (1 - 0.01 * 0.1), atol=1e-15)

    def test_first_step_sign_direction(self):
        w = Tensor(np.array([0.5, -0.5, 2.0]), requires_grad=True)
        opt = AdamW({"w": w}, weight_decay=0.0)
        g = np.array([0.3, -0.7, 1e-3])
        w.grad = g.copy()
        before = w.data.copy()
        opt.step(lr=0.01)
        update = w.data - before
        np.testing.assert_allclose(update, -0.01 * np.sign(g), rtol=1e-4)

    def test_identical_groups_identical_updates(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = AdamW({"a": a, "b": b})
        a.grad = np.array([0.1, -0.2])
        b.grad = np.array([0.1, -0.2])
        opt.step(lr=0.05)
        np.testing.assert_array_equal(a.data, b.data)

    def test_step_count_monotone(self):
        w = Tensor(np.ones(2), requires_grad=True)
        opt = AdamW({"w": w})
        for i in range(1, 4):
            w.grad = np.ones(2)
            opt.step(lr=0.01)
            assert opt.step_count == i


class TestLrSchedule:
    def test_warmup_end_hits_base(self):
        assert lr_schedule(10, 100, 0.1, 3e-4) == pytest.approx(3e-4)

    def test_end_is_zero(self):
        assert lr_schedule(100, 100, 0.1, 3e-4) == 0.0

    def test_decay_midpoint(self):
        mid = (10 + 100) // 2
        assert lr_schedule(mid, 100, 0.1, 2e-4) == pytest.approx(1e-4, abs=1e-12)

    def test_ramp_is_linear(self):
        assert lr_schedule(5, 100, 0.1, 1e-3) == pytest.approx(5e-4)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(101, 100)


class TestCheckpointContainer:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "emb.tok": rng.normal(size=(7, 3)),
            "head.b": rng.normal(size=5).astype(np.float32),
        }
        config = {"d_model": 3, "note": "toy"}
        path = tmp_path / "m.cvck"
        save_checkpoint(path, config, tensors, meta={"step": 9})
        cfg, loaded, meta = load_checkpoint(path)
        assert cfg == config and meta == {"step": 9}
        for name, arr in tensors.items():
            assert loaded[name].dtype == arr.dtype
            assert loaded[name].tobytes() == arr.tobytes()

    def test_deterministic_bytes(self, tmp_path):
        tensors = {"b": np.arange(4.0), "a": np.ones((2, 2), dtype=np.float32)}
        p1, p2 = tmp_path / "a.cvck", tmp_path / "b.cvck"
        save_checkpoint(p1, {"x": 1}, tensors)
        save_checkpoint(p2, {"x": 1}, dict(reversed(tensors.items())))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.cvck"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "x.cvck", {}, {"a": np.arange(3, dtype=np.int32)})


class TestDeterminism:
    def test_bitwise_repeat(self):
        def run():
            rng = np.random.default_rng(123)
            w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            x = Tensor(rng.normal(size=(4, 6)))
            opt = AdamW({"w": w})
            for step in range(5):
                opt.zero_grad()
                h = ag.gelu(ag.matmul(x, w))
                loss = ag.mean(ag.mul(h, h))
                ag.backward(loss, params=[w])
                opt.step(lr_schedule(step + 1, 5))
            return w.data.tobytes()

        assert run() == run()
