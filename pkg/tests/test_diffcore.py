import numpy as np
import pytest

from ilvct import diffcore as dc
from ilvct.diffcore import DTensor


RNG = np.random.default_rng(1234)


def rand(*shape):
    return DTensor(RNG.standard_normal(shape))


class TestElementwise:
    def test_softmax_of_zeros(self):
        out = dc.softmax(DTensor(np.zeros(4)))
        np.testing.assert_allclose(out.values, 0.25)

    def test_softmax_rows_sum_to_one(self):
        out = dc.softmax(rand(5, 7))
        np.testing.assert_allclose(out.values.sum(axis=-1), 1.0, atol=1e-6)

    def test_layer_norm_standardizes(self):
        x = rand(6, 16)
        out = dc.layer_norm(x, DTensor(np.ones(16)), DTensor(np.zeros(16)))
        np.testing.assert_allclose(out.values.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.values.var(axis=-1), 1.0, atol=1e-4)

    def test_quadratic_grad_exact(self):
        x = rand(10)
        err = dc.grad_check(lambda t: dc.dsum(dc.mul(t, t)), [x])
        assert err < 1e-8

    def test_shape_mismatch_error_names_shapes(self):
        with pytest.raises(dc.ShapeError, match="matmul"):
            dc.matmul(rand(3, 4), rand(5, 6))


class TestConv:
    def test_conv_transpose_shape_and_onehot(self):
        x = np.zeros((1, 8, 8, 8))
        x[0, 3, 4, 5] = 1.0
        w = RNG.standard_normal((1, 2, 4, 4, 4))
        out = dc.conv_transpose3d(DTensor(x), DTensor(w), stride=4)
        assert out.shape == (2, 32, 32, 32)
        patch = out.values[:, 12:16, 16:20, 20:24]
        np.testing.assert_allclose(patch, w[0])
        out.values[:, 12:16, 16:20, 20:24] = 0.0
        assert np.all(out.values == 0.0)

    def test_conv3d_delta_kernel_identity(self):
        x = rand(2, 6, 6, 6)
        w = np.zeros((2, 2, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        w[1, 1, 1, 1, 1] = 1.0
        out = dc.conv3d(x, DTensor(w), stride=1, padding=1)
        np.testing.assert_allclose(out.values, x.values)

    def test_conv3d_stride(self):
        out = dc.conv3d(rand(1, 8, 8, 8), rand(3, 1, 4, 4, 4), stride=4)
        assert out.shape == (3, 2, 2, 2)


class TestResample:
    def test_trilinear_identity(self):
        x = rand(3, 5, 6, 7)
        out = dc.trilinear_resample(x, (5, 6, 7))
        np.testing.assert_allclose(out.values, x.values, atol=1e-12)

    def test_trilinear_constant_preserved(self):
        x = DTensor(np.full((1, 4, 4, 4), 2.5))
        out = dc.trilinear_resample(x, (7, 9, 3))
        np.testing.assert_allclose(out.values, 2.5)

    def test_bilinear_center_of_pixel(self):
        fmap = rand(5, 5, 3)
        coords = np.array([[2.5, 3.5]])
        out = dc.bilinear_sample2d(fmap, coords)
        np.testing.assert_allclose(out.values[0], fmap.values[2, 3])

    def test_bilinear_midpoint(self):
        fmap = DTensor(np.arange(4.0).reshape(2, 2, 1))
        out = dc.bilinear_sample2d(fmap, np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(out.values[0, 0], 1.5)


def _mlp_loss(x, w1, b1, w2, b2):
    h = dc.gelu(dc.linear(x, w1, b1))
    y = dc.linear(h, w2, b2)
    return dc.dsum(dc.mul(y, y))


class TestGradCheck:
    def test_mlp(self):
        x, w1 = rand(4, 6), rand(6, 8)
        b1, w2 = rand(8), rand(8, 3)
        b2 = rand(3)
        err = dc.grad_check(_mlp_loss, [x, w1, b1, w2, b2])
        assert err < 1e-5

    def test_attention_block(self):
        q, k, v = rand(16, 8), rand(16, 8), rand(16, 8)

        def f(q, k, v):
            out = dc.scaled_dot_attention(q, k, v)
            return dc.dsum(dc.mul(out, out))

        assert dc.grad_check(f, [q, k, v]) < 1e-5

    def test_attention_convex_combination(self):
        # one-hot V: outputs are rows of the simplex
        q, k = rand(4, 3), rand(5, 3)
        v = DTensor(np.eye(5))
        out = dc.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.values.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out.values >= 0)

    def test_non_scalar_output_rejected(self):
        with pytest.raises(dc.ShapeError):
            dc.grad_check(lambda t: dc.mul(t, t), [rand(3)])


OP_CASES = {
    "add": lambda: (lambda a, b: dc.dsum(dc.add(a, b)), [rand(3, 4), rand(3, 4)]),
    "add_broadcast": lambda: (lambda a, b: dc.dsum(dc.mul(dc.add(a, b), dc.add(a, b))),
                              [rand(3, 4), rand(4)]),
    "mul": lambda: (lambda a, b: dc.dsum(dc.mul(a, b)), [rand(2, 5), rand(2, 5)]),
    "div": lambda: (lambda a, b: dc.dsum(dc.div(a, dc.add(dc.mul(b, b), 1.0))),
                    [rand(4), rand(4)]),
    "matmul": lambda: (lambda a, b: dc.dsum(dc.mul(dc.matmul(a, b), dc.matmul(a, b))),
                       [rand(3, 4), rand(4, 2)]),
    "matmul_batched": lambda: (lambda a, b: dc.dsum(dc.matmul(a, b)),
                               [rand(2, 3, 4), rand(2, 4, 5)]),
    "linear": lambda: (lambda x, w, b: dc.dsum(dc.linear(x, w, b)),
                       [rand(3, 4), rand(4, 5), rand(5)]),
    "softmax": lambda: (lambda a, _c=dc.constant(RNG.standard_normal((3, 5))):
                        dc.dsum(dc.mul(dc.softmax(a), _c)),
                        [rand(3, 5)]),
    "layer_norm": lambda: (lambda x, g, b, _c=dc.constant(RNG.standard_normal((4, 6))):
                           dc.dsum(dc.mul(dc.layer_norm(x, g, b), _c)),
                           [rand(4, 6), rand(6), rand(6)]),
    "gelu": lambda: (lambda a: dc.dsum(dc.gelu(a)), [rand(7)]),
    "tanh": lambda: (lambda a: dc.dsum(dc.tanh(a)), [rand(7)]),
    "exp": lambda: (lambda a: dc.dsum(dc.exp(a)), [rand(7)]),
    "softplus": lambda: (lambda a: dc.dsum(dc.softplus(a)), [rand(7)]),
    "sqrt": lambda: (lambda a: dc.dsum(dc.sqrt(dc.add(dc.mul(a, a), 1.0))), [rand(7)]),
    "abs": lambda: (lambda a: dc.dsum(dc.absolute(a)), [DTensor(RNG.uniform(0.5, 2.0, 7))]),
    "concat": lambda: (lambda a, b: dc.dsum(dc.mul(dc.concat([a, b], axis=1),
                                                   dc.concat([a, b], axis=1))),
                       [rand(2, 3), rand(2, 4)]),
    "slice": lambda: (lambda a: dc.dsum(dc.mul(a[1:, :2], a[1:, :2])), [rand(4, 5)]),
    "take": lambda: (lambda a: dc.dsum(dc.take(a, np.array([0, 2, 2, 1]))), [rand(3, 4)]),
    "scatter_add": lambda: (lambda a: dc.dsum(dc.mul(dc.scatter_add(a, np.array([0, 1, 0, 2]), 4),
                                                     dc.scatter_add(a, np.array([0, 1, 0, 2]), 4))),
                            [rand(4, 2)]),
    "reshape_permute": lambda: (lambda a, _c=dc.constant(RNG.standard_normal((4, 3))):
                                dc.dsum(dc.mul(dc.permute(dc.reshape(a, (3, 4)), (1, 0)), _c)),
                                [rand(12)]),
    "mean_axis": lambda: (lambda a: dc.dsum(dc.mul(dc.dmean(a, 1), dc.dmean(a, 1))), [rand(3, 5)]),
    "max_axis": lambda: (lambda a: dc.dsum(dc.dmax(a, 0)), [rand(6, 3)]),
    "conv3d": lambda: (lambda x, w, b: dc.dsum(dc.mul(dc.conv3d(x, w, b, stride=1, padding=1),
                                                      dc.conv3d(x, w, b, stride=1, padding=1))),
                       [rand(2, 4, 4, 4), rand(3, 2, 3, 3, 3), rand(3)]),
    "conv3d_stride": lambda: (lambda x, w: dc.dsum(dc.conv3d(x, w, stride=2)),
                              [rand(1, 6, 6, 6), rand(2, 1, 2, 2, 2)]),
    "conv_transpose3d": lambda: (lambda x, w, b: dc.dsum(dc.mul(dc.conv_transpose3d(x, w, b, stride=2),
                                                                dc.conv_transpose3d(x, w, b, stride=2))),
                                 [rand(2, 3, 3, 3), rand(2, 2, 2, 2, 2), rand(2)]),
    "trilinear_resample": lambda: (lambda x: dc.dsum(dc.mul(dc.trilinear_resample(x, (5, 3, 4)),
                                                            dc.trilinear_resample(x, (5, 3, 4)))),
                                   [rand(2, 3, 4, 3)]),
    "bilinear_sample2d": lambda: (lambda f, _c=RNG.uniform(0.5, 4.5, (10, 2)):
                                  dc.dsum(dc.mul(dc.bilinear_sample2d(f, _c),
                                                 dc.bilinear_sample2d(f, _c))),
                                  [rand(5, 5, 2)]),
    "attention": lambda: (lambda q, k, v: dc.dsum(dc.scaled_dot_attention(q, k, v)),
                          [rand(4, 3), rand(6, 3), rand(6, 2)]),
    "clip": lambda: (lambda a: dc.dsum(dc.clip(a, -0.5, 0.5)),
                     [DTensor(RNG.uniform(-2, 2, 9))]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_grad(name):
    f, inputs = OP_CASES[name]()
    assert dc.grad_check(f, inputs) < 1e-5


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self):
        p = dc.Param("w", np.array([1.0, -2.0]))
        p.tensor.grad = np.zeros(2)
        dc.adamw_step([p], lr=0.1, t=1)
        np.testing.assert_allclose(p.values, [1.0, -2.0])

    def test_first_step_scalar_hand_computed(self):
        # From zero state with gradient g, bias correction makes
        # m_hat = g and v_hat = g^2, so the update is -lr * g / (|g| + eps).
        g = 0.37
        lr = 1e-2
        p = dc.Param("w", np.array([0.5]))
        p.tensor.grad = np.array([g])
        dc.adamw_step([p], lr=lr, t=1)
        expected = 0.5 - lr * g / (abs(g) + 1e-8)
        np.testing.assert_allclose(p.values, [expected], rtol=1e-12)

    def test_decoupled_decay_only(self):
        p = dc.Param("w", np.array([2.0]))
        p.tensor.grad = np.zeros(1)
        dc.adamw_step([p], lr=0.1, weight_decay=0.1, t=1)
        np.testing.assert_allclose(p.values, [2.0 * (1 - 0.1 * 0.1)])

    def test_t_must_be_positive(self):
        with pytest.raises(ValueError):
            dc.adamw_step([], lr=0.1, t=0)


class TestSchedule:
    def test_endpoints(self):
        assert dc.cosine_warmup_lr(0, warmup=1000, total=4000, base_lr=1e-4) == 0.0
        assert dc.cosine_warmup_lr(1000, warmup=1000, total=4000, base_lr=1e-4) == 1e-4

    def test_cosine_midpoint(self):
        warmup, total = 1000, 5000
        lr = dc.cosine_warmup_lr((warmup + total) // 2, warmup, total, base_lr=2e-4)
        assert abs(lr - 1e-4) < 1e-12

    def test_total_le_warmup_rejected(self):
        with pytest.raises(ValueError):
            dc.cosine_warmup_lr(0, warmup=100, total=100)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        params = [dc.Param("a", rng.standard_normal((3, 4))),
                  dc.Param("b", rng.standard_normal(5))]
        path = tmp_path / "model.ilvc"
        dc.save_checkpoint(params, path)
        fresh = [dc.Param("a", np.zeros((3, 4))), dc.Param("b", np.zeros(5))]
        dc.load_checkpoint(fresh, path)
        for p, q in zip(params, fresh):
            np.testing.assert_allclose(p.values, q.values, atol=1e-7)

    def test_name_mismatch_rejected(self, tmp_path):
        params = [dc.Param("a", np.zeros(2))]
        path = tmp_path / "model.ilvc"
        dc.save_checkpoint(params, path)
        with pytest.raises(dc.CheckpointError, match="name"):
            dc.load_checkpoint([dc.Param("z", np.zeros(2))], path)

    def test_shape_mismatch_rejected(self, tmp_path):
        params = [dc.Param("a", np.zeros(2))]
        path = tmp_path / "model.ilvc"
        dc.save_checkpoint(params, path)
        with pytest.raises(dc.CheckpointError, match="shape"):
            dc.load_checkpoint([dc.Param("a", np.zeros(3))], path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ilvc"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(dc.CheckpointError, match="magic"):
            dc.load_checkpoint([], path)
