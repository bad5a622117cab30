"""Finite-difference cases for every differentiable op, shared by unit and acceptance tests."""
import numpy as np

from pedcast.nn import functional as F
from pedcast.nn import tensor as T
from pedcast.nn.gradcheck import gradcheck, weighted_sum
from pedcast.nn.tensor import Tensor


def _leaf(rng, *shape, away_from_zero=False, positive=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (0.2 + np.abs(x))
    if positive:
        x = 0.5 + np.abs(x)
    return Tensor(x, requires_grad=True)


def op_cases():
    """Name -> builder returning ``(fn, tensors)`` for :func:`gradcheck`."""
    cases = {}

    def case(name):
        def deco(builder):
            cases[name] = builder
            return builder
        return deco

    @case("add_broadcast")
    def _(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
        head = rng.normal(size=(3, 4))
        return (lambda: ((a + b) * Tensor(head)).sum()), {"a": a, "b": b}

    @case("sub_neg")
    def _(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 1)
        return (lambda: weighted_sum(-(a - b), np.random.default_rng(1))), {"a": a, "b": b}

    @case("mul_div")
    def _(rng):
        a, b = _leaf(rng, 3, 2), _leaf(rng, 3, 2, positive=True)
        return (lambda: weighted_sum(a * b / (b + 1.0), np.random.default_rng(2))), {"a": a, "b": b}

    @case("matmul")
    def _(rng):
        a, b = _leaf(rng, 4, 3), _leaf(rng, 3, 5)
        return (lambda: weighted_sum(a @ b, np.random.default_rng(3))), {"a": a, "b": b}

    @case("exp_log")
    def _(rng):
        a, b = _leaf(rng, 5), _leaf(rng, 5, positive=True)
        return (lambda: weighted_sum(T.exp(a) + T.log(b), np.random.default_rng(4))), {"a": a, "b": b}

    @case("sigmoid_tanh")
    def _(rng):
        a = _leaf(rng, 6)
        return (lambda: weighted_sum(T.sigmoid(a) * T.tanh(a), np.random.default_rng(5))), {"a": a}

    @case("relu")
    def _(rng):
        a = _leaf(rng, 4, 3, away_from_zero=True)
        return (lambda: weighted_sum(T.relu(a), np.random.default_rng(6))), {"a": a}

    @case("sum_mean_axes")
    def _(rng):
        a = _leaf(rng, 2, 3, 4)
        return (lambda: weighted_sum(a.sum(axis=1), np.random.default_rng(8)) + a.mean(axis=(0, 2)).sum()
                * 3.0), {"a": a}

    @case("reshape_transpose_getitem")
    def _(rng):
        a = _leaf(rng, 2, 3, 4)
        return (lambda: weighted_sum(T.transpose(T.reshape(a, (6, 4)), (1, 0))[1:3, ::2],
                                     np.random.default_rng(9))), {"a": a}

    @case("take_rows_repeated")
    def _(rng):
        a = _leaf(rng, 5, 2)
        return (lambda: weighted_sum(T.take_rows(a, np.array([0, 3, 3, 1])), np.random.default_rng(10))), {"a": a}

    @case("concat_stack")
    def _(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
        return (lambda: weighted_sum(T.concat([a, b], axis=1), np.random.default_rng(11))
                + weighted_sum(T.stack([a, a * 2.0], axis=0), np.random.default_rng(12))), {"a": a, "b": b}

    for stride in (1, 2):
        # the narrow-output cases take the per-tap shifted-add path
        for cin, cout, label in ((2, 5, "im2col"), ((6, 2) if stride == 1 else (16, 1)) + ("shift",)):
            @case(f"conv2d_k3_s{stride}_{label}")
            def _(rng, stride=stride, cin=cin, cout=cout):
                x, w, b = _leaf(rng, 2, 6, 6, cin), _leaf(rng, 3, 3, cin, cout), _leaf(rng, cout)
                return (lambda: weighted_sum(F.conv2d(x, w, b, stride=stride), np.random.default_rng(13))), \
                    {"x": x, "w": w, "b": b}

        @case(f"conv2d_k1_s{stride}")
        def _(rng, stride=stride):
            x, w, b = _leaf(rng, 1, 4, 4, 3), _leaf(rng, 1, 1, 3, 2), _leaf(rng, 2)
            return (lambda: weighted_sum(F.conv2d(x, w, b, stride=stride), np.random.default_rng(14))), \
                {"x": x, "w": w, "b": b}

    for k, s in ((2, 2), (4, 4), (3, 2)):
        @case(f"deconv2d_k{k}_s{s}")
        def _(rng, k=k, s=s):
            x, w, b = _leaf(rng, 2, 3, 3, 2), _leaf(rng, k, k, 2, 3), _leaf(rng, 3)
            return (lambda: weighted_sum(F.deconv2d(x, w, b, stride=s), np.random.default_rng(15))), \
                {"x": x, "w": w, "b": b}

    @case("linear")
    def _(rng):
        x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
        return (lambda: weighted_sum(F.linear(x, w, b), np.random.default_rng(16))), {"x": x, "w": w, "b": b}

    @case("global_avg_pool")
    def _(rng):
        x = _leaf(rng, 2, 3, 4, 5)
        return (lambda: weighted_sum(F.global_avg_pool(x), np.random.default_rng(17))), {"x": x}

    @case("softmax")
    def _(rng):
        x = _leaf(rng, 3, 4)
        return (lambda: weighted_sum(F.softmax(x, axis=1), np.random.default_rng(18))), {"x": x}

    @case("smooth_l1")
    def _(rng):
        p = Tensor(np.array([0.1, -0.4, 1.7, -2.5, 0.8, 3.0]), requires_grad=True)
        t = Tensor(np.array([0.3, 0.2, 0.1, -0.2, -0.9, 1.1]), requires_grad=True)
        return (lambda: weighted_sum(F.smooth_l1(p, t), np.random.default_rng(19))), {"p": p, "t": t}

    @case("binary_cross_entropy")
    def _(rng):
        z = _leaf(rng, 7)
        tgt = (rng.random(7) > 0.5).astype(float)
        return (lambda: weighted_sum(F.binary_cross_entropy(z, tgt), np.random.default_rng(20))), {"z": z}

    @case("segment_max")
    def _(rng):
        x = _leaf(rng, 9, 3)
        starts = np.array([0, 2, 3, 7])
        return (lambda: weighted_sum(F.segment_max(x, starts), np.random.default_rng(21))), {"x": x}

    @case("scatter_grid")
    def _(rng):
        x = _leaf(rng, 3, 2)
        coords = np.array([[0, 1], [2, 2], [1, 0]])
        return (lambda: weighted_sum(F.scatter_grid(x, coords, (3, 3)), np.random.default_rng(22))), {"x": x}

    @case("bilinear_sample")
    def _(rng):
        m = _leaf(rng, 2, 5, 6, 3)
        u = rng.uniform(-0.5, 4.5, (4, 3))
        v = rng.uniform(-0.5, 5.5, (4, 3))
        fr = rng.integers(0, 2, (4, 3))
        return (lambda: weighted_sum(F.bilinear_sample(m, fr, u, v), np.random.default_rng(23))), {"m": m}

    return cases


def worst_error(builder, seed=0, coords=None):
    fn, tensors = builder(np.random.default_rng(seed))
    errs = gradcheck(fn, tensors, step=1e-5, coords_per_tensor=coords)
    return max(errs.values())
