"""Randomized gradient-check cases shared by the unit and acceptance suites.

Every case returns ``(loss_fn, leaves)`` in float64. Outputs are contracted
with a fixed random weight so that gradients do not cancel by symmetry.
"""
import numpy as np

from leanet import tensor as T
from leanet.attention import LeaModel, apply_attention, attention_map, detach_attention, total_loss
from leanet.netspec import build_adn, build_caan


def _leaf(rng, *shape, positive=False):
    data = rng.uniform(0.1, 1.0, size=shape) if positive else rng.normal(size=shape)
    return T.Tensor(data, requires_grad=True, dtype=np.float64)


def _contract(out, rng):
    w = T.Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return T.reduce_sum(T.elementwise(out, w, "mul"))


def _unary(op, *shape, positive=False):
    def build(rng):
        x = _leaf(rng, *shape, positive=positive)
        w = rng.normal(size=op(x).shape)
        return (lambda: T.reduce_sum(T.elementwise(op(x), T.Tensor(w, dtype=np.float64), "mul"))), [x]

    return build


def _with_params(make):
    """``make(rng)`` returns ``(fn, leaves)`` where ``fn()`` is the un-contracted output."""

    def build(rng):
        fn, leaves = make(rng)
        w = T.Tensor(rng.normal(size=fn().shape), dtype=np.float64)
        return (lambda: T.reduce_sum(T.elementwise(fn(), w, "mul"))), leaves

    return build


def _conv(n, h, cin, cout, k, stride, pad, bias=False):
    def make(rng):
        x, w = _leaf(rng, n, h, h, cin), _leaf(rng, k, k, cin, cout)
        b = _leaf(rng, cout) if bias else None
        leaves = [x, w] + ([b] if bias else [])
        return (lambda: T.conv2d(x, w, b, stride=stride, pad=pad)), leaves

    return _with_params(make)


def _depthwise(n, h, c, k, stride, pad):
    def make(rng):
        x, w = _leaf(rng, n, h, h, c), _leaf(rng, k, k, c)
        return (lambda: T.depthwise_conv2d(x, w, stride=stride, pad=pad)), [x, w]

    return _with_params(make)


def _transpose(n, h, cin, cout, k):
    def make(rng):
        x, w, b = _leaf(rng, n, h, h, cin), _leaf(rng, k, k, cin, cout), _leaf(rng, cout)
        return (lambda: T.conv2d_transpose(x, w, b, stride=k)), [x, w, b]

    return _with_params(make)


def _dense(make_rng=None):
    def make(rng):
        x, w, b = _leaf(rng, 3, 7), _leaf(rng, 7, 4), _leaf(rng, 4)
        return (lambda: T.dense(x, w, b)), [x, w, b]

    return _with_params(make)


def _batchnorm(train):
    def make(rng):
        x, g, b = _leaf(rng, 3, 4, 4, 5), _leaf(rng, 5), _leaf(rng, 5)
        state = T.BatchNormState(5)
        state.mean, state.var = rng.normal(size=5), rng.uniform(0.5, 2.0, size=5)
        return (lambda: T.batchnorm(x, g, b, state if not train else None, train=train)), [x, g, b]

    return _with_params(make)


def _binary(kind, sa, sb):
    def make(rng):
        a, b = _leaf(rng, *sa), _leaf(rng, *sb)
        return (lambda: T.elementwise(a, b, kind)), [a, b]

    return _with_params(make)


def _concat():
    def make(rng):
        a, b = _leaf(rng, 2, 3, 3, 2), _leaf(rng, 2, 3, 3, 4)
        return (lambda: T.concat([a, b])), [a, b]

    return _with_params(make)


def _bce():
    def build(rng):
        p = T.Tensor(rng.uniform(0.05, 0.95, size=(6, 1)), requires_grad=True, dtype=np.float64)
        y = rng.integers(0, 2, size=(6, 1))
        return (lambda: T.bce(p, y)), [p]

    return build


def _mae():
    def build(rng):
        p = _leaf(rng, 4, 3, 3, 2)
        target = p.data + rng.choice([-1.0, 1.0], size=p.shape) * rng.uniform(0.1, 1.0, size=p.shape)
        return (lambda: T.mae(p, target)), [p]

    return build


def _attention():
    def make(rng):
        f, g = _leaf(rng, 2, 4, 4, 8), _leaf(rng, 2, 4, 4, 3)
        return (lambda: apply_attention(f, attention_map(g))), [f, g]

    return _with_params(make)


OP_CASES = {
    "conv3x3_s1": _conv(2, 6, 3, 4, 3, 1, 1),
    "conv3x3_s2": _conv(2, 7, 2, 3, 3, 2, 1),
    "conv7x7_stem": _conv(2, 8, 1, 2, 7, 1, 3),
    "conv1x1": _conv(2, 4, 5, 3, 1, 1, 0),
    "conv_bias": _conv(1, 5, 2, 3, 3, 1, 1, bias=True),
    "conv4x4_s2": _conv(2, 8, 2, 3, 4, 2, 1),
    "depthwise_s1": _depthwise(2, 5, 3, 3, 1, 1),
    "depthwise_s2": _depthwise(2, 7, 2, 5, 2, 2),
    "conv_transpose": _transpose(2, 3, 3, 2, 2),
    "dense": _dense(),
    "batchnorm_train": _batchnorm(True),
    "batchnorm_eval": _batchnorm(False),
    "pool_max": _unary(lambda x: T.pool(x, "max", 2), 2, 4, 4, 3),
    "pool_avg": _unary(lambda x: T.pool(x, "avg", 2), 2, 4, 4, 3),
    "pool_global_avg": _unary(lambda x: T.pool(x, "global_avg"), 2, 3, 3, 4),
    "pool_channel_avg": _unary(lambda x: T.pool(x, "channel_avg"), 2, 3, 3, 4),
    "relu": _unary(lambda x: T.activate(x, "relu"), 3, 4, 5),
    "leaky_relu": _unary(lambda x: T.activate(x, "leaky_relu", 0.2), 3, 4, 5),
    "sigmoid": _unary(lambda x: T.activate(x, "sigmoid"), 3, 4, 5),
    "add_broadcast": _binary("add", (2, 3, 3, 4), (3, 3, 1)),
    "mul_broadcast": _binary("mul", (2, 3, 3, 4), (2, 3, 3, 1)),
    "scale": _unary(lambda x: T.scale(x, -1.7), 4, 3),
    "add_scalar": _unary(lambda x: T.add_scalar(T.activate(x, "sigmoid"), 1.0), 4, 3),
    "concat": _concat(),
    "reshape_flatten": _unary(lambda x: T.flatten(T.reshape(x, (2, 6, 4))), 2, 4, 6),
    "shortcut": _unary(lambda x: T.shortcut(x, 2, 5), 2, 4, 4, 3),
    "reduce_sum": _unary(lambda x: T.scale(T.reduce_sum(x), 1.0), 3, 4),
    "reduce_mean": _unary(lambda x: T.reduce_mean(x), 3, 4),
    "bce": _bce(),
    "mae": _mae(),
    "attention": _attention(),
}


def lea_case(caan_variant, point, detection_only=False, scale=0.125, extent=64):
    """A desk-scale joint model in float64; probes CAAN parameters up to the attention point.

    With ``detection_only`` the loss is the detector term alone, so the CAAN
    parameters receive gradient only through the attention map.
    """

    def build(rng):
        caan = build_caan(caan_variant, scale, extent, outputs=1)
        adn = build_adn("basic_cnn", scale, extent)
        model = LeaModel(caan, adn, point, seed=int(rng.integers(1 << 30)))
        model.caan.cast(np.float64)
        model.adn.cast(np.float64)
        x = rng.uniform(0, 1, size=(2, extent, extent, 3))
        xa = rng.uniform(0, 1, size=(2, extent, extent, 1))
        y = np.array([0, 1])
        last = model.caan.spec.layer_index(point)
        caan_names = [n for n in model.caan.params if int(n.split(".")[0]) <= last]
        picked = [model.caan.params[n] for n in rng.choice(caan_names, size=min(3, len(caan_names)), replace=False)]
        picked += [model.adn.params[n] for n in rng.choice(sorted(model.adn.params), size=2, replace=False)]

        def loss():
            res = model.forward(x, xa, train=True)
            parts = total_loss(res.y_ad, res.y_att, y)
            return parts.detection if detection_only else parts.total

        return loss, picked

    return build


def all_cases(count=64):
    """``count`` (name, builder) pairs: every op at least once, plus joint-model cases."""
    lea = [
        (f"lea_{v}_p{p}{'_attention_path' if d else ''}", lea_case(v, p, d))
        for v, p, d in (
            ("resnet_based", 1, False),
            ("resnet_based", 3, False),
            ("resnet_based", 2, True),
            ("resnet_based", 5, True),
            ("mobilenet_like", 2, False),
            ("mobilenet_like", 4, True),
        )
    ]
    ops = list(OP_CASES.items())
    cases = list(lea)
    i = 0
    while len(cases) < count:
        name, build = ops[i % len(ops)]
        cases.append((f"{name}#{i // len(ops)}", build))
        i += 1
    return cases[:count]


def attention_path_only_differs(rng):
    """CAAN gradients with and without the attention pathway cut; returns the max abs difference."""
    caan = build_caan("resnet_based", 0.125, 64, outputs=1)
    adn = build_adn("basic_cnn", 0.125, 64)
    x = rng.uniform(0, 1, size=(4, 64, 64, 3)).astype(np.float32)
    xa = rng.uniform(0, 1, size=(4, 64, 64, 1)).astype(np.float32)
    y = np.array([0, 1, 0, 1])
    out = []
    for hook in (None, detach_attention):
        model = LeaModel(caan, adn, 2, seed=3, hook=hook)
        res = model.forward(x, xa, train=True)
        grads = T.backward(total_loss(res.y_ad, res.y_att, y).total)
        out.append({n: grads[p] for n, p in model.caan.params.items() if p in grads})
    return max(float(np.abs(out[0][n] - out[1][n]).max()) for n in out[0])
