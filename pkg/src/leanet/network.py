"""Executable networks compiled from a :class:`~leanet.netspec.NetworkSpec`."""
import numpy as np

from . import tensor as T
from .errors import SpecError, ShapeError
from .netspec import infer_shapes


class Network:
    """Parameters, batch-norm statistics and a forward pass for one spec.

    Parameter names are ``"<layer index>.<role>"`` (e.g. ``"3.conv1.w"``),
    which keeps checkpoints readable and stable across runs.
    """

    def __init__(self, spec, rng):
        self.spec = spec
        self.shapes = infer_shapes(spec)
        self.params = {}
        self.bn = {}
        shapes = (self.shapes.input,) + self.shapes.layers
        for i, l in enumerate(spec.layers):
            self._init_layer(i, l, shapes[i][2], shapes[i], rng)

    # -- construction

    def _param(self, name, data):
        self.params[name] = T.parameter(data, name=name)

    def _conv_params(self, prefix, rng, k, cin, cout, zero=False, bias=False):
        w = np.zeros((k, k, cin, cout), np.float32) if zero else T.he_uniform(rng, (k, k, cin, cout), k * k * cin)
        self._param(prefix + ".w", w)
        if bias:
            self._param(prefix + ".b", np.zeros(cout, np.float32))

    def _bn_params(self, prefix, c):
        self._param(prefix + ".gamma", np.ones(c, np.float32))
        self._param(prefix + ".beta", np.zeros(c, np.float32))
        self.bn[prefix] = T.BatchNormState(c)

    def _init_layer(self, i, l, cin, in_shape, rng):
        k, f = l.kernel, l.filters
        zero = l.opt("init") == "zero"
        if l.kind in ("conv", "conv_transpose"):
            bn = bool(l.opt("bn", 0))
            self._conv_params(f"{i}.conv", rng, k, cin, f, zero=zero, bias=bool(l.opt("bias", 0 if bn else 1)))
            if bn:
                self._bn_params(f"{i}.bn", f)
        elif l.kind == "residual_block":
            self._conv_params(f"{i}.conv1", rng, k, cin, f)
            self._bn_params(f"{i}.bn1", f)
            self._conv_params(f"{i}.conv2", rng, k, f, f)
            self._bn_params(f"{i}.bn2", f)
        elif l.kind == "bneck":
            e = l.opt("exp", cin)
            self._conv_params(f"{i}.expand", rng, 1, cin, e)
            self._bn_params(f"{i}.bn1", e)
            self._param(f"{i}.dw.w", T.he_uniform(rng, (k, k, e), k * k))
            self._bn_params(f"{i}.bn2", e)
            self._conv_params(f"{i}.project", rng, 1, e, f)
            self._bn_params(f"{i}.bn3", f)
        elif l.kind == "batchnorm":
            self._bn_params(f"{i}.bn", cin)
        elif l.kind == "fully_connected":
            fin = in_shape[0] * in_shape[1] * in_shape[2]
            w = np.zeros((fin, f), np.float32) if zero else T.he_uniform(rng, (fin, f), fin)
            self._param(f"{i}.fc.w", w)
            self._param(f"{i}.fc.b", np.zeros(f, np.float32))

    def param_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def cast(self, dtype):
        """Convert parameters and running statistics in place (float64 for finite-difference checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for st in self.bn.values():
            if st.initialized:
                st.mean, st.var = st.mean.astype(dtype), st.var.astype(dtype)
        return self

    # -- state

    def state_dict(self):
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            if st.initialized:
                out[name + ".running_mean"] = st.mean
                out[name + ".running_var"] = st.var
        return out

    def load_state_dict(self, state):
        for name, p in self.params.items():
            if name not in state:
                raise SpecError(f"{self.spec.name}: missing parameter {name!r} in state")
            if state[name].shape != p.shape:
                raise SpecError(f"{self.spec.name}: parameter {name!r} has shape {state[name].shape}, expected {p.shape}")
            p.data = np.array(state[name], dtype=np.float32)
        for name, st in self.bn.items():
            if name + ".running_mean" in state:
                st.mean = np.array(state[name + ".running_mean"], dtype=np.float32)
                st.var = np.array(state[name + ".running_var"], dtype=np.float32)

    # -- forward

    def _bn(self, prefix, x, train):
        return T.batchnorm(x, self.params[prefix + ".gamma"], self.params[prefix + ".beta"], self.bn[prefix], train)

    def _layer(self, i, l, x, train, skips):
        p = self.params
        if l.kind == "conv":
            x = T.conv2d(x, p[f"{i}.conv.w"], p.get(f"{i}.conv.b"), stride=l.stride, pad=l.pad)
            if l.opt("bn", 0):
                x = self._bn(f"{i}.bn", x, train)
            return T.activate(x, l.opt("act", "linear"), l.opt("alpha", 0.2))
        if l.kind == "conv_transpose":
            x = T.conv2d_transpose(x, p[f"{i}.conv.w"], p.get(f"{i}.conv.b"), stride=l.stride)
            if l.opt("bn", 0):
                x = self._bn(f"{i}.bn", x, train)
            return T.activate(x, l.opt("act", "linear"), l.opt("alpha", 0.2))
        if l.kind == "residual_block":
            pad = l.kernel // 2
            h = T.conv2d(x, p[f"{i}.conv1.w"], stride=l.stride, pad=pad)
            h = T.activate(self._bn(f"{i}.bn1", h, train), "relu")
            h = self._bn(f"{i}.bn2", T.conv2d(h, p[f"{i}.conv2.w"], pad=pad), train)
            sc = x if l.stride == 1 and x.shape[-1] == l.filters else T.shortcut(x, l.stride, l.filters)
            return T.activate(T.elementwise(h, sc, "add"), "relu")
        if l.kind == "bneck":
            h = T.activate(self._bn(f"{i}.bn1", T.conv2d(x, p[f"{i}.expand.w"]), train), "relu")
            h = T.depthwise_conv2d(h, p[f"{i}.dw.w"], stride=l.stride, pad=l.kernel // 2)
            h = T.activate(self._bn(f"{i}.bn2", h, train), "relu")
            h = self._bn(f"{i}.bn3", T.conv2d(h, p[f"{i}.project.w"]), train)
            if l.stride == 1 and x.shape[-1] == l.filters:
                h = T.elementwise(h, x, "add")
            return h
        if l.kind == "batchnorm":
            return self._bn(f"{i}.bn", x, train)
        if l.kind == "activation":
            return T.activate(x, l.opt("fn", "relu"), l.opt("alpha", 0.2))
        if l.kind == "pool":
            return T.pool(x, l.opt("fn"), l.kernel)
        if l.kind == "flatten":
            return T.flatten(x)
        if l.kind == "fully_connected":
            if x.ndim != 2:
                x = T.flatten(x)
            x = T.dense(x, p[f"{i}.fc.w"], p[f"{i}.fc.b"])
            return T.activate(x, l.opt("act", "linear"), l.opt("alpha", 0.2))
        if l.kind == "concat":
            return T.concat([x, skips[l.opt("skip")]], axis=-1)
        raise SpecError(f"layer {i}: unhandled kind {l.kind!r}")

    def forward(self, x, train=False, point=None, hook=None, taps=None):
        """Run the network on an ``N x H x W x C`` batch.

        When ``point`` and ``hook`` are given, the output of the layer tagged
        with that attention point is replaced by ``hook(features)``. Layer
        outputs at tagged points are recorded into ``taps`` (a dict keyed by
        point) when supplied.
        """
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.shapes.input:
            raise ShapeError(f"{self.spec.name} expects N x {self.shapes.input}, got {x.shape}")
        skips = {}
        for i, l in enumerate(self.spec.layers):
            x = self._layer(i, l, x, train, skips)
            if l.point is not None:
                if taps is not None:
                    taps[l.point] = x
                if hook is not None and l.point == point:
                    x = hook(x)
            if l.opt("save") is not None:
                skips[l.opt("save")] = x
        return x
