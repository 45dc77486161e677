"""Declarative network descriptions.

A :class:`NetworkSpec` is a linear list of :class:`LayerSpec` rows with
optional skip connections (``save=<id>`` on a producer, ``concat`` with
``skip=<id>`` on the consumer) and up to five attention-point tags. Specs
print to and parse from a one-layer-per-line text form::

    network caan_resnet 64 64 1
    conv 7 1 8 act=relu bn=1 @1
    residual_block 3 2 8 @2
    ...
"""
from dataclasses import dataclass, field
from typing import Optional

from .errors import SpecError
from .tensor import out_extent

KINDS = (
    "conv",
    "conv_transpose",
    "bneck",
    "residual_block",
    "batchnorm",
    "activation",
    "pool",
    "flatten",
    "fully_connected",
    "concat",
)
MAX_POINTS = 5


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(s):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 0
    filters: int = 0
    options: tuple = ()
    point: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.point is not None and not 1 <= self.point <= MAX_POINTS:
            raise SpecError(f"attention point must be in 1..{MAX_POINTS}, got {self.point}")
        object.__setattr__(self, "options", tuple(sorted(dict(self.options).items())))

    def opt(self, key, default=None):
        return dict(self.options).get(key, default)

    @property
    def pad(self):
        return self.opt("pad", (self.kernel - 1) // 2)

    @property
    def downsamples(self):
        if self.kind in ("conv", "bneck", "residual_block"):
            return self.stride >= 2
        if self.kind == "pool":
            return self.opt("fn") in ("max", "avg") and self.kernel >= 2
        return False

    def to_text(self):
        parts = [self.kind, str(self.kernel), str(self.stride), str(self.filters)]
        parts += [f"{k}={_fmt(v)}" for k, v in self.options]
        if self.point is not None:
            parts.append(f"@{self.point}")
        return " ".join(parts)

    @classmethod
    def from_text(cls, line):
        tokens = line.split()
        if len(tokens) < 4:
            raise SpecError(f"layer line needs 'kind k s filters', got {line!r}")
        kind, k, s, f, *rest = tokens
        opts, point = {}, None
        for tok in rest:
            if tok.startswith("@"):
                point = int(tok[1:])
            elif "=" in tok:
                key, val = tok.split("=", 1)
                opts[key] = _parse_value(val)
            else:
                raise SpecError(f"unexpected token {tok!r} in {line!r}")
        try:
            return cls(kind, int(k), int(s), int(f), tuple(opts.items()), point)
        except ValueError:
            raise SpecError(f"non-integer kernel/stride/filters in {line!r}") from None


def layer(kind, kernel=0, stride=0, filters=0, point=None, **options):
    return LayerSpec(kind, kernel, stride, filters, tuple(options.items()), point)


@dataclass(frozen=True)
class ShapeTable:
    input: tuple
    layers: tuple
    points: dict = field(default_factory=dict)
    downsampling_points: int = 0

    @property
    def output(self):
        return self.layers[-1] if self.layers else self.input


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        points = [(i, l.point) for i, l in enumerate(self.layers) if l.point is not None]
        ps = [p for _, p in points]
        if ps != sorted(set(ps)):
            raise SpecError(f"attention points must be strictly increasing, got {ps}")
        for (i0, _), (i1, p1) in zip(points, points[1:]):
            if not any(l.downsamples for l in self.layers[i0 + 1 : i1 + 1]):
                raise SpecError(f"attention point {p1} shares a downsampling stage with its predecessor")
        saved = set()
        for i, l in enumerate(self.layers):
            if l.kind == "concat" and l.opt("skip") not in saved:
                raise SpecError(f"layer {i}: concat references undeclared skip {l.opt('skip')!r}")
            if l.opt("save") is not None:
                saved.add(l.opt("save"))

    @property
    def points(self):
        return {l.point: i for i, l in enumerate(self.layers) if l.point is not None}

    def layer_index(self, point):
        try:
            return self.points[point]
        except KeyError:
            raise SpecError(f"{self.name} has no attention point {point}") from None

    def to_text(self):
        h, w, c = self.input_shape
        lines = [f"network {self.name} {h} {w} {c}"]
        lines += [l.to_text() for l in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not lines or not lines[0].startswith("network "):
            raise SpecError("spec text must start with 'network <name> H W C'")
        head = lines[0].split()
        if len(head) != 5:
            raise SpecError(f"bad header {lines[0]!r}")
        return cls(head[1], tuple(int(v) for v in head[2:]), tuple(LayerSpec.from_text(l) for l in lines[1:]))

    def with_input(self, shape):
        return NetworkSpec(self.name, shape, self.layers)


# ---------------------------------------------------------------- inference


def _layer_shape(i, l, shape, skips):
    h, w, c = shape
    k, s, f = l.kernel, l.stride, l.filters
    if l.kind in ("conv", "bneck", "residual_block"):
        if s < 1 or k < 1:
            raise SpecError(f"layer {i} ({l.kind}): kernel and stride must be >= 1")
        pad = l.pad if l.kind == "conv" else k // 2
        if k > h + 2 * pad or k > w + 2 * pad:
            raise SpecError(f"layer {i} ({l.kind}): kernel {k} exceeds padded extent {h}x{w}")
        if l.kind == "residual_block" and f < c:
            raise SpecError(f"layer {i} (residual_block): filters {f} below input channels {c}")
        return out_extent(h, k, s, pad), out_extent(w, k, s, pad), f
    if l.kind == "conv_transpose":
        if k != s:
            raise SpecError(f"layer {i} (conv_transpose): kernel must equal stride, got {k}/{s}")
        return h * s, w * s, f
    if l.kind in ("batchnorm", "activation"):
        return h, w, c
    if l.kind == "pool":
        fn = l.opt("fn")
        if fn == "global_avg":
            return 1, 1, c
        if fn not in ("max", "avg"):
            raise SpecError(f"layer {i}: unknown pool fn {fn!r}")
        if k < 1 or k > h or k > w or h % k or w % k:
            raise SpecError(f"layer {i} (pool): window {k} does not divide extent {h}x{w}")
        return h // k, w // k, c
    if l.kind == "flatten":
        return 1, 1, h * w * c
    if l.kind == "fully_connected":
        return 1, 1, f
    if l.kind == "concat":
        sh, sw, sc = skips[l.opt("skip")]
        if (sh, sw) != (h, w):
            raise SpecError(f"layer {i} (concat): skip extent {sh}x{sw} differs from {h}x{w}")
        return h, w, c + sc
    raise SpecError(f"layer {i}: unhandled kind {l.kind!r}")


def infer_shapes(spec):
    """Output extents of every layer; fails on the first inconsistent layer."""
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"{spec.name}: input shape must be three positive extents, got {spec.input_shape}")
    shape = spec.input_shape
    skips, out, points = {}, [], {}
    for i, l in enumerate(spec.layers):
        shape = _layer_shape(i, l, shape, skips)
        if min(shape) < 1:
            raise SpecError(f"layer {i} ({l.kind}) produces non-positive extent {shape}")
        out.append(shape)
        if l.opt("save") is not None:
            skips[l.opt("save")] = shape
        if l.point is not None:
            points[l.point] = shape
    return ShapeTable(spec.input_shape, tuple(out), points, sum(l.downsamples for l in spec.layers))


def param_count(spec):
    """Trainable parameter count derived from shapes alone."""
    table = infer_shapes(spec)
    shapes = (table.input,) + table.layers
    total = 0
    for i, l in enumerate(spec.layers):
        cin = shapes[i][2]
        k, f = l.kernel, l.filters
        if l.kind in ("conv", "conv_transpose"):
            total += k * k * cin * f
            if l.opt("bn", 0):
                total += 2 * f
            if l.opt("bias", 0 if l.opt("bn", 0) else 1):
                total += f
        elif l.kind == "bneck":
            e = l.opt("exp", cin)
            total += cin * e + 2 * e + k * k * e + 2 * e + e * f + 2 * f
        elif l.kind == "residual_block":
            total += k * k * cin * f + 2 * f + k * k * f * f + 2 * f
        elif l.kind == "batchnorm":
            total += 2 * cin
        elif l.kind == "fully_connected":
            fin = shapes[i][0] * shapes[i][1] * cin
            total += fin * f + f
    return total


def validate_attention_alignment(adn, caan, p):
    """Check that both networks expose point ``p`` at the same spatial extent."""
    if not 1 <= p <= MAX_POINTS:
        raise SpecError(f"attention point must be in 1..{MAX_POINTS}, got {p}")
    ta, tc = infer_shapes(adn), infer_shapes(caan)
    for spec, table in ((adn, ta), (caan, tc)):
        if p not in table.points:
            raise SpecError(f"{spec.name} has no attention point {p}")
    ea, ec = ta.points[p][:2], tc.points[p][:2]
    if ea != ec:
        raise SpecError(f"attention point {p} extent mismatch: {adn.name} {ea[0]}x{ea[1]} vs {caan.name} {ec[0]}x{ec[1]}")
    return True


def check_downsampling(adn, caan):
    """ADN must downsample at least as often as CAAN."""
    na, nc = infer_shapes(adn).downsampling_points, infer_shapes(caan).downsampling_points
    if na < nc:
        raise SpecError(f"{adn.name} has {na} downsampling points, fewer than {caan.name} ({nc})")
    return True


# ------------------------------------------------------------------ builders


def _scaled(c, scale):
    return max(1, int(round(c * scale)))


def build_unet(levels=3, base_filters=8, input_extent=32, in_channels=1, out_channels=2):
    """Encoder/decoder colorizer; ``build_unet(8, 64, 256)`` is the full-size form."""
    if levels < 2:
        raise SpecError(f"U-Net needs at least 2 levels, got {levels}")
    if input_extent % (2**levels):
        raise SpecError(f"input extent {input_extent} not divisible by 2**{levels}")
    enc = [min(base_filters * 2**i, base_filters * 8) for i in range(levels)]
    rows = []
    for i, f in enumerate(enc):
        opts = dict(pad=1, act="leaky_relu", alpha=0.2, save=f"e{i + 1}")
        if i > 0:
            opts["bn"] = 1
        rows.append(layer("conv", 4, 2, f, **opts))
    for j in range(levels - 1, 0, -1):
        rows.append(layer("conv_transpose", 2, 2, enc[j - 1], bn=1, act="relu"))
        rows.append(layer("concat", skip=f"e{j}"))
    rows.append(layer("conv_transpose", 2, 2, out_channels, act="sigmoid", init="zero"))
    return NetworkSpec(f"unet{levels}", (input_extent, input_extent, in_channels), rows)


CAAN_VARIANTS = ("resnet_based", "mobilenet_like")
ADN_VARIANTS = ("resnet18_like", "vgg16_like", "basic_cnn")

# (kernel, filters, expansion, stride) rows per block; points after each block.
_MOBILENET_BLOCKS = (
    ((3, 16, 16, 2),),
    ((3, 24, 72, 2), (3, 24, 88, 1)),
    ((5, 40, 96, 2), (5, 40, 240, 1), (5, 40, 240, 1), (5, 48, 120, 1), (5, 48, 144, 1)),
    ((5, 96, 288, 2), (5, 96, 576, 1), (5, 96, 576, 1)),
)


def build_caan(variant="resnet_based", scale=0.125, input_extent=64, outputs=2, in_channels=1):
    """Attention network: five feature blocks, a tag after each, sigmoid head."""
    if scale <= 0:
        raise SpecError(f"scale must be positive, got {scale}")
    rows = []
    if variant == "resnet_based":
        f = [_scaled(c, scale) for c in (64, 64, 128, 256, 512)]
        rows.append(layer("conv", 7, 1, f[0], point=1, bn=1, act="relu"))
        for p, c in enumerate(f[1:], start=2):
            rows.append(layer("residual_block", 3, 2, c, point=p))
        rows += [layer("pool", fn="global_avg"), layer("flatten"), layer("fully_connected", filters=outputs, act="sigmoid")]
    elif variant == "mobilenet_like":
        rows.append(layer("conv", 3, 1, _scaled(16, scale), point=1, bn=1, act="relu"))
        for p, block in enumerate(_MOBILENET_BLOCKS, start=2):
            for j, (k, c, e, s) in enumerate(block):
                tag = p if j == len(block) - 1 else None
                rows.append(layer("bneck", k, s, _scaled(c, scale), point=tag, exp=_scaled(e, scale)))
        rows += [
            layer("conv", 1, 1, _scaled(576, scale), bn=1, act="relu"),
            layer("pool", fn="global_avg"),
            layer("conv", 1, 1, _scaled(1280, scale), act="relu"),
            layer("conv", 1, 1, outputs, act="sigmoid"),
            layer("flatten"),
        ]
    else:
        raise SpecError(f"unknown CAAN variant {variant!r}; choose from {CAAN_VARIANTS}")
    return NetworkSpec(f"caan_{variant}", (input_extent, input_extent, in_channels), rows)


def build_adn(variant="basic_cnn", scale=0.125, input_extent=64, in_channels=3):
    """Detection network with tags 1..5 aligned to the CAAN extents at equal input size."""
    if scale <= 0:
        raise SpecError(f"scale must be positive, got {scale}")
    head = [layer("pool", fn="global_avg"), layer("flatten"), layer("fully_connected", filters=1, act="sigmoid")]
    rows = []
    if variant == "basic_cnn":
        w = [_scaled(c, scale) for c in (64, 128, 256, 512, 512, 512)]
        rows.append(layer("conv", 3, 1, w[0], point=1, bn=1, act="relu"))
        for p, c in enumerate(w[1:5], start=2):
            rows.append(layer("conv", 3, 2, c, point=p, bn=1, act="relu"))
        rows.append(layer("conv", 3, 2, w[5], bn=1, act="relu"))
        rows += head
    elif variant == "resnet18_like":
        rows.append(layer("conv", 3, 1, _scaled(64, scale), point=1, bn=1, act="relu"))
        for p, c in enumerate((64, 128, 256, 512), start=2):
            c = _scaled(c, scale)
            rows.append(layer("residual_block", 3, 2, c))
            rows.append(layer("residual_block", 3, 1, c, point=p))
        rows.append(layer("pool", 2, 2, fn="max"))
        rows += head
    elif variant == "vgg16_like":
        groups = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
        for p, (c, n) in enumerate(groups, start=1):
            for j in range(n):
                rows.append(layer("conv", 3, 1, _scaled(c, scale), point=p if j == n - 1 else None, act="relu"))
            rows.append(layer("pool", 2, 2, fn="max"))
        rows += [layer("flatten"), layer("fully_connected", filters=_scaled(4096, scale), act="relu"), layer("fully_connected", filters=1, act="sigmoid")]
    else:
        raise SpecError(f"unknown ADN variant {variant!r}; choose from {ADN_VARIANTS}")
    return NetworkSpec(f"adn_{variant}", (input_extent, input_extent, in_channels), rows)
