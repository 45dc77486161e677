import numpy as np
import pytest

from leanet.errors import SpecError
from leanet.netspec import (
    LayerSpec,
    NetworkSpec,
    build_adn,
    build_caan,
    build_unet,
    check_downsampling,
    infer_shapes,
    layer,
    param_count,
    validate_attention_alignment,
)
from leanet.network import Network

# Full-size colorizer, one entry per row after the input: (layer kind, output extent, channels).
UNET_ROWS = [
    ("conv", 128, 64),
    ("conv", 64, 128),
    ("conv", 32, 256),
    ("conv", 16, 512),
    ("conv", 8, 512),
    ("conv", 4, 512),
    ("conv", 2, 512),
    ("conv", 1, 512),
    ("conv_transpose", 2, 512),
    ("concat", 2, 1024),
    ("conv_transpose", 4, 512),
    ("concat", 4, 1024),
    ("conv_transpose", 8, 512),
    ("concat", 8, 1024),
    ("conv_transpose", 16, 512),
    ("concat", 16, 1024),
    ("conv_transpose", 32, 256),
    ("concat", 32, 512),
    ("conv_transpose", 64, 128),
    ("concat", 64, 256),
    ("conv_transpose", 128, 64),
    ("concat", 128, 128),
    ("conv_transpose", 256, 2),
]


def test_full_unet_matches_reference_rows():
    spec = build_unet(8, 64, 256)
    table = infer_shapes(spec)
    assert table.input == (256, 256, 1)
    assert len(spec.layers) == len(UNET_ROWS)
    for l, shape, (kind, extent, channels) in zip(spec.layers, table.layers, UNET_ROWS):
        assert l.kind == kind
        assert shape == (extent, extent, channels)


def test_unet_batchnorm_placement():
    spec = build_unet(8, 64, 256)
    bn = [bool(l.opt("bn", 0)) for l in spec.layers if l.kind != "concat"]
    assert bn[0] is False and bn[-1] is False
    assert all(bn[1:-1])
    assert spec.layers[-1].opt("act") == "sigmoid"
    assert all(l.opt("alpha") == 0.2 for l in spec.layers if l.opt("act") == "leaky_relu")


def test_unet_rejects_indivisible_extent():
    with pytest.raises(SpecError):
        build_unet(3, 8, 36)


@pytest.mark.parametrize("variant", ["resnet_based", "mobilenet_like"])
def test_caan_exposes_five_points(variant):
    spec = build_caan(variant, 1.0, 256)
    assert sorted(spec.points) == [1, 2, 3, 4, 5]
    table = infer_shapes(spec)
    assert [table.points[p][0] for p in range(1, 6)] == [256, 128, 64, 32, 16]


@pytest.mark.parametrize("adn", ["basic_cnn", "resnet18_like", "vgg16_like"])
@pytest.mark.parametrize("caan", ["resnet_based", "mobilenet_like"])
def test_every_point_aligns(adn, caan):
    a, c = build_adn(adn, 0.125, 64), build_caan(caan, 0.125, 64)
    check_downsampling(a, c)
    for p in range(1, 6):
        assert validate_attention_alignment(a, c, p)


def test_alignment_mismatch_is_reported():
    a = build_adn("basic_cnn", 0.125, 64)
    c = build_caan("resnet_based", 0.125, 32)
    with pytest.raises(SpecError, match="extent mismatch"):
        validate_attention_alignment(a, c, 2)
    with pytest.raises(SpecError):
        validate_attention_alignment(a, build_caan("resnet_based", 0.125, 64), 6)


def test_text_roundtrip_preserves_specs():
    for spec in (build_unet(3, 8, 32), build_caan("mobilenet_like"), build_adn("vgg16_like")):
        again = NetworkSpec.from_text(spec.to_text())
        assert again == spec
        assert again.to_text() == spec.to_text()


def test_layer_text_parsing():
    l = LayerSpec.from_text("conv 3 2 16 bn=1 act=relu @2")
    assert (l.kind, l.kernel, l.stride, l.filters, l.point) == ("conv", 3, 2, 16, 2)
    assert l.opt("act") == "relu" and l.opt("bn") == 1
    with pytest.raises(SpecError):
        LayerSpec.from_text("conv x 2 16")


def test_points_must_be_separated_by_downsampling():
    with pytest.raises(SpecError):
        NetworkSpec("bad", (8, 8, 1), (layer("conv", 3, 1, 4, point=1), layer("conv", 3, 1, 4, point=2)))


def test_concat_requires_saved_skip():
    with pytest.raises(SpecError):
        NetworkSpec("bad", (8, 8, 1), (layer("conv", 3, 1, 4), layer("concat", skip="e1")))


@pytest.mark.parametrize(
    "spec",
    [build_unet(3, 8, 32), build_caan("resnet_based", 0.125, 64, outputs=1), build_caan("mobilenet_like", 0.125, 64), build_adn("basic_cnn"), build_adn("resnet18_like"), build_adn("vgg16_like")],
    ids=lambda s: s.name,
)
def test_analytic_param_count_matches_instantiated(spec):
    assert param_count(spec) == Network(spec, np.random.default_rng(0)).param_count()


def test_network_forward_shapes_follow_table():
    spec = build_unet(3, 8, 32)
    net = Network(spec, np.random.default_rng(0))
    out = net.forward(np.zeros((2, 32, 32, 1), np.float32), train=True)
    assert out.shape == (2,) + infer_shapes(spec).output
    np.testing.assert_array_equal(out.data, 0.5)
