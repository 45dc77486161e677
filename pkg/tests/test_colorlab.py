import numpy as np
import pytest

from ciede2000_reference import PUBLISHED_PAIRS, delta_e00, srgb_to_lab as scalar_srgb_to_lab
from leanet.colorlab import LabImage, ciede2000, fancy_pca, lab_to_srgb, srgb_to_lab
from leanet.errors import ColorError

PAIRS = np.array(PUBLISHED_PAIRS)


def test_ciede2000_matches_scalar_oracle_on_published_pairs():
    got = ciede2000(PAIRS[:, :3], PAIRS[:, 3:6])
    ref = np.array([delta_e00(p[:3], p[3:6]) for p in PUBLISHED_PAIRS])
    np.testing.assert_allclose(got, ref, atol=1e-4, rtol=0)


def test_ciede2000_matches_published_values_to_rounding():
    got = ciede2000(PAIRS[:, :3], PAIRS[:, 3:6])
    np.testing.assert_allclose(got, PAIRS[:, 6], atol=1e-4, rtol=0)


def test_ciede2000_is_symmetric_and_zero_on_identity(rng):
    a = rng.uniform([0, -100, -100], [100, 100, 100], size=(500, 3))
    b = rng.uniform([0, -100, -100], [100, 100, 100], size=(500, 3))
    np.testing.assert_allclose(ciede2000(a, b), ciede2000(b, a), atol=1e-12)
    np.testing.assert_array_equal(ciede2000(a, a), 0)


def test_ciede2000_random_pairs_match_oracle(rng):
    a = rng.uniform([0, -80, -80], [100, 80, 80], size=(300, 3))
    b = a + rng.normal(scale=5, size=a.shape)
    ref = [delta_e00(x, y) for x, y in zip(a, b)]
    np.testing.assert_allclose(ciede2000(a, b), ref, atol=1e-9)


def test_srgb_to_lab_matches_scalar_conversion():
    L, a, b = srgb_to_lab([119, 130, 154])
    np.testing.assert_allclose([L, a, b], scalar_srgb_to_lab((119, 130, 154)), atol=1e-3)
    np.testing.assert_allclose(srgb_to_lab([255, 255, 255]), [100, 0, 0], atol=1e-9)
    np.testing.assert_allclose(srgb_to_lab([0, 0, 0]), [0, 0, 0], atol=1e-9)


def test_gray_axis_is_neutral():
    gray = np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)
    lab = srgb_to_lab(gray)
    assert np.abs(lab[:, 1:]).max() < 1e-9
    assert np.all(np.diff(lab[:, 0]) > 0)


def test_roundtrip_recovers_every_8bit_level(rng):
    rgb = rng.integers(0, 256, size=(4096, 3), dtype=np.uint8)
    np.testing.assert_array_equal(lab_to_srgb(srgb_to_lab(rgb)), rgb)
    gray = np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)
    np.testing.assert_array_equal(lab_to_srgb(srgb_to_lab(gray)), gray)


def test_lab_to_srgb_clamps_out_of_gamut():
    out = lab_to_srgb([[50, 200, -200], [120, 0, 0]])
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out[1], [255, 255, 255])


def test_labimage_validates_shape():
    with pytest.raises(ColorError):
        LabImage(np.zeros((4, 4)))
    im = LabImage.from_rgb(np.full((2, 3, 3), 128, np.uint8))
    assert im.shape == (2, 3)
    np.testing.assert_array_equal(im.to_rgb(), 128)


def test_fancy_pca_moves_along_principal_axis(rng):
    base = rng.normal(0, 1, size=(32, 32, 1))
    img = np.clip(128 + 40 * base * np.array([1.0, 0.5, -0.3]), 0, 255).astype(np.float64)
    out = fancy_pca(img, 0.5, np.random.default_rng(1))
    shift = (out - img).reshape(-1, 3)
    unclipped = shift[np.all((out.reshape(-1, 3) > 0) & (out.reshape(-1, 3) < 255), axis=1)]
    # a constant shift parallel to the dominant eigenvector
    np.testing.assert_allclose(unclipped - unclipped[0], 0, atol=1e-9)
    direction = np.array([1.0, 0.5, -0.3]) / np.linalg.norm([1.0, 0.5, -0.3])
    cos = abs(unclipped[0] @ direction) / np.linalg.norm(unclipped[0])
    assert cos > 0.999


def test_fancy_pca_is_seeded_and_zero_strength_is_identity(rng):
    img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    np.testing.assert_array_equal(fancy_pca(img, 0.1, 7), fancy_pca(img, 0.1, 7))
    np.testing.assert_array_equal(fancy_pca(img, 0.0, 7), img)
    assert fancy_pca(img, 0.1, 7).dtype == np.uint8


def test_fancy_pca_eigendecomposition_matches_numpy(rng):
    from leanet.colorlab import _sym_eig3

    m = rng.normal(size=(3, 3))
    cov = m @ m.T
    lam, vec = _sym_eig3(cov)
    np.testing.assert_allclose(np.sort(lam), np.linalg.eigvalsh(cov), rtol=1e-10)
    np.testing.assert_allclose(vec @ np.diag(lam) @ vec.T, cov, atol=1e-10)
