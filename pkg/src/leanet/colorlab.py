"""Color conversions (sRGB <-> CIELAB, D65 / 2 degree), CIEDE2000 and Fancy PCA.

All functions are vectorized: pixel arguments may be single triples or arrays
whose last axis holds the three channels.
"""
from dataclasses import dataclass

import numpy as np

_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# D65 reference white (2 degree observer) as the image of sRGB white, so that
# neutral grays land exactly on a* = b* = 0.
WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0


@dataclass
class LabImage:
    """``H x W x 3`` float64 array of (L, a, b) plus a provenance tag."""

    data: np.ndarray
    provenance: str = "original"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3 or min(self.data.shape[:2]) < 1:
            from .errors import ColorError

            raise ColorError(f"LabImage needs a non-empty H x W x 3 array, got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape[:2]

    @property
    def L(self):
        return self.data[..., 0]

    @classmethod
    def from_rgb(cls, rgb, provenance="original"):
        return cls(srgb_to_lab(rgb), provenance)

    def to_rgb(self):
        return lab_to_srgb(self.data)


def _gamma_decode(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _gamma_encode(c):
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1 / 2.4) - 0.055)


def srgb_to_lab(rgb):
    """8-bit sRGB -> CIELAB."""
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    xyz = _gamma_decode(rgb) @ _RGB_TO_XYZ.T / WHITE_D65
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab):
    """CIELAB -> 8-bit sRGB (uint8), clamping out-of-gamut colors."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    f3 = f**3
    xyz = np.where(f3 > _EPS, f3, (116.0 * f - 16.0) / _KAPPA)
    # the L-branch is exact for Y; keep it so the gray axis round-trips
    xyz[..., 1] = np.where(lab[..., 0] > _KAPPA * _EPS, fy**3, lab[..., 0] / _KAPPA)
    lin = (xyz * WHITE_D65) @ _XYZ_TO_RGB.T
    return np.round(_gamma_encode(lin) * 255.0).astype(np.uint8)


def ciede2000(lab1, lab2, kL=1.0, kC=1.0, kH=1.0):
    """CIEDE2000 color difference between Lab triples (broadcasting over leading axes)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2.0
    c7 = c_bar**7
    g = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0**7)))
    a1p, a2p = (1.0 + g) * a1, (1.0 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dLp = L2 - L1
    dCp = c2p - c1p
    chroma_prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dh = np.where(chroma_prod == 0, 0.0, dh)
    dHp = 2.0 * np.sqrt(chroma_prod) * np.sin(np.radians(dh) / 2.0)

    L_bar = (L1 + L2) / 2.0
    cp_bar = (c1p + c2p) / 2.0
    hsum = h1p + h2p
    h_bar = np.where(
        chroma_prod == 0,
        hsum,
        np.where(
            np.abs(h1p - h2p) <= 180.0,
            hsum / 2.0,
            np.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0),
        ),
    )
    t = (
        1.0
        - 0.17 * np.cos(np.radians(h_bar - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * h_bar))
        + 0.32 * np.cos(np.radians(3.0 * h_bar + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * h_bar - 63.0))
    )
    d_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    cp7 = cp_bar**7
    rc = 2.0 * np.sqrt(cp7 / (cp7 + 25.0**7))
    lb = (L_bar - 50.0) ** 2
    sl = 1.0 + 0.015 * lb / np.sqrt(20.0 + lb)
    sc = 1.0 + 0.045 * cp_bar
    sh = 1.0 + 0.015 * cp_bar * t
    rt = -np.sin(np.radians(2.0 * d_theta)) * rc

    tl, tc, th = dLp / (kL * sl), dCp / (kC * sc), dHp / (kH * sh)
    return np.sqrt(np.maximum(tl**2 + tc**2 + th**2 + rt * tc * th, 0.0))


def _sym_eig3(cov, sweeps=50):
    """Cyclic Jacobi eigendecomposition of a symmetric 3x3 matrix."""
    a = np.array(cov, dtype=np.float64)
    v = np.eye(3)
    for _ in range(sweeps):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off < 1e-30 * max(1.0, np.trace(a @ a)):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q], rot[q, p] = s, -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def fancy_pca(image, strength, rng):
    """Add ``sum_i alpha_i * lambda_i * e_i`` to every pixel, ``alpha_i ~ N(0, strength)``.

    The 3x3 channel covariance is taken over this image's pixels scaled to
    [0, 1]; the shift is scaled back to 0-255 and the result clamped.
    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    image = np.asarray(image)
    if strength == 0:
        return image.copy()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pixels = image.reshape(-1, 3).astype(np.float64) / 255.0
    cov = np.cov(pixels, rowvar=False, bias=True) if len(pixels) > 1 else np.zeros((3, 3))
    lam, vec = _sym_eig3(cov)
    lam = np.maximum(lam, 0.0)
    alpha = rng.normal(0.0, strength, size=3)
    shift = 255.0 * (vec @ (alpha * lam))
    out = np.clip(image.astype(np.float64) + shift, 0, 255)
    return np.round(out).astype(image.dtype) if image.dtype == np.uint8 else out.astype(image.dtype)
