"""Colorization-based anomaly maps.

A small U-Net learns to predict chroma (a*, b*) from lightness on normal
images only. Recoloring a test image and measuring the per-pixel CIEDE2000
difference to the original highlights regions whose color cannot be explained
by their luminance.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .colorlab import LabImage, ciede2000, fancy_pca, lab_to_srgb
from .errors import MapError
from .imageio import read_f32, to_gray8, write_f32, write_png
from .netspec import NetworkSpec, build_unet
from .network import Network
from .optim import AdamState, adam_step
from .rng import derive

AB_OFFSET = 128.0
AB_RANGE = 255.0
DELTA_E_FULL_SCALE = 100.0


@dataclass
class AnomalyMap:
    """Per-pixel CIEDE2000 values with an optional ``[0, 1]`` normalized twin."""

    values: np.ndarray
    normalized: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise MapError(f"anomaly map must be 2-D, got shape {self.values.shape}")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise MapError("anomaly map values must be finite and non-negative")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ColorizerConfig:
    levels: int = 3
    base_filters: int = 8
    extent: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 16
    patience: int = 20
    val_fraction: float = 0.1
    augment_strength: float = 0.1
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise MapError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise MapError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise MapError(f"learning rate must be positive, got {self.lr}")
        return self


@dataclass
class Colorizer:
    """A trained U-Net plus its training record."""

    network: Network
    config: ColorizerConfig
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    initial_loss: float = float("nan")
    best_epoch: int = 0

    @property
    def extent(self):
        return self.network.shapes.input[0]


# ----------------------------------------------------------------- channels


def split_luminance(img):
    """Return ``(L / 100, (ab + 128) / 255)`` as float64 grids of shape ``H x W x 1`` and ``H x W x 2``."""
    lab = img.data
    return lab[..., :1] / 100.0, (lab[..., 1:] + AB_OFFSET) / AB_RANGE


def join_luminance(l_grid, ab_grid, provenance="recolored"):
    """Inverse of :func:`split_luminance`."""
    l_grid = np.asarray(l_grid, dtype=np.float64)
    ab_grid = np.asarray(ab_grid, dtype=np.float64)
    return LabImage(np.concatenate([l_grid * 100.0, ab_grid * AB_RANGE - AB_OFFSET], axis=-1), provenance)


# ----------------------------------------------------------------- training


def _stack(images):
    ls, abs_ = zip(*(split_luminance(im) for im in images))
    return np.stack(ls).astype(np.float32), np.stack(abs_).astype(np.float32)


def _augment(images, strength, rng):
    out = []
    for im in images:
        rgb = im.to_rgb()
        out.append(LabImage.from_rgb(fancy_pca(rgb, strength, rng)))
    return out


def _batches(n, size, rng):
    order = rng.permutation(n)
    out = [order[i : i + size] for i in range(0, n, size)]
    # a lone trailing sample makes batch statistics degenerate
    if len(out) > 1 and len(out[-1]) == 1:
        out.pop()
    return out


def _eval_loss(net, l_in, ab_target, batch_size):
    total = 0.0
    for i in range(0, len(l_in), batch_size):
        pred = net.forward(l_in[i : i + batch_size], train=False)
        total += float(np.abs(pred.data - ab_target[i : i + batch_size]).sum(dtype=np.float64))
    return total / ab_target.size


def train_colorizer(normals, cfg=None, labels=None):
    """Fit a U-Net that maps normalized L to normalized ab with an MAE loss.

    ``labels`` (optional) are checked to contain only normal (0) flags. A
    deterministic ``val_fraction`` slice is held out before augmentation and
    drives early stopping; the weights of the best validation epoch are kept.
    """
    cfg = (cfg or ColorizerConfig()).validate()
    normals = list(normals)
    if not normals:
        raise MapError("colorizer training needs at least one normal image")
    if labels is not None and any(int(y) != 0 for y in labels):
        raise MapError("colorizer training set must contain normal instances only")
    if len(normals) < 2 * cfg.batch_size:
        raise MapError(f"need at least {2 * cfg.batch_size} normal images for batch size {cfg.batch_size}, got {len(normals)}")
    extent = normals[0].shape[0]
    for im in normals:
        if im.shape != (extent, extent):
            raise MapError(f"colorizer images must all be {extent}x{extent}, got {im.shape}")

    order = derive(cfg.seed, "colorizer", "split").permutation(len(normals))
    n_val = max(1, int(round(cfg.val_fraction * len(normals))))
    val = [normals[i] for i in sorted(order[:n_val])]
    fit = [normals[i] for i in sorted(order[n_val:])]

    spec = build_unet(cfg.levels, cfg.base_filters, extent)
    net = Network(spec, derive(cfg.seed, "colorizer", "init"))
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    aug_rng = derive(cfg.seed, "colorizer", "augment")
    shuffle_rng = derive(cfg.seed, "colorizer", "shuffle")
    val_l, val_ab = _stack(val)
    fit_l, fit_ab = _stack(fit)

    # running statistics do not exist yet; one forward pass in train mode seeds them
    net.forward(fit_l[: cfg.batch_size], train=True)
    result = Colorizer(net, cfg, initial_loss=_eval_loss(net, fit_l, fit_ab, cfg.batch_size))
    best, best_state, waited = np.inf, None, 0
    for epoch in range(cfg.epochs):
        l_in, ab_target = _stack(_augment(fit, cfg.augment_strength, aug_rng)) if cfg.augment_strength else (fit_l, fit_ab)
        losses = []
        for idx in _batches(len(fit), cfg.batch_size, shuffle_rng):
            loss = T.mae(net.forward(l_in[idx], train=True), ab_target[idx])
            grads = T.backward(loss)
            adam_step(net.params, {n: grads[p] for n, p in net.params.items() if p in grads}, opt)
            losses.append(loss.item())
        result.history.append(float(np.mean(losses)))
        v = _eval_loss(net, val_l, val_ab, cfg.batch_size)
        result.val_history.append(v)
        if v < best:
            best, best_state, waited, result.best_epoch = v, _copy_state(net), 0, epoch
        else:
            waited += 1
            if waited >= cfg.patience:
                break
    net.load_state_dict(best_state)
    return result


def _copy_state(net):
    return {k: np.array(v, copy=True) for k, v in net.state_dict().items()}


# ---------------------------------------------------------------- inference


def colorize(colorizer, img):
    """Recolor ``img`` from its lightness; the L channel is passed through untouched."""
    net = colorizer.network if isinstance(colorizer, Colorizer) else colorizer
    if tuple(img.shape) != tuple(net.shapes.input[:2]):
        raise MapError(f"image extent {img.shape} does not match colorizer input {net.shapes.input[:2]}")
    l_grid, _ = split_luminance(img)
    ab = net.forward(l_grid[None].astype(np.float32), train=False).data[0].astype(np.float64)
    out = np.empty_like(img.data)
    out[..., 0] = img.data[..., 0]
    out[..., 1:] = ab * AB_RANGE - AB_OFFSET
    return LabImage(out, "recolored")


def anomaly_map(original, recolored):
    """Per-pixel CIEDE2000 between two Lab images of equal extent."""
    if tuple(original.shape) != tuple(recolored.shape):
        raise MapError(f"extent mismatch: {original.shape} vs {recolored.shape}")
    return AnomalyMap(ciede2000(original.data, recolored.data))


def normalize_map(m):
    """Attach ``min(dE / 100, 1)`` as the normalized twin."""
    return AnomalyMap(m.values, np.minimum(m.values / DELTA_E_FULL_SCALE, 1.0))


def generate_maps(colorizer, images):
    """Normalized anomaly maps for a sequence of Lab images."""
    return [normalize_map(anomaly_map(im, colorize(colorizer, im))) for im in images]


# ---------------------------------------------------------------- file I/O


def save_map(stem, m):
    """Write ``<stem>.anom.f32`` (raw dE) and ``<stem>.anom.png`` (normalized preview)."""
    stem = str(stem)
    m = m if m.normalized is not None else normalize_map(m)
    write_f32(stem + ".anom.f32", m.values)
    write_png(stem + ".anom.png", to_gray8(m.normalized))
    return stem + ".anom.f32", stem + ".anom.png"


def load_map(path):
    return normalize_map(AnomalyMap(read_f32(path)))


def save_colorizer(path, colorizer):
    """Weights go in a tensor container; the network text and config in ``<path>.json``."""
    path = Path(path)
    checkpoint.save(path, colorizer.network.state_dict())
    meta = {
        "spec": colorizer.network.spec.to_text(),
        "config": asdict(colorizer.config),
        "history": colorizer.history,
        "val_history": colorizer.val_history,
        "initial_loss": colorizer.initial_loss,
        "best_epoch": colorizer.best_epoch,
    }
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_colorizer(path):
    path = Path(path)
    meta_path = path.with_name(path.name + ".json")
    if not meta_path.exists():
        raise MapError(f"missing colorizer metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    net = Network(NetworkSpec.from_text(meta["spec"]), np.random.default_rng(0))
    net.load_state_dict(checkpoint.load(path))
    out = Colorizer(net, ColorizerConfig(**meta["config"]), meta["history"], meta["val_history"], meta["initial_loss"], meta["best_epoch"])
    return out


def preview_rgb(img):
    """8-bit sRGB rendering of a Lab image (for reports)."""
    return lab_to_srgb(img.data)
