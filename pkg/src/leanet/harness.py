"""Datasets, cross-validation and the experiment matrix.

The synthetic benchmark plants chromatic defects whose lightness matches the
surrounding texture. Normal images follow a fixed lightness-to-hue relation,
so a colorizer that sees only lightness reproduces normal regions closely and
misses the defects.
"""
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .anomap import generate_maps
from .attention import LeaModel, TrainConfig, apply_attention, predict, train, zero_attention
from .colorlab import LabImage, lab_to_srgb
from .errors import HarnessError
from .imageio import read_rgb, to_gray8, write_png
from .netspec import build_adn, build_caan, infer_shapes
from .network import Network
from .rng import derive

logger = logging.getLogger(__name__)

VARIANTS = (
    "baseline",
    "anomaly_map_input",
    "four_channel_input",
    "attentioned_input",
    "direct_attention",
    "caan_resnet_based",
    "caan_mobilenet_like",
)
POINT_VARIANTS = ("direct_attention", "caan_resnet_based", "caan_mobilenet_like")
MAP_VARIANTS = tuple(v for v in VARIANTS if v != "baseline")
ALL_POINTS = (1, 2, 3, 4, 5)

# Lightness texture spans BASE_L +/- L_AMPLITUDE.
BASE_L = 55.0
L_AMPLITUDE = 20.0


# ------------------------------------------------------------------ datasets


@dataclass
class SynthParams:
    n_pos: int = 50
    n_neg: int = 152
    extent: int = 64
    texture: str = "sinusoid"
    hue_shift: float = 120.0
    patch_fraction: tuple = (0.08, 0.16)
    base_hue: float = 120.0
    hue_span: float = 240.0
    chroma: float = 25.0
    hue_jitter: float = 4.0
    seed: int = 0

    def validate(self):
        if self.n_pos < 0 or self.n_neg < 0:
            raise HarnessError(f"class counts must be non-negative, got {self.n_pos}/{self.n_neg}")
        if self.n_pos + self.n_neg < 4:
            raise HarnessError(f"need at least 4 images, got {self.n_pos + self.n_neg}")
        lo, hi = self.patch_fraction
        if not (0 < lo <= hi <= 0.5):
            raise HarnessError(f"patch fraction range must lie in (0, 0.5], got {self.patch_fraction}")
        if not (0 < self.hue_shift <= 180):
            raise HarnessError(f"hue shift must lie in (0, 180] degrees, got {self.hue_shift}")
        if self.texture not in ("sinusoid", "flat"):
            raise HarnessError(f"unknown texture family {self.texture!r}")
        if lo * self.extent < 1.0:
            raise HarnessError(f"patch radius {lo * self.extent:.2f} px gives zero-area patches at extent {self.extent}")
        return self


@dataclass
class Dataset:
    """RGB images with labels; masks and anomaly maps are optional companions."""

    rgb: np.ndarray
    labels: np.ndarray
    masks: np.ndarray = None
    names: list = None
    maps: np.ndarray = None

    def __len__(self):
        return len(self.labels)

    @property
    def extent(self):
        return self.rgb.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        names = None if self.names is None else [self.names[i] for i in idx]
        return Dataset(self.rgb[idx], self.labels[idx], pick(self.masks), names, pick(self.maps))

    def lab(self, i):
        return LabImage.from_rgb(self.rgb[i])


def expected_hue(L, p):
    """Hue angle (degrees) a normal pixel of lightness ``L`` carries."""
    return p.base_hue + p.hue_span * (np.asarray(L) - BASE_L) / (2 * L_AMPLITUDE)


def _texture(p, rng):
    n = p.extent
    if p.texture == "flat":
        return np.full((n, n), BASE_L)
    yy, xx = np.mgrid[0:n, 0:n] / n
    t = np.zeros((n, n))
    for _ in range(3):
        freq = rng.uniform(1.0, 4.0)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        t += np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    t /= max(np.abs(t).max(), 1e-9)
    return BASE_L + L_AMPLITUDE * t


def _ellipses(p, rng):
    n = p.extent
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    mask = np.zeros((n, n), bool)
    lo, hi = p.patch_fraction
    for _ in range(int(rng.integers(1, 4))):
        ra, rb = rng.uniform(lo, hi, size=2) * n
        cy, cx = rng.uniform(0.2, 0.8, size=2) * n
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        mask |= (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
    return mask


def _render(L, hue_deg, chroma):
    h = np.radians(hue_deg)
    lab = np.stack([L, chroma * np.cos(h), chroma * np.sin(h)], axis=-1)
    return lab_to_srgb(lab)


def synth_image(p, rng, positive):
    L = _texture(p, rng)
    hue = expected_hue(L, p) + rng.uniform(-p.hue_jitter, p.hue_jitter)
    mask = np.zeros(L.shape, bool)
    if positive:
        mask = _ellipses(p, rng)
        hue = np.where(mask, hue + p.hue_shift, hue)
    return _render(L, hue, p.chroma), mask


def synth_dataset(p):
    """Negatives first in generation order, then shuffled under the seed."""
    p.validate()
    rgb, masks, labels = [], [], []
    for label, count in ((0, p.n_neg), (1, p.n_pos)):
        for i in range(count):
            img, mask = synth_image(p, derive(p.seed, "synth", label, i), bool(label))
            if label and not mask.any():
                raise HarnessError("a positive image received an empty anomaly mask")
            rgb.append(img)
            masks.append(mask)
            labels.append(label)
    order = derive(p.seed, "synth", "order").permutation(len(labels))
    names = [f"{'pos' if labels[i] else 'neg'}_{i:04d}" for i in order]
    return Dataset(np.stack(rgb)[order], np.array(labels, np.int64)[order], np.stack(masks)[order], names)


def synth_normals(p, count, key="reference"):
    """Extra normal images, independent of the labeled set, for colorizer training."""
    return [LabImage.from_rgb(synth_image(p, derive(p.seed, "synth", key, i), False)[0]) for i in range(count)]


def hue_neutralize(img, p):
    """Replace every pixel's hue by the normal hue for its lightness (chroma kept)."""
    lab = img.data
    chroma = np.hypot(lab[..., 1], lab[..., 2])
    h = np.radians(expected_hue(lab[..., 0], p))
    return LabImage(np.stack([lab[..., 0], chroma * np.cos(h), chroma * np.sin(h)], axis=-1), "neutralized")


def mask_contrast(values, mask):
    """Mean map value inside ``mask`` divided by the mean outside it."""
    inside, outside = values[mask].mean(), values[~mask].mean()
    return float(inside / max(outside, 1e-12))


def write_dataset(ds, out, reference=()):
    """Lay a dataset out as ``positive/`` and ``negative/`` PNG folders plus ``labels.csv``."""
    out = Path(out)
    for sub in ("positive", "negative"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        sub = "positive" if ds.labels[i] else "negative"
        name = ds.names[i] if ds.names else f"img_{i:04d}"
        write_png(out / sub / f"{name}.png", ds.rgb[i])
        rows.append((f"{sub}/{name}.png", int(ds.labels[i]), int(ds.masks[i].sum()) if ds.masks is not None else -1))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "label", "mask_pixels"])
        w.writerows(sorted(rows))
    if ds.masks is not None:
        names = [r[0] for r in rows]
        np.savez(out / "masks.npz", **{n: ds.masks[i] for i, n in enumerate(names)})
    if len(reference):
        (out / "reference").mkdir(exist_ok=True)
        for i, im in enumerate(reference):
            write_png(out / "reference" / f"ref_{i:04d}.png", im.to_rgb())


def load_dataset(root, extent=None, resample="nearest"):
    """Read ``positive/*.png`` and ``negative/*.png`` (lexicographic order, positives first)."""
    root = Path(root)
    rgb, labels, names = [], [], []
    for sub, label in (("positive", 1), ("negative", 0)):
        d = root / sub
        if not d.is_dir():
            raise HarnessError(f"missing class directory {d}")
        files = _image_files(d)
        if not files:
            raise HarnessError(f"class directory {d} contains no PNG files")
        for f in files:
            img = read_rgb(f, extent, resample)
            if rgb and img.shape != rgb[0].shape:
                raise HarnessError(f"{f} has shape {img.shape}, expected {rgb[0].shape}; pass an extent to resize")
            rgb.append(img)
            labels.append(label)
            names.append(f"{sub}/{f.stem}")
    masks = None
    mpath = root / "masks.npz"
    if mpath.exists() and extent in (None, rgb[0].shape[0]):
        with np.load(mpath) as z:
            if all(f"{n}.png" in z for n in names):
                masks = np.stack([z[f"{n}.png"] for n in names])
    return Dataset(np.stack(rgb), np.array(labels, np.int64), masks, names)


def prepare_maps(ds, colorizer):
    """Fill ``ds.maps`` with normalized anomaly maps from a trained colorizer."""
    ds.maps = np.stack([m.normalized for m in generate_maps(colorizer, [ds.lab(i) for i in range(len(ds))])])
    return ds


def build_benchmark(params, reference=64, colorizer_cfg=None):
    """Synthetic dataset with anomaly maps from a colorizer trained on separate normal images."""
    from .anomap import ColorizerConfig, train_colorizer

    ds = synth_dataset(params)
    cfg = colorizer_cfg or ColorizerConfig(seed=params.seed)
    colorizer = train_colorizer(synth_normals(params, reference), cfg)
    return prepare_maps(ds, colorizer), colorizer


def map_path(root, name):
    """Raw anomaly-map sidecar for dataset entry ``name`` (``<class>/<stem>``)."""
    return Path(root) / f"{name}.anom.f32"


def attach_maps(ds, root):
    """Load the normalized anomaly map of every image from its ``.anom.f32`` sidecar."""
    from .anomap import load_map

    missing = [n for n in ds.names if not map_path(root, n).exists()]
    if missing:
        raise HarnessError(f"{len(missing)} anomaly maps missing under {root} (first: {missing[0]}); run gen-maps first")
    ds.maps = np.stack([load_map(map_path(root, n)).normalized for n in ds.names])
    return ds


def _image_files(d):
    """PNG files in ``d`` in lexicographic order, skipping anomaly-map previews."""
    return sorted(f for f in d.glob("*.png") if not f.name.endswith(".anom.png"))


def load_reference(root):
    """Normal images for colorizer training: ``reference/`` if present, else ``negative/``."""
    root = Path(root)
    d = root / "reference" if (root / "reference").is_dir() else root / "negative"
    files = _image_files(d)
    if not files:
        raise HarnessError(f"no normal images found in {d}")
    return [LabImage.from_rgb(read_rgb(f)) for f in files]


# --------------------------------------------------------- cross-validation


def stratified_kfold(labels, k, seed):
    """Split indices into ``k`` disjoint folds preserving the class ratio.

    Each class is shuffled under ``seed`` and dealt round-robin; the dealing
    for each subsequent class starts where the previous one stopped so fold
    sizes stay balanced as well.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise HarnessError(f"k must be >= 2, got {k}")
    folds = [[] for _ in range(k)]
    start = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise HarnessError(f"class {c} has {len(idx)} samples, fewer than k={k} folds")
        idx = derive(seed, "kfold", int(c)).permutation(idx)
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(int(i))
        start = (start + len(idx)) % k
    return [np.array(sorted(f), np.int64) for f in folds]


def f1(preds, labels, threshold=0.5):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise HarnessError(f"f1 needs equal non-empty inputs, got {preds.shape} and {labels.shape}")
    hit = preds >= threshold
    pos = labels == 1
    tp = int(np.sum(hit & pos))
    fp = int(np.sum(hit & ~pos))
    fn = int(np.sum(~hit & pos))
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else 0.0


# -------------------------------------------------------------- variants


class PlainModel:
    """An ADN on its own; ``wiring`` picks what it sees."""

    def __init__(self, adn_spec, seed, wiring):
        self.adn = Network(adn_spec, derive(seed, "adn", "init"))
        self.wiring = wiring

    @property
    def params(self):
        return {"adn/" + k: v for k, v in self.adn.params.items()}

    def _input(self, x, x_att):
        if self.wiring == "baseline":
            return T.Tensor(x)
        if self.wiring == "anomaly_map_input":
            return T.Tensor(x_att)
        if self.wiring == "four_channel_input":
            return T.Tensor(np.concatenate([x, x_att], axis=-1))
        if self.wiring == "attentioned_input":
            return apply_attention(T.Tensor(x), T.activate(T.Tensor(x_att), "sigmoid"))
        raise HarnessError(f"unknown wiring {self.wiring!r}")

    def forward(self, x, x_att, train=False):
        return self.adn.forward(self._input(x, x_att), train=train)

    def loss(self, batch, train=True):
        from .attention import total_loss

        x, x_att, y = batch
        return total_loss(self.forward(x, x_att, train), None, y)

    def predict(self, x, x_att):
        return self.forward(x, x_att).data.reshape(-1)

    def state_dict(self):
        return {"adn/" + k: v for k, v in self.adn.state_dict().items()}

    def load_state_dict(self, state):
        self.adn.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("adn/")})


class DirectAttentionModel(PlainModel):
    """Area-mean downsampled map, squashed by a sigmoid, injected at point ``p`` with no attention net."""

    def __init__(self, adn_spec, seed, point, hook=None):
        super().__init__(adn_spec, seed, "baseline")
        self.point = point
        self.hook = hook
        self.extent = infer_shapes(adn_spec).points[point][0]

    def forward(self, x, x_att, train=False):
        window = x_att.shape[1] // self.extent
        m = T.Tensor(x_att)
        if window > 1:
            m = T.pool(m, "avg", window)
        att = T.activate(m, "sigmoid")
        if self.hook is not None:
            att = self.hook(att)
        return self.adn.forward(T.Tensor(x), train=train, point=self.point, hook=lambda f: apply_attention(f, att))


# ------------------------------------------------------------- experiments


@dataclass
class ExperimentConfig:
    variants: tuple = ("baseline", "caan_resnet_based")
    points: tuple = ALL_POINTS
    folds: int = 5
    seeds: tuple = (0,)
    adn: str = "basic_cnn"
    scale: float = 0.125
    train: TrainConfig = field(default_factory=TrainConfig)
    attention_hook: str = None
    jobs: int = 1

    def validate(self):
        if self.folds < 2:
            raise HarnessError(f"folds must be >= 2, got {self.folds}")
        if not self.seeds:
            raise HarnessError("at least one seed is required")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise HarnessError(f"unknown variant(s) {bad}; choose from {VARIANTS}")
        if any(p not in ALL_POINTS for p in self.points):
            raise HarnessError(f"attention points must be within {ALL_POINTS}, got {self.points}")
        if self.attention_hook not in (None, "zero"):
            raise HarnessError(f"unknown attention hook {self.attention_hook!r}")
        self.train.validate()
        return self

    def to_json(self):
        d = asdict(self)
        d["variants"], d["points"], d["seeds"] = list(self.variants), list(self.points), list(self.seeds)
        return d


@dataclass
class MetricsRow:
    variant: str
    point: object
    seed: int
    f1s: list
    mean: float = None
    std: float = None
    ratio: float = None

    def __post_init__(self):
        self.f1s = [float(v) for v in self.f1s]
        self.mean = float(np.mean(self.f1s))
        self.std = float(np.std(self.f1s))

    @property
    def sort_key(self):
        p = self.point
        order = 0 if p is None else (p if isinstance(p, int) else 99)
        return (-1.0 if self.ratio is None else -self.ratio, self.variant, order, str(p), self.seed)


def build_model(variant, cfg, point, seed, extent):
    """Instantiate the network(s) for one variant at one attention point."""
    hook = zero_attention if cfg.attention_hook == "zero" else None
    in_ch = {"anomaly_map_input": 1, "four_channel_input": 4}.get(variant, 3)
    adn_spec = build_adn(cfg.adn, cfg.scale, extent, in_channels=in_ch)
    if variant in ("baseline", "anomaly_map_input", "four_channel_input", "attentioned_input"):
        return PlainModel(adn_spec, seed, variant)
    if variant == "direct_attention":
        return DirectAttentionModel(adn_spec, seed, point, hook)
    caan_spec = build_caan(variant[len("caan_") :], cfg.scale, extent, outputs=1)
    return LeaModel(caan_spec, adn_spec, point, seed, hook=hook)


def model_inputs(ds):
    """``(x, x_att, y)`` arrays: RGB scaled to [0, 1] and the normalized maps as one channel."""
    x = ds.rgb.astype(np.float32) / np.float32(255.0)
    x_att = None if ds.maps is None else ds.maps.astype(np.float32)[..., None]
    return x, x_att, ds.labels


_SHARED = {}


def _init_worker(data):
    _SHARED["data"] = data


def _run_task(task):
    variant, point, seed, fold, cfg, train_idx, test_idx = task
    x, x_att, y = _SHARED["data"]
    pick = lambda a, i: None if a is None else a[i]
    model = build_model(variant, cfg, point, seed, x.shape[1])
    train(model, (x[train_idx], pick(x_att, train_idx), y[train_idx]), replace(cfg.train, seed=seed))
    probs = predict(model, (x[test_idx], pick(x_att, test_idx), y[test_idx]), cfg.train.batch_size)
    return (variant, point, seed, fold), f1(probs, y[test_idx])


def _tasks(cfg, labels):
    for seed in cfg.seeds:
        folds = stratified_kfold(labels, cfg.folds, seed)
        for variant in cfg.variants:
            for point in cfg.points if variant in POINT_VARIANTS else (None,):
                for k, test_idx in enumerate(folds):
                    train_idx = np.concatenate([f for j, f in enumerate(folds) if j != k])
                    yield (variant, point, seed, k, cfg, train_idx, test_idx)


def best_point(rows, variant, seed=None):
    """Point with the highest mean F1 (ties go to the smaller point)."""
    cand = [r for r in rows if r.variant == variant and isinstance(r.point, int) and (seed is None or r.seed == seed)]
    if not cand:
        return None
    by_point = {}
    for r in cand:
        by_point.setdefault(r.point, []).extend(r.f1s)
    return min(by_point, key=lambda p: (-np.mean(by_point[p]), p))


def run_experiment(cfg, ds, progress=None):
    """Train and evaluate every variant x point x seed x fold; one row per variant x point x seed.

    Point-swept variants gain a ``best`` row per seed that repeats the fold
    scores of the point with the highest mean F1 for that seed.
    """
    cfg.validate()
    if any(v in MAP_VARIANTS for v in cfg.variants) and ds.maps is None:
        raise HarnessError(f"variants {[v for v in cfg.variants if v in MAP_VARIANTS]} need anomaly maps; generate them first")
    data = model_inputs(ds)
    tasks = list(_tasks(cfg, ds.labels))
    scores = {}
    jobs = max(1, int(cfg.jobs))
    if jobs == 1:
        _init_worker(data)
        for i, t in enumerate(tasks):
            key, score = _run_task(t)
            scores[key] = score
            if progress:
                progress(i + 1, len(tasks), key, score)
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(data,)) as pool:
            for i, (key, score) in enumerate(pool.map(_run_task, tasks)):
                scores[key] = score
                if progress:
                    progress(i + 1, len(tasks), key, score)
    grouped = {}
    for (variant, point, seed, fold), score in scores.items():
        grouped.setdefault((variant, point, seed), {})[fold] = score
    rows = [MetricsRow(v, p, s, [fs[k] for k in sorted(fs)]) for (v, p, s), fs in grouped.items()]
    for variant in cfg.variants:
        if variant in POINT_VARIANTS:
            for seed in cfg.seeds:
                bp = best_point(rows, variant, seed)
                src = next(r for r in rows if r.variant == variant and r.point == bp and r.seed == seed)
                rows.append(MetricsRow(variant, f"best({bp})", seed, src.f1s))
    return sorted(rows, key=lambda r: r.sort_key)


def summarize(rows):
    """Pool folds across seeds per (ratio, variant, point): list of ``(ratio, variant, point, mean, std, n)``."""
    pooled = {}
    for r in rows:
        if isinstance(r.point, str):
            continue
        pooled.setdefault((r.ratio, r.variant, r.point), []).extend(r.f1s)
    out = []
    for (ratio, variant, point), vals in pooled.items():
        out.append((ratio, variant, point, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    groups = {}
    for ratio, variant, point, m, s, n in out:
        if isinstance(point, int):
            groups.setdefault((ratio, variant), []).append((point, m, s, n))
    for (ratio, variant), cands in groups.items():
        p, m, s, n = min(cands, key=lambda c: (-c[1], c[0]))
        out.append((ratio, variant, f"best({p})", m, s, n))
    order = lambda t: (-1.0 if t[0] is None else -t[0], t[1], 0 if t[2] is None else (t[2] if isinstance(t[2], int) else 99))
    return sorted(out, key=order)


def positives_for_ratio(ratio, n_neg):
    return int(round(ratio * n_neg / (1.0 - ratio)))


def subsample_for_ratio(ds, ratio, k, seed):
    """Keep every negative and a seeded random subset of positives hitting ``ratio``."""
    if not 0 < ratio < 1:
        raise HarnessError(f"ratio must lie in (0, 1), got {ratio}")
    neg = np.flatnonzero(ds.labels == 0)
    pos = np.flatnonzero(ds.labels == 1)
    want = positives_for_ratio(ratio, len(neg))
    if want < k:
        raise HarnessError(f"ratio {ratio} yields {want} positives, fewer than k={k} folds")
    if want > len(pos):
        raise HarnessError(f"ratio {ratio} needs {want} positives but only {len(pos)} are available")
    keep = derive(seed, "sweep", f"{ratio:.6f}").choice(pos, size=want, replace=False)
    return ds.subset(np.sort(np.concatenate([neg, keep])))


def imbalance_sweep(cfg, ds, ratios, data_seed=0, progress=None):
    """Rerun :func:`run_experiment` on positive-subsampled copies of ``ds``; rows carry their ratio."""
    cfg.validate()
    subsets = [(r, subsample_for_ratio(ds, r, cfg.folds, data_seed)) for r in ratios]
    rows = []
    for ratio, sub in subsets:
        for row in run_experiment(cfg, sub, progress):
            row.ratio = float(ratio)
            rows.append(row)
    return sorted(rows, key=lambda r: r.sort_key)


# ---------------------------------------------------------- visualization


def dump_feature_maps(model, x, x_att, out_dir, stem="sample"):
    """Write the attention map and the ADN features before/after attention for each point.

    ``model`` is a trained :class:`LeaModel`; its point is swept over every
    point both networks share, restoring the original afterwards. Returns
    ``{point: {"attention", "before", "after"}}`` with float arrays
    (``before``/``after`` keep all channels) and writes three PNGs per point.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessError(f"cannot create {out_dir}: {exc}") from None
    x = np.asarray(x, np.float32)[None] if np.ndim(x) == 3 else np.asarray(x, np.float32)
    x_att = np.asarray(x_att, np.float32)
    x_att = x_att.reshape((1,) + x_att.shape[-2:] + (1,)) if x_att.ndim == 2 else x_att
    original = model.point
    shared = sorted(set(infer_shapes(model.adn.spec).points) & set(infer_shapes(model.caan.spec).points))
    out = {}
    try:
        for p in shared:
            model.point = p
            taps = model.forward(x, x_att, train=False, capture=True).taps
            arrays = {k: taps[k].data[0] for k in ("attention", "before", "after")}
            out[p] = arrays
            before = arrays["before"].mean(axis=-1)
            after = arrays["after"].mean(axis=-1)
            lo, hi = float(min(before.min(), after.min())), float(max(before.max(), after.max()))
            try:
                write_png(out_dir / f"{stem}_p{p}_attention.png", to_gray8(arrays["attention"][..., 0]))
                write_png(out_dir / f"{stem}_p{p}_before.png", to_gray8(before, lo, hi))
                write_png(out_dir / f"{stem}_p{p}_after.png", to_gray8(after, lo, hi))
            except Exception as exc:
                raise HarnessError(f"cannot write feature maps to {out_dir}: {exc}") from None
    finally:
        model.point = original
    return out


def write_metadata(path, cfg, extra=None):
    from . import __version__

    meta = {"config": cfg.to_json(), "version": __version__}
    meta.update(extra or {})
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))


def default_jobs():
    try:
        return max(1, int(os.environ.get("LEANET_JOBS", "1")))
    except ValueError:
        raise HarnessError(f"LEANET_JOBS must be an integer, got {os.environ['LEANET_JOBS']!r}") from None
