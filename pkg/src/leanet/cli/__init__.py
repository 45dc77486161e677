"""Command-line pipeline: synth -> train-colorizer -> gen-maps -> train / eval / sweep / visualize.

Exit codes: 0 on success, 1 when a library error is raised (the message names
the failing module), 2 on usage errors.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..anomap import ColorizerConfig, generate_maps, load_colorizer, save_colorizer, save_map, train_colorizer
from ..attention import TrainConfig, predict, train
from ..errors import LeaNetError
from ..harness import (
    ExperimentConfig,
    SynthParams,
    attach_maps,
    build_model,
    default_jobs,
    dump_feature_maps,
    f1,
    imbalance_sweep,
    load_dataset,
    load_reference,
    model_inputs,
    run_experiment,
    stratified_kfold,
    synth_dataset,
    synth_normals,
    write_dataset,
    write_metadata,
)
from .. import checkpoint
from .report import emit_report

logger = logging.getLogger("leanet")

# Built-in desk-scale defaults; a --config JSON overrides these and flags override both.
DEFAULTS = {
    "seed": 0,
    "extent": 64,
    "scale": 0.125,
    "folds": 5,
    "epochs": 30,
    "lr": 1e-3,
    "batch_size": 16,
    "adn": "basic_cnn",
    "pos": 50,
    "neg": 152,
    "reference": 64,
    "colorizer_epochs": 100,
    "colorizer_lr": 1e-3,
    "patience": 20,
    "augment": 0.1,
    "point": 1,
    "fold": 0,
    "seeds": [0],
    "points": [1, 2, 3, 4, 5],
    "variants": ["baseline", "caan-resnet"],
    "ratios": None,
    "index": None,
}

# CLI spellings of the experiment variants.
VARIANT_NAMES = {
    "baseline": "baseline",
    "anomaly-map-input": "anomaly_map_input",
    "four-channel-input": "four_channel_input",
    "attentioned-input": "attentioned_input",
    "direct-attention": "direct_attention",
    "caan-resnet": "caan_resnet_based",
    "caan-mobilenet": "caan_mobilenet_like",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _variant(name):
    if name not in VARIANT_NAMES:
        raise argparse.ArgumentTypeError(f"unknown variant {name!r}; choose from {', '.join(VARIANT_NAMES)}")
    return name


def build_parser():
    p = _Parser(prog="leanet", description="Colorization-based anomaly maps with layer-wise external attention.")
    p.add_argument("--version", action="version", version=f"leanet {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", type=Path, help="JSON file of option defaults")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--verbose", "-v", action="store_true")
        if data:
            sp.add_argument("--data", type=Path, required=True, help="dataset directory with positive/ and negative/")
        if out:
            sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark")
    common(sp, data=False)
    sp.add_argument("--pos", type=int)
    sp.add_argument("--neg", type=int)
    sp.add_argument("--extent", type=int)
    sp.add_argument("--reference", type=int, help="extra normal images for colorizer training")

    sp = sub.add_parser("train-colorizer", help="fit the U-Net colorizer on normal images")
    common(sp)
    sp.add_argument("--colorizer-epochs", type=int, dest="colorizer_epochs")
    sp.add_argument("--colorizer-lr", type=float, dest="colorizer_lr")
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--patience", type=int)
    sp.add_argument("--augment", type=float, help="Fancy PCA strength")

    sp = sub.add_parser("gen-maps", help="write <stem>.anom.png/.anom.f32 beside every image")
    common(sp, out=False)
    sp.add_argument("--colorizer", type=Path, required=True)

    for name, helptext in (("train", "train one variant on k-1 folds and score the held-out fold"), ("sweep", "run the variant x point matrix, or the imbalance sweep with --ratios")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--scale", type=float)
        sp.add_argument("--adn", choices=["basic_cnn", "resnet18_like", "vgg16_like"])
        sp.add_argument("--folds", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int, dest="batch_size")
        sp.add_argument("--jobs", type=int)
        if name == "train":
            sp.add_argument("--variant", type=_variant, required=True)
            sp.add_argument("--point", type=int)
            sp.add_argument("--fold", type=int)
        else:
            sp.add_argument("--variants", type=_variant, nargs="+")
            sp.add_argument("--points", type=int, nargs="+")
            sp.add_argument("--seeds", type=int, nargs="+")
            sp.add_argument("--ratios", type=float, nargs="+")

    sp = sub.add_parser("eval", help="score a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--fold", type=int, help="score only this fold (default: whole dataset)")

    sp = sub.add_parser("visualize", help="dump attention maps and features before/after attention")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--index", type=int, help="dataset index (default: first positive)")
    return p


def resolve(args):
    """Merge built-in defaults, the optional JSON config, and explicit flags (in that order)."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts["jobs"] = default_jobs()
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    if "variants" in opts:
        bad = [v for v in opts["variants"] if v not in VARIANT_NAMES]
        if bad:
            raise UsageError(f"unknown variant(s) {bad}")
    return opts


# ---------------------------------------------------------------- commands


def _synth(o):
    params = SynthParams(n_pos=o["pos"], n_neg=o["neg"], extent=o["extent"], seed=o["seed"])
    ds = synth_dataset(params)
    write_dataset(ds, o["out"], synth_normals(params, o["reference"]))
    return f"wrote {len(ds)} images to {o['out']}"


def _train_colorizer(o):
    refs = load_reference(o["data"])
    cfg = ColorizerConfig(
        extent=refs[0].shape[0],
        lr=o["colorizer_lr"],
        epochs=o["colorizer_epochs"],
        batch_size=o["batch_size"],
        patience=o["patience"],
        augment_strength=o["augment"],
        seed=o["seed"],
    )
    col = train_colorizer(refs, cfg)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_colorizer(out / "colorizer.ckpt", col)
    return f"colorizer trained for {len(col.history)} epochs, best validation epoch {col.best_epoch + 1}"


def _gen_maps(o):
    col = load_colorizer(o["colorizer"])
    ds = load_dataset(o["data"])
    maps = generate_maps(col, [ds.lab(i) for i in range(len(ds))])
    for name, m in zip(ds.names, maps):
        save_map(Path(o["data"]) / name, m)
    return f"wrote {len(maps)} anomaly maps"


def _experiment_config(o, variants, points, seeds):
    return ExperimentConfig(
        variants=tuple(VARIANT_NAMES[v] for v in variants),
        points=tuple(points),
        folds=o["folds"],
        seeds=tuple(seeds),
        adn=o["adn"],
        scale=o["scale"],
        train=TrainConfig(epochs=o["epochs"], lr=o["lr"], batch_size=o["batch_size"], seed=seeds[0]),
        jobs=o["jobs"],
    )


def _dataset_with_maps(o, needed):
    ds = load_dataset(o["data"])
    return attach_maps(ds, o["data"]) if needed else ds


def _train(o):
    cfg = _experiment_config(o, [o["variant"]], [o["point"]], [o["seed"]]).validate()
    variant = cfg.variants[0]
    ds = _dataset_with_maps(o, variant != "baseline")
    folds = stratified_kfold(ds.labels, cfg.folds, o["seed"])
    if not 0 <= o["fold"] < cfg.folds:
        raise UsageError(f"--fold must be in 0..{cfg.folds - 1}")
    test_idx = folds[o["fold"]]
    train_idx = np.concatenate([f for j, f in enumerate(folds) if j != o["fold"]])
    x, x_att, y = model_inputs(ds)
    pick = lambda a, i: None if a is None else a[i]
    model = build_model(variant, cfg, o["point"], o["seed"], ds.extent)
    history = train(model, (x[train_idx], pick(x_att, train_idx), y[train_idx]), cfg.train)
    score = f1(predict(model, (x[test_idx], pick(x_att, test_idx), y[test_idx])), y[test_idx])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "model.ckpt", model.state_dict())
    meta = {
        "variant": variant,
        "point": o["point"],
        "seed": o["seed"],
        "fold": o["fold"],
        "config": cfg.to_json(),
        "history": history,
        "version": __version__,
        "map_normalization": "min(dE00 / 100, 1)",
    }
    (out / "model.ckpt.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "point", "seed", "fold", "f1"])
        w.writerow([variant, o["point"] if variant in ("direct_attention",) or variant.startswith("caan_") else "", o["seed"], o["fold"], f"{score:.10f}"])
    return f"{variant} fold {o['fold']}: F1 {score:.4f}"


def _load_trained(o, ds_extent):
    path = Path(o["checkpoint"])
    meta_path = path.with_name(path.name + ".json")
    if not meta_path.exists():
        raise UsageError(f"missing checkpoint metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    c = meta["config"]
    cfg = ExperimentConfig(variants=tuple(c["variants"]), points=tuple(c["points"]), folds=c["folds"], seeds=tuple(c["seeds"]), adn=c["adn"], scale=c["scale"])
    model = build_model(meta["variant"], cfg, meta["point"], meta["seed"], ds_extent)
    model.load_state_dict(checkpoint.load(path))
    return model, meta


def _eval(o):
    ds = load_dataset(o["data"])
    model, meta = _load_trained(o, ds.extent)
    if meta["variant"] != "baseline":
        attach_maps(ds, o["data"])
    idx = np.arange(len(ds))
    if o.get("eval_fold") is not None:
        idx = stratified_kfold(ds.labels, meta["config"]["folds"], meta["seed"])[o["eval_fold"]]
    x, x_att, y = model_inputs(ds.subset(idx))
    score = f1(predict(model, (x, x_att, y)), y)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "point", "seed", "fold", "f1"])
        w.writerow([meta["variant"], meta["point"], meta["seed"], "" if o.get("eval_fold") is None else o["eval_fold"], f"{score:.10f}"])
    return f"F1 {score:.4f} on {len(idx)} images"


def _sweep(o):
    cfg = _experiment_config(o, o["variants"], o["points"], o["seeds"]).validate()
    needs_maps = any(v != "baseline" for v in cfg.variants)
    ds = _dataset_with_maps(o, needs_maps)

    def progress(i, n, key, score):
        logger.info("[%d/%d] %s point=%s seed=%s fold=%s F1=%.4f", i, n, *key, score)

    if o.get("ratios"):
        rows = imbalance_sweep(cfg, ds, o["ratios"], data_seed=o["seed"], progress=progress)
    else:
        rows = run_experiment(cfg, ds, progress)
    paths = emit_report(rows, o["out"])
    write_metadata(Path(o["out"]) / "experiment.json", cfg, {"ratios": o.get("ratios"), "map_normalization": "min(dE00 / 100, 1)"})
    return paths["table"].read_text(encoding="utf-8").rstrip()


def _visualize(o):
    ds = load_dataset(o["data"])
    model, meta = _load_trained(o, ds.extent)
    if not meta["variant"].startswith("caan_"):
        raise UsageError("visualize needs a checkpoint of a caan-* variant")
    attach_maps(ds, o["data"])
    idx = o["index"] if o.get("index") is not None else int(np.flatnonzero(ds.labels == 1)[0])
    x, x_att, _ = model_inputs(ds.subset([idx]))
    dumped = dump_feature_maps(model, x, x_att, o["out"], stem=Path(ds.names[idx]).name)
    return f"wrote {3 * len(dumped)} images for {ds.names[idx]}"


COMMANDS = {
    "synth": _synth,
    "train-colorizer": _train_colorizer,
    "gen-maps": _gen_maps,
    "train": _train,
    "eval": _eval,
    "sweep": _sweep,
    "visualize": _visualize,
}


def dispatch(argv=None):
    """Parse ``argv``, run the subcommand, and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "leanet: error: a subcommand is required")
        opts = resolve(args)
        if args.command == "eval":
            opts["eval_fold"] = args.fold
        logging.basicConfig(level=logging.INFO if opts.get("verbose") else logging.WARNING, format="%(message)s")
        message = COMMANDS[args.command](opts)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except SystemExit as exc:
        # --help / --version exit through argparse
        return int(exc.code or 0)
    except LeaNetError as exc:
        print(f"leanet: error in {exc.module}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"leanet: I/O error: {exc}", file=sys.stderr)
        return 1
    if message:
        print(message)
    return 0


def main():
    sys.exit(dispatch())
