"""Command-line entry point: ``angiomim <subcommand> ...``.

Exit status is 0 on success, 2 for usage errors, 3 for invalid configuration
and 1 for any other failure.  Logs go to standard error; results go to files
(or to standard output where a subcommand says so).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import config_digest, load_run_config
from .imagecore import load_image, save_mask, write_pgm
from .masking import Schedule, schedule_statistics
from .metrics import cldice
from .mim import LossConfig, encode_features, init_mim, load_mim, pretrain, probe_train_eval, save_mim
from .segmentor import freeze, init_segmentor, load_segmentor, save_segmentor, seg_train
from .synthdata import PhantomConfig, make_benchmark
from .validation import ConfigError, ParameterError
from .vesselness import FrangiConfig, extract_anatomy_details

log = logging.getLogger("angiomim")

IMAGE_SUFFIXES = (".pgm", ".png")
EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


# ------------------------------------------------------------------ helpers


def _list_images(path) -> list[str]:
    if os.path.isfile(path):
        return [path]
    if not os.path.isdir(path):
        raise FileNotFoundError(f"no such file or directory: {path}")
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise FileNotFoundError(f"{path}: no .pgm or .png images found")
    return [os.path.join(path, n) for n in names]


def _load_dir(path):
    files = _list_images(path)
    return [os.path.basename(f) for f in files], [load_image(f) for f in files]


def _load_masks_for(names, mask_dir):
    masks = []
    for name in names:
        path = os.path.join(mask_dir, name)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"{mask_dir}: missing mask for {name}")
        masks.append((load_image(path) >= 0.5).astype(np.uint8))
    return masks


def _load_split(root):
    """A split directory holds ``images/`` and ``masks/`` with matching names."""
    names, imgs = _load_dir(os.path.join(root, "images"))
    return names, imgs, _load_masks_for(names, os.path.join(root, "masks"))


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())


def _write_manifest(out_dir, command, config):
    payload = {"command": command, "config": config, "config_hash": config_digest(config), "version": __version__}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _heatmap(path, ratio, grid_shape, patch_size):
    level = np.floor(np.asarray(ratio).reshape(grid_shape) * 255.0 + 0.5).astype(np.int64)
    write_pgm(path, np.kron(level, np.ones((patch_size, patch_size), dtype=np.int64)))


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _frangi_from_args(args) -> FrangiConfig:
    return FrangiConfig(scales=tuple(args.scales), alpha=args.alpha, polarity=args.polarity,
                        connectivity=args.connectivity, multi_seed=args.seeds, response=args.response)


def _frangi_dict(cfg: FrangiConfig) -> dict:
    return {"scales": list(cfg.scales), "alpha": cfg.alpha, "polarity": cfg.polarity,
            "connectivity": cfg.connectivity, "seeds": cfg.multi_seed, "response": cfg.response}


# -------------------------------------------------------------- subcommands


def cmd_synth(args):
    cfg = PhantomConfig(size=args.size, n_trees=args.n_trees, branch_depth=args.branch_depth,
                        tube_width_range=(args.min_width, args.max_width), vessel_contrast=args.contrast,
                        noise_sigma=args.noise, seed=args.seed)
    manifest = make_benchmark(args.out, seed=args.seed, n_train=args.n_train, n_test=args.n_test, cfg=cfg)
    log.info("wrote %d train and %d test phantoms to %s (config %s)",
             args.n_train, args.n_test, args.out, manifest["config_hash"])


def _run_frangi(args, write_table):
    cfg = _frangi_from_args(args)
    files = _list_images(args.input)
    os.makedirs(args.output, exist_ok=True)
    rows = []
    for path in files:
        name = os.path.splitext(os.path.basename(path))[0] + ".pgm"
        res = extract_anatomy_details(load_image(path), cfg)
        save_mask(os.path.join(args.output, name), res.mask)
        if res.no_growth:
            log.warning("%s: no pixel survived region growing", name)
        seeds = ";".join(f"{r}:{c}" for r, c in res.seeds)
        rows.append([name, repr(float(res.threshold)), seeds, int(res.mask.sum())])
    if write_table:
        _write_csv(os.path.join(args.output, "extract.csv"), ["filename", "threshold", "seeds", "pixels"], rows)
    _write_manifest(args.output, args.command, {"frangi": _frangi_dict(cfg)})
    log.info("processed %d image(s) into %s", len(files), args.output)


def cmd_extract(args):
    _run_frangi(args, write_table=True)


def cmd_pseudo_label(args):
    _run_frangi(args, write_table=False)


def cmd_train_segmentor(args):
    names, imgs = _load_dir(args.images)
    labels = _load_masks_for(names, args.labels)
    rng = np.random.default_rng(args.seed)
    model, curve = seg_train(init_segmentor(args.channels, rng), imgs, labels, args.epochs, args.lr, rng)
    save_segmentor(args.out, freeze(model))
    if args.curve:
        _write_csv(args.curve, ["epoch", "loss"], [[e + 1, repr(v)] for e, v in enumerate(curve)])
    if curve:
        log.info("segmentor loss %.4f -> %.4f over %d epochs", curve[0], curve[-1], len(curve))


def _pretrain_overrides(args) -> dict:
    return {"train.epochs": args.epochs, "train.seed": args.seed, "train.workers": args.workers,
            "paths.output": args.output}


def cmd_pretrain(args):
    cfg = load_run_config(args.config, _pretrain_overrides(args))
    paths, m, tr, lo = cfg.paths, cfg.masking, cfg.train, cfg.loss
    names, imgs = _load_dir(paths["images"])
    if paths["masks"]:
        masks = _load_masks_for(names, paths["masks"])
    else:
        fr = cfg.frangi
        frangi = FrangiConfig(scales=tuple(fr["scales"]), alpha=fr["alpha"], polarity=fr["polarity"],
                              connectivity=fr["connectivity"], multi_seed=fr["seeds"], response=fr["response"])
        log.info("no masks given; extracting vessel masks for %d images", len(imgs))
        masks = [extract_anatomy_details(im, frangi).mask for im in imgs]
    seg = load_segmentor(paths["segmentor"]) if lo["consistency"] else None
    if seg is not None and not seg.frozen:
        seg = freeze(seg)

    schedule = Schedule(m["beta0"], m["betaE"], tr["epochs"])
    result = pretrain(
        imgs, masks, patch_size=m["patch_size"], embed_dim=cfg.model["embed_dim"],
        hidden_dim=cfg.model["hidden_dim"], gamma=m["gamma"], schedule=schedule, lr=tr["lr"],
        batch_size=tr["batch_size"], losses=LossConfig(lo["consistency"], lo["weighted_rec"], lo["metric"]),
        segmentor=seg, seed=tr["seed"], workers=tr["workers"],
    )
    out = paths["output"]
    os.makedirs(os.path.join(out, "heatmaps"), exist_ok=True)
    save_mim(os.path.join(out, "mim.bin"), result.model)
    header = ["epoch", "l_rec", "l_cons", "l_train", "masked_vessel_proportion"]
    rows = [[e + 1, repr(r.l_rec), repr(r.l_cons), repr(r.l_train), repr(p)]
            for e, (r, p) in enumerate(zip(result.reports, result.masked_vessel_proportion))]
    if lo["weighted_rec"]:
        header.append("l_wrec")
        for row, r in zip(rows, result.reports):
            row.append(repr(r.l_wrec))
    _write_csv(os.path.join(out, "epochs.csv"), header, rows)
    grid = (imgs[0].shape[0] // m["patch_size"], imgs[0].shape[1] // m["patch_size"])
    for name, ratio in zip(names, result.cumulative_ratio):
        _heatmap(os.path.join(out, "heatmaps", os.path.splitext(name)[0] + ".pgm"), ratio, grid, m["patch_size"])
    _write_manifest(out, "pretrain", cfg.to_dict())
    first, last = result.reports[0].l_train, result.reports[-1].l_train
    log.info("l_train %.4f -> %.4f (%.1f%%) over %d epochs", first, last, 100 * last / first, tr["epochs"])


def cmd_stats(args):
    overrides = {"masking.patch_size": args.patch_size, "masking.gamma": args.gamma, "masking.beta0": args.beta0,
                 "masking.betaE": args.betaE, "train.epochs": args.epochs, "train.seed": args.seed}
    cfg = load_run_config(args.config, overrides, need_output=False, need_images=False)
    m, tr = cfg.masking, cfg.train
    names, masks = _load_dir(args.masks)
    masks = [(mk >= 0.5).astype(np.uint8) for mk in masks]
    stats = schedule_statistics(masks, m["patch_size"], m["gamma"], Schedule(m["beta0"], m["betaE"], tr["epochs"]),
                                tr["seed"])
    os.makedirs(os.path.join(args.output, "heatmaps"), exist_ok=True)
    _write_csv(os.path.join(args.output, "proportion.csv"), ["epoch", "beta", "masked_vessel_proportion"],
               [[e + 1, repr(b), repr(p)] for e, (b, p) in enumerate(zip(stats.betas, stats.proportions))])
    grid = (masks[0].shape[0] // m["patch_size"], masks[0].shape[1] // m["patch_size"])
    for name, ratio in zip(names, stats.cumulative):
        _heatmap(os.path.join(args.output, "heatmaps", os.path.splitext(name)[0] + ".pgm"), ratio, grid,
                 m["patch_size"])
    config = {"masking": m, "train": {"epochs": tr["epochs"], "seed": tr["seed"]}}
    _write_manifest(args.output, "stats", config)
    log.info("mean masked vessel proportion %.4f over %d epochs", float(np.mean(stats.proportions)), tr["epochs"])


def cmd_eval(args):
    if args.seeds < 1:
        raise ParameterError("--seeds must be at least 1")
    if args.pretrained:
        model = load_mim(args.pretrained)
    else:
        model = init_mim(args.patch_size, args.random_features, 64,
                         np.random.default_rng(np.random.SeedSequence([args.init_seed, 2**31 - 1])))
    tr_names, tr_img, tr_gt = _load_split(args.train)
    te_names, te_img, te_gt = _load_split(args.test)
    extractor = lambda im: encode_features(model, im)  # noqa: E731
    rows, per_seed = [], []
    for seed in range(args.seeds):
        res = probe_train_eval(extractor, (tr_img, tr_gt), (te_img, te_gt), seed=seed,
                               patch_size=model.patch_size, epochs=args.probe_epochs, lr=args.probe_lr)
        for name, rep in zip(te_names, res["reports"]):
            rows.append([seed, name, repr(rep.dsc), repr(rep.cldice), repr(rep.tprec), repr(rep.tsens)])
        per_seed.append((res["dsc"], res["cldice"]))
        log.info("seed %d: DSC %.4f clDice %.4f", seed, res["dsc"], res["cldice"])
    arr = np.array(per_seed)
    rows.append(["mean", "", repr(float(arr[:, 0].mean())), repr(float(arr[:, 1].mean())), "", ""])
    rows.append(["std", "", repr(float(arr[:, 0].std())), repr(float(arr[:, 1].std())), "", ""])
    _write_csv(args.output, ["seed", "image", "dsc", "cldice", "tprec", "tsens"], rows)


# ------------------------------------------------------------------ parser


def _add_frangi_flags(p):
    p.add_argument("--input", required=True, help="image file or directory of .pgm/.png images")
    p.add_argument("--output", required=True, help="directory for mask PGMs")
    p.add_argument("--scales", type=_float_list, default=[1.0, 2.0, 3.0, 4.0], help="Gaussian scales (default 1,2,3,4)")
    p.add_argument("--alpha", type=float, default=92.0, help="threshold percentile (default 92)")
    p.add_argument("--polarity", choices=("dark", "bright"), default="dark", help="vessel polarity (default dark)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8, help="region-growing connectivity")
    p.add_argument("--seeds", type=int, default=1, help="number of region-growing seeds (default 1)")
    p.add_argument("--response", choices=("cross", "along"), default="cross",
                   help="eigenvalue used as the tube response (default cross)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="angiomim", description="Anatomy-guided masked image modeling toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging on stderr")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic phantom benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--n-trees", type=int, default=1)
    p.add_argument("--branch-depth", type=int, default=3)
    p.add_argument("--min-width", type=float, default=2.0, help="thinnest tube FWHM in pixels")
    p.add_argument("--max-width", type=float, default=6.0, help="thickest tube FWHM in pixels")
    p.add_argument("--contrast", type=float, default=0.4)
    p.add_argument("--noise", type=float, default=0.02, help="Gaussian noise sigma")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common], help="vessel masks plus a per-image CSV (threshold, seeds, pixel count)")
    _add_frangi_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pseudo-label", parents=[common], help="vessel masks for segmentor training")
    _add_frangi_flags(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-segmentor", parents=[common], help="train and freeze the vessel segmentor")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True, help="mask directory with the same file names")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--curve", help="optional CSV path for the per-epoch loss")
    p.set_defaults(func=cmd_train_segmentor)

    p = sub.add_parser("pretrain", parents=[common], help="masked image modeling pre-training from a TOML run config")
    p.add_argument("--config", required=True, help="run.toml")
    p.add_argument("--output", help="override paths.output")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--workers", type=int, help="override train.workers")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", parents=[common], help="linear-probe DSC/clDice table over several seeds")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pretrained", help="autoencoder checkpoint")
    src.add_argument("--random-features", type=int, metavar="D", help="use an untrained encoder with D features")
    p.add_argument("--patch-size", type=int, default=8, help="patch size for --random-features")
    p.add_argument("--init-seed", type=int, default=0, help="initialization seed for --random-features")
    p.add_argument("--train", required=True, help="split directory with images/ and masks/")
    p.add_argument("--test", required=True, help="split directory with images/ and masks/")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--probe-epochs", type=int, default=60)
    p.add_argument("--probe-lr", type=float, default=0.5)
    p.add_argument("--output", help="CSV path (default: standard output)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", parents=[common], help="masking statistics: per-epoch vessel proportion and cumulative heatmaps")
    p.add_argument("--masks", required=True, help="directory of vessel masks")
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="optional run.toml supplying [masking] and [train]")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta0", type=float)
    p.add_argument("--betaE", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose + 1, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        args.func(args)
    except (ConfigError, ParameterError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level report
        log.error("%s failed: %s", args.command, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
