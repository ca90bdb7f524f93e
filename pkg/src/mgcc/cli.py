"""Command-line surface tying the two-stage pipeline together.

Commands compose via the filesystem only:

    prepare    build (toy) dataset and split manifests
    train-vae  stage 1a: train the pixel compressor
    train-ldm  stage 1b: train the latent denoiser
    generate   sample synthetic unlabeled images via DDIM
    train-seg  stage 2: semi-supervised (or supervised-only) segmentation
    eval       metrics of a checkpoint on a split
    report     mean +- stdev table and figure over several runs
    render     qualitative input | ground truth | prediction overlays

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

import argparse
import dataclasses
import math
import sys
from pathlib import Path

from . import data as data_mod
from . import ldm as ldm_mod
from . import metrics, reporting, trainer
from .config import from_yaml, load_config
from .errors import CheckpointError, ConfigError, DataError, NumericalError


def _load_split_pools(cfg):
    """Load the dataset and build (labeled, unlabeled, val) pools for one split."""
    samples = data_mod.load_directory(cfg.data.dataset_dir, cfg.data.image_size, cfg.data.mask_suffix)
    split = data_mod.read_split_manifest(cfg.data.resolved_split_dir(), cfg.data.split_index)
    by_id = {s.id: s for s in samples}
    missing = [i for i in split.train_ids + split.val_ids if i not in by_id]
    if missing:
        raise DataError(f"split ids not found in dataset: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    labeled = [by_id[i] for i in split.labeled_ids]
    for s in labeled:
        if s.mask is None:
            raise DataError(f"labeled sample {s.id} has no mask file")
    labeled_set = set(split.labeled_ids)
    unlabeled = [by_id[i] for i in split.train_ids if i not in labeled_set]
    for d in cfg.data.extra_unlabeled_dirs:
        extra = data_mod.load_directory(d, cfg.data.image_size, cfg.data.mask_suffix)
        pool_file = Path(d) / "unlabeled_pool.txt"
        if pool_file.is_file():
            wanted = {line for line in pool_file.read_text().splitlines() if line}
            extra = [s for s in extra if s.id in wanted]
        unlabeled.extend(extra)
    val = [by_id[i] for i in split.val_ids]
    return samples, labeled, unlabeled, val


def _train_samples(cfg, image_size):
    """Training-split samples (labeled + in-domain unlabeled) at a given size."""
    samples = data_mod.load_directory(cfg.data.dataset_dir, image_size, cfg.data.mask_suffix)
    split = data_mod.read_split_manifest(cfg.data.resolved_split_dir(), cfg.data.split_index)
    by_id = {s.id: s for s in samples}
    missing = [i for i in split.train_ids if i not in by_id]
    if missing:
        raise DataError(f"split ids not found in dataset: {missing[:5]}")
    return [by_id[i] for i in split.train_ids]


def cmd_prepare(args):
    out = Path(args.out)
    if args.toy is not None:
        size = args.image_size or 64
        toy_cfg = data_mod.ToyGenConfig(image_size=size, seed=args.seed)
        samples = data_mod.generate_toy(toy_cfg, args.toy)
        data_mod.export_dataset(samples, out)
        dataset_label = f"toy dataset ({len(samples)} samples, {size}x{size})"
    else:
        size = args.image_size or 256
        samples = data_mod.load_directory(args.input, image_size=size, mask_suffix=args.mask_suffix)
        dataset_label = f"{args.input} ({len(samples)} samples)"
    splits = data_mod.make_splits(samples, args.train_ratio, args.repeats, args.seed)
    splits = [data_mod.partition_labels(s, args.labeled_fraction, args.seed) for s in splits]
    manifest_dir = data_mod.write_split_manifests(splits, out / "splits")
    print(f"prepared {dataset_label}")
    for s in splits:
        print(f"  split {s.repeat_index}: {len(s.train_ids)} train "
              f"({len(s.labeled_ids)} labeled) / {len(s.val_ids)} val")
    print(f"split manifests in {manifest_dir}")
    return 0


def cmd_train_seg(args):
    cfg = load_config(args.config)
    if args.mode:
        cfg.optim.mode = {"mgcc": "mgcc", "supervised": "supervised-only"}[args.mode]
    if args.out:
        cfg.run.output_dir = args.out
    cfg.validate()
    run_dir = Path(cfg.run.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())

    samples, labeled, unlabeled, val = _load_split_pools(cfg)
    steps_per_epoch = math.ceil(len(labeled) / cfg.data.labeled_per_batch)
    if args.resume:
        state = trainer.load_checkpoint(args.resume, expected_network=cfg.network)
    else:
        state = trainer.init_train_state(cfg.network, cfg.optim, cfg.objective.w_max,
                                         steps_per_epoch, cfg.run.seed, config_text=cfg.to_yaml())
    trainer.write_run_manifest(
        run_dir, cfg.to_yaml(), cfg.run.seed,
        {"dataset": data_mod.dataset_hash(samples),
         "unlabeled_pool": data_mod.dataset_hash(unlabeled) if unlabeled else ""},
        extra={"mode": cfg.optim.mode, "labeled": len(labeled), "unlabeled": len(unlabeled),
               "val": len(val)})
    print(f"training ({cfg.optim.mode}): {len(labeled)} labeled / {len(unlabeled)} unlabeled "
          f"/ {len(val)} val, {cfg.optim.epochs} epochs")
    trainer.fit(state, labeled, unlabeled, val, run_dir,
                labeled_per_batch=cfg.data.labeled_per_batch,
                unlabeled_per_batch=cfg.data.unlabeled_per_batch,
                aug_config=cfg.data.augment, log=print)
    best = f" (best val IoU {state.best_val_iou:.4f})" if state.best_val_iou is not None else ""
    print(f"run complete: {run_dir}{best}")
    return 0


def cmd_train_vae(args):
    cfg = load_config(args.config)
    run_dir = Path(cfg.run.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train = _train_samples(cfg, cfg.ldm.vae.image_size)
    print(f"training VAE on {len(train)} images at {cfg.ldm.vae.image_size}px")
    model, history = ldm_mod.train_vae(train, cfg.ldm.vae, seed=cfg.run.seed, log=print)
    path = ldm_mod.save_ldm_checkpoint(model, "vae", cfg.ldm.vae, run_dir / "vae.ckpt",
                                       extra={"history": history})
    print(f"saved {path} (final recon MSE {history[-1]:.6f})")
    return 0


def cmd_train_ldm(args):
    cfg = load_config(args.config)
    run_dir = Path(cfg.run.output_dir)
    vae, _ = ldm_mod.load_ldm_checkpoint(run_dir / "vae.ckpt", "vae")
    train = _train_samples(cfg, cfg.ldm.vae.image_size)
    latents, scale = ldm_mod.encode_dataset(vae, train)
    schedule = ldm_mod.linear_beta_schedule(cfg.ldm.schedule.timesteps,
                                            cfg.ldm.schedule.beta_start, cfg.ldm.schedule.beta_end)
    print(f"training denoiser on {latents.shape[0]} latents "
          f"({latents.shape[1]}x{latents.shape[2]}x{latents.shape[3]}, scale {scale:.4f})")
    model, history = ldm_mod.train_denoiser(latents, schedule, cfg.ldm.denoiser,
                                            seed=cfg.run.seed, log=print)
    path = ldm_mod.save_ldm_checkpoint(
        model, "denoiser", cfg.ldm.denoiser, run_dir / "denoiser.ckpt",
        extra={"latent_channels": latents.shape[1], "scale_factor": scale,
               "schedule": dataclasses.asdict(cfg.ldm.schedule), "history": history})
    print(f"saved {path} (final loss {history[-1]:.6f})")
    return 0


def cmd_generate(args):
    cfg = load_config(args.config)
    run_dir = Path(cfg.run.output_dir)
    vae, _ = ldm_mod.load_ldm_checkpoint(run_dir / "vae.ckpt", "vae")
    denoiser_path = run_dir / "denoiser.ckpt"
    denoiser, payload = ldm_mod.load_ldm_checkpoint(denoiser_path, "denoiser")
    sch = payload.get("schedule") or dataclasses.asdict(cfg.ldm.schedule)
    schedule = ldm_mod.linear_beta_schedule(sch["timesteps"], sch["beta_start"], sch["beta_end"])
    ddim_cfg = dataclasses.replace(cfg.ldm.ddim)
    if args.steps:
        ddim_cfg.steps = args.steps
    seed = args.seed if args.seed is not None else ddim_cfg.seed
    out = Path(args.out) if args.out else run_dir / "synthetic"
    samples = ldm_mod.synthesize(vae, denoiser, schedule, ddim_cfg, args.n, seed=seed,
                                 out_dir=out, scale_factor=payload.get("scale_factor", 1.0),
                                 checkpoint_hash=ldm_mod.file_hash(denoiser_path))
    print(f"wrote {len(samples)} synthetic images to {out} (seed {seed}, {ddim_cfg.steps} steps)")
    return 0


def _split_samples(cfg, split_name):
    samples = data_mod.load_directory(cfg.data.dataset_dir, cfg.data.image_size, cfg.data.mask_suffix)
    split = data_mod.read_split_manifest(cfg.data.resolved_split_dir(), cfg.data.split_index)
    ids = {"train": split.train_ids, "val": split.val_ids, "labeled": split.labeled_ids}[split_name]
    by_id = {s.id: s for s in samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"split ids not found in dataset: {missing[:5]}")
    return [by_id[i] for i in ids]


def cmd_eval(args):
    state = trainer.load_checkpoint(args.ckpt)
    cfg = from_yaml(state.config_text) if state.config_text else None
    if args.config:
        cfg = load_config(args.config)
    if cfg is None:
        raise ConfigError("checkpoint carries no config; pass --config")
    samples = _split_samples(cfg, args.split)
    record = trainer.evaluate(state.model, samples, cfg.optim.threshold, split=args.split)
    agg = {name: (getattr(record, name), 0.0) for name in metrics.METRIC_NAMES}
    print(metrics.format_table([(args.split, agg)]))
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval_{args.split}.csv"
    with open(path, "w") as fh:
        fh.write("split," + ",".join(metrics.METRIC_NAMES) + "\n")
        fh.write(args.split + "," + ",".join(f"{getattr(record, n):.6f}" for n in metrics.METRIC_NAMES) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_report(args):
    records = [reporting.best_val_record(r) for r in args.runs]
    out = Path(args.out)
    csv_path, txt_path, fig_path = reporting.write_report([(args.label, records)], out)
    print((out / "report.txt").read_text())
    print(f"wrote {csv_path}, {txt_path}, {fig_path}")
    return 0


def cmd_render(args):
    state = trainer.load_checkpoint(args.ckpt)
    cfg = from_yaml(state.config_text) if state.config_text else None
    image_size = cfg.data.image_size if cfg else 256
    threshold = cfg.optim.threshold if cfg else 0.5
    samples = data_mod.load_directory(args.images, image_size=image_size)
    if args.n:
        samples = samples[:args.n]
    written = reporting.render_overlays(state.model, samples, args.out, threshold)
    print(f"wrote {len(written)} overlays to {args.out} (see render_legend.txt for color coding)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mgcc",
        description="Two-stage pipeline: latent-diffusion image synthesis feeding a "
                    "multi-level global-context cross-consistency segmentation network.",
        epilog="File formats: datasets use <root>/<class>/<name>.png with masks "
               "<name>_mask.png (variants _mask_1, ...); split manifests are "
               "split<k>_{train,val,labeled}.txt with one id per line; training logs are "
               "CSV with columns epoch,step,lr,lambda,loss_total,loss_sup,loss_unsup,"
               "val_iou,val_recall,val_precision,val_f1 (val fields empty between "
               "evaluations). Exit codes: 0 success, 2 config error, 3 data error, "
               "4 numerical abort.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset (toy) and split manifests")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="existing dataset root (paired-suffix layout)")
    src.add_argument("--toy", type=int, metavar="N", help="generate N procedural toy samples")
    p.add_argument("--out", required=True, help="output directory (dataset + splits/)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-ratio", type=float, default=0.7)
    p.add_argument("--repeats", type=int, default=3, help="number of independent splits")
    p.add_argument("--labeled-fraction", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=None,
                   help="resize target (default 64 for --toy, 256 for --input)")
    p.add_argument("--mask-suffix", default="_mask")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-seg", help="train the segmentation network")
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--mode", choices=["mgcc", "supervised"], default=None,
                   help="override optim.mode (supervised = labeled data only)")
    p.add_argument("--out", default=None, help="override run.output_dir")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-vae", help="train the pixel compressor")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-ldm", help="train the latent denoiser (needs vae.ckpt)")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_ldm)

    p = sub.add_parser("generate", help="sample synthetic unlabeled images via DDIM")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--steps", type=int, default=None, help="DDIM steps (default from config)")
    p.add_argument("--seed", type=int, default=None, help="generation seed (default from config)")
    p.add_argument("--out", default=None, help="output directory (default <run>/synthetic)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "labeled"], default="val")
    p.add_argument("--config", default=None, help="override the checkpoint's embedded config")
    p.add_argument("--out", default=None, help="directory for eval_<split>.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate runs into a mean+-stdev table and figure")
    p.add_argument("--runs", nargs="+", required=True, help="run directories (one per repeat)")
    p.add_argument("--label", default="mgcc", help="row label for the aggregated method")
    p.add_argument("--out", default="report", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("render", help="write input | ground truth | prediction overlays")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="directory of images (masks optional)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None, help="limit the number of images")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
