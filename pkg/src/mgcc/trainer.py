"""Optimization loop: SGD with poly schedule, mixed labeled/unlabeled steps,
periodic validation, best/last checkpointing and bit-exact resume.

Determinism contract: (config, master seed, dataset) fully determines every
parameter value after any number of steps, across save/load boundaries.  All
data-order and augmentation randomness is derived from (seed, epoch, batch)
alone; perturbation noise comes from a checkpointable torch generator.
"""

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .backbone import ForwardOutputs, MgccNet, initialize_parameters
from .data import MixedBatch, augment, compose_batches
from .errors import CheckpointError, DataError, NumericalError
from .objective import LossReport, WarmupSchedule, consistency_loss, supervised_loss, total_loss

CHECKPOINT_VERSION = 1
CSV_COLUMNS = ("epoch", "step", "lr", "lambda", "loss_total", "loss_sup", "loss_unsup",
               "val_iou", "val_recall", "val_precision", "val_f1")

_ORDER_SALT = 7919
_AUG_SALT = 104729
_PERTURB_SALT = 1000003


@dataclass
class OptimConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 300
    poly_power: float = 0.9
    eval_every: int = 5
    mode: str = "mgcc"            # "mgcc" or "supervised-only"
    threshold: float = 0.5

    def validate(self):
        errs = []
        if self.lr0 < 0:
            errs.append(f"lr0 must be >= 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            errs.append(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            errs.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            errs.append(f"epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 1:
            errs.append(f"eval_every must be >= 1, got {self.eval_every}")
        if self.mode not in ("mgcc", "supervised-only"):
            errs.append(f"mode must be 'mgcc' or 'supervised-only', got {self.mode!r}")
        if not 0.0 <= self.threshold <= 1.0:
            errs.append(f"threshold must be in [0,1], got {self.threshold}")
        return errs


@dataclass
class MetricRecord:
    epoch: int
    split: str
    iou: float
    recall: float
    precision: float
    f1: float
    loss_total: float = None
    loss_sup: float = None
    loss_unsup: float = None


class TrainState:
    """Everything the checkpoint round-trips: parameters, optimizer slots,
    RNG streams, counters and metric history."""

    def __init__(self, model, optimizer, generators, optim_config, warmup,
                 steps_per_epoch, master_seed, init_seed, config_text=""):
        self.model = model
        self.optimizer = optimizer
        self.generators = generators
        self.optim_config = optim_config
        self.warmup = warmup
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = steps_per_epoch * optim_config.epochs
        self.master_seed = master_seed
        self.init_seed = init_seed
        self.config_text = config_text
        self.step = 0
        self.epoch = 0
        self.best_val_iou = None
        self.history = []


def poly_lr(step, total_steps, config):
    """lr0 * (1 - step/total_steps)^poly_power."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return config.lr0 * (1.0 - frac) ** config.poly_power


def init_train_state(net_config, optim_config, w_max, steps_per_epoch, master_seed, config_text=""):
    errs = optim_config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    model = MgccNet(net_config)
    init_seed = int(master_seed)
    initialize_parameters(model, init_seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=optim_config.lr0,
                                momentum=optim_config.momentum,
                                weight_decay=optim_config.weight_decay)
    perturb_gen = torch.Generator().manual_seed(int(master_seed) * _PERTURB_SALT + 17)
    generators = {"perturb": perturb_gen}
    warmup = WarmupSchedule(w_max, max(steps_per_epoch * optim_config.epochs, 1))
    return TrainState(model, optimizer, generators, optim_config, warmup,
                      steps_per_epoch, int(master_seed), init_seed, config_text)


def _image_tensor(samples, dtype=torch.float32):
    return torch.from_numpy(np.stack([s.image for s in samples])).to(dtype).unsqueeze(1)


def _mask_tensor(samples, dtype=torch.float32):
    for s in samples:
        if s.mask is None:
            raise DataError(f"labeled sample {s.id} has no mask")
    return torch.from_numpy(np.stack([s.mask for s in samples])).to(dtype).unsqueeze(1)


def train_step(state, batch):
    """One optimization step on a MixedBatch; returns the LossReport.

    mgcc mode runs one joint forward over labeled+unlabeled images (shared
    batch-norm statistics) and adds the warm-up weighted consistency term;
    supervised-only skips the unlabeled forward and the consistency term.
    """
    cfg = state.optim_config
    model = state.model
    model.train()
    lr = poly_lr(state.step, state.total_steps, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    x_lab = _image_tensor(batch.labeled)
    y_lab = _mask_tensor(batch.labeled)
    use_unlabeled = cfg.mode == "mgcc" and len(batch.unlabeled) > 0
    gen = state.generators["perturb"]
    if use_unlabeled:
        x_unl = _image_tensor(batch.unlabeled)
        out = model(torch.cat([x_lab, x_unl]), mode="train", generator=gen)
        n_lab = x_lab.shape[0]
        out_lab = ForwardOutputs(out.main_logits[:n_lab], [a[:n_lab] for a in out.aux_logits])
        out_unl = ForwardOutputs(out.main_logits[n_lab:], [a[n_lab:] for a in out.aux_logits])
    else:
        out_lab = model(x_lab, mode="train", generator=gen)
        out_unl = None

    loss_sup, per_decoder = supervised_loss(out_lab, y_lab)
    if out_unl is not None:
        loss_unsup = consistency_loss(out_unl)
        report = total_loss(float(loss_sup.detach()), float(loss_unsup.detach()),
                            state.step, state.warmup, per_decoder)
        objective = loss_sup + report.lam * loss_unsup
    else:
        sup_val = float(loss_sup.detach())
        if not math.isfinite(sup_val):
            raise NumericalError(f"supervised loss is not finite at step {state.step}: {sup_val}")
        report = LossReport(sup_val, 0.0, 0.0, sup_val, per_decoder)
        objective = loss_sup

    if not math.isfinite(report.total):
        raise NumericalError(f"total loss is not finite at step {state.step}: {report.total}")
    state.optimizer.zero_grad()
    objective.backward()
    state.optimizer.step()
    state.step += 1
    return report


def evaluate(model, samples, threshold=0.5, epoch=-1, split="val", batch_size=8):
    """Macro-averaged per-image metrics at the given binarization threshold.

    Lesion-free images (empty or missing mask) with empty predictions score
    1.0 on all metrics.
    """
    if not samples:
        raise DataError("empty evaluation set")
    was_training = model.training
    model.eval()
    per_image = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            out = model(_image_tensor(chunk), mode="eval")
            probs = torch.sigmoid(out.main_logits).numpy()[:, 0]
            for s, p in zip(chunk, probs):
                pred = p > threshold
                gt = s.mask if s.mask is not None else np.zeros_like(pred, dtype=np.uint8)
                per_image.append(metrics.scores(metrics.confusion(pred, gt)))
    if was_training:
        model.train()
    macro = {name: float(np.mean([r[name] for r in per_image])) for name in metrics.METRIC_NAMES}
    return MetricRecord(epoch, split, macro["iou"], macro["recall"], macro["precision"], macro["f1"])


def _format(value):
    return "" if value is None else f"{value:.10g}"


def _append_csv(path, row):
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CSV_COLUMNS)
        writer.writerow([_format(row.get(c)) for c in CSV_COLUMNS])


def write_run_manifest(run_dir, config_text, master_seed, dataset_hashes, extra=None):
    """Config snapshot + seeds + dataset hashes, written before training starts."""
    manifest = {"master_seed": master_seed, "dataset_hashes": dataset_hashes,
                "config": config_text}
    if extra:
        manifest.update(extra)
    path = Path(run_dir) / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def fit(state, labeled_pool, unlabeled_pool, val_pool, run_dir, *,
        labeled_per_batch=4, unlabeled_per_batch=4, aug_config=None, log=None):
    """Run the remaining epochs of training, evaluating every eval_every epochs
    and persisting ckpt_best (by validation IoU) and ckpt_last."""
    cfg = state.optim_config
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / "log.csv"
    seed = state.master_seed
    expected_spe = math.ceil(len(labeled_pool) / labeled_per_batch)
    if expected_spe != state.steps_per_epoch:
        raise ValueError(f"steps_per_epoch mismatch: state has {state.steps_per_epoch}, "
                         f"pools give {expected_spe}")
    start_epoch = state.step // state.steps_per_epoch
    offset = state.step % state.steps_per_epoch

    for epoch in range(start_epoch, cfg.epochs):
        order_rng = np.random.default_rng([seed, _ORDER_SALT, epoch])
        batches = list(compose_batches(labeled_pool, unlabeled_pool if cfg.mode == "mgcc" else [],
                                       labeled_per_batch,
                                       unlabeled_per_batch if cfg.mode == "mgcc" else 0,
                                       order_rng))
        sums = {"total": 0.0, "sup": 0.0, "unsup": 0.0}
        count = 0
        last_report = None
        first = offset if epoch == start_epoch else 0
        for b in range(first, len(batches)):
            batch = batches[b]
            if aug_config is not None:
                aug_rng = np.random.default_rng([seed, _AUG_SALT, epoch, b])
                batch = MixedBatch([augment(s, aug_config, aug_rng) for s in batch.labeled],
                                   [augment(s, aug_config, aug_rng) for s in batch.unlabeled])
            try:
                report = train_step(state, batch)
            except NumericalError:
                save_checkpoint(state, run_dir / "ckpt_abort")
                raise
            sums["total"] += report.total
            sums["sup"] += report.supervised
            sums["unsup"] += report.unsupervised
            count += 1
            last_report = report
        state.epoch = epoch + 1

        row = {"epoch": state.epoch, "step": state.step,
               "lr": poly_lr(state.step - 1, state.total_steps, cfg) if count else None,
               "lambda": last_report.lam if last_report else None,
               "loss_total": sums["total"] / count if count else None,
               "loss_sup": sums["sup"] / count if count else None,
               "loss_unsup": sums["unsup"] / count if count else None}
        if state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs:
            record = evaluate(state.model, val_pool, cfg.threshold, epoch=state.epoch)
            record.loss_total = row["loss_total"]
            record.loss_sup = row["loss_sup"]
            record.loss_unsup = row["loss_unsup"]
            state.history.append(record)
            row.update({"val_iou": record.iou, "val_recall": record.recall,
                        "val_precision": record.precision, "val_f1": record.f1})
            if state.best_val_iou is None or record.iou > state.best_val_iou:
                state.best_val_iou = record.iou
                save_checkpoint(state, run_dir / "ckpt_best")
            save_checkpoint(state, run_dir / "ckpt_last")
            if log:
                log(f"epoch {state.epoch}: loss {row['loss_total']:.4f} val IoU {record.iou:.4f}")
        _append_csv(csv_path, row)
    save_checkpoint(state, run_dir / "ckpt_last")
    return state


def save_checkpoint(state, path):
    """Versioned binary checkpoint with the embedded config; atomic write."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_text": state.config_text,
        "network_config": state.model.config,
        "optim_config": state.optim_config,
        "warmup": state.warmup,
        "steps_per_epoch": state.steps_per_epoch,
        "master_seed": state.master_seed,
        "init_seed": state.init_seed,
        "step": state.step,
        "epoch": state.epoch,
        "best_val_iou": state.best_val_iou,
        "history": state.history,
        "model_state": state.model.state_dict(),
        "optim_state": state.optimizer.state_dict(),
        "rng_states": {name: gen.get_state() for name, gen in state.generators.items()},
    }
    path = str(path)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def _config_diff(stored, expected):
    diffs = []
    for name in vars(expected):
        a, b = getattr(stored, name, None), getattr(expected, name)
        if a != b:
            diffs.append(f"{name}: checkpoint={a!r} expected={b!r}")
    return diffs


def load_checkpoint(path, expected_network=None):
    """Rebuild a TrainState from disk; refuses incompatible files."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {CHECKPOINT_VERSION}")
    net_config = payload["network_config"]
    if expected_network is not None:
        diffs = _config_diff(net_config, expected_network)
        if diffs:
            raise CheckpointError("checkpoint network config mismatch: " + "; ".join(diffs))
    model = MgccNet(net_config)
    model.load_state_dict(payload["model_state"])
    optim_config = payload["optim_config"]
    optimizer = torch.optim.SGD(model.parameters(), lr=optim_config.lr0,
                                momentum=optim_config.momentum,
                                weight_decay=optim_config.weight_decay)
    optimizer.load_state_dict(payload["optim_state"])
    generators = {}
    for name, blob in payload["rng_states"].items():
        gen = torch.Generator()
        gen.set_state(blob)
        generators[name] = gen
    state = TrainState(model, optimizer, generators, optim_config, payload["warmup"],
                       payload["steps_per_epoch"], payload["master_seed"],
                       payload["init_seed"], payload["config_text"])
    state.step = payload["step"]
    state.epoch = payload["epoch"]
    state.best_val_iou = payload["best_val_iou"]
    state.history = payload["history"]
    return state
