"""SGD training with warmup/decay, checkpointing, evaluation and inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gtns
from . import tensor as T
from .config import TrainConfig, load_config
from .data import DatasetManifest, augment, load_all, load_image, resize_sample, to_u8, write_pnm
from .errors import NonFiniteError, TrainingDivergedError
from .losses import model_loss
from .metrics import EvalResult, aggregate, evaluate, mae
from .model import GraftNet, build_model
from .tensor import resize_array

log = logging.getLogger(__name__)

LOSS_FIELDS = ("step", "total", "bce_P", "iou_P", "agl", "aux")


def lr_factor(step, total_steps, warmup_fraction):
    """Linear warmup to 1 over the first warmup_fraction of steps, then linear decay towards 0."""
    warm = int(round(warmup_fraction * total_steps))
    if step < warm:
        return (step + 1) / warm
    return (total_steps - step) / max(total_steps - warm, 1)


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, groups, momentum=0.9, weight_decay=0.0005):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}

    def step(self, factor=1.0):
        mu, wd = self.momentum, self.weight_decay
        for ps, max_lr in self.groups:
            lr = max_lr * factor
            for p in ps:
                v = self.velocity[id(p)]
                v *= mu
                v += p.grad + wd * p.data
                p.data -= (lr * v).astype(p.data.dtype)

    def zero_grad(self):
        for ps, _ in self.groups:
            for p in ps:
                p.grad[...] = 0


def make_optimizer(model: GraftNet, cfg: TrainConfig):
    attn = model.backbone_attn_parameters()
    attn_ids = {id(p) for p in attn}
    other = [p for p in model.parameters() if id(p) not in attn_ids]
    groups = [(other, cfg.lr_other)]
    if attn:
        groups.append((attn, cfg.lr_backbone_attn))
    return SGD(groups, cfg.momentum, cfg.weight_decay)


def stack_samples(samples):
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    masks = np.stack([s.mask[None] for s in samples]).astype(np.float32)
    return images, masks


def predict(model: GraftNet, images, batch_size=8):
    """Final saliency maps (N×H×W) in eval mode."""
    was_training = any(st.training for _, st in model.named_bn_states())
    model.eval()
    outs = []
    try:
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(model(images[i : i + batch_size]).pred.data[:, 0])
    finally:
        model.train(was_training)
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[-2:], np.float32)


def steps_per_epoch(n, batch_size):
    # a trailing batch of one sample is dropped: batch statistics at the 1×1 levels need two
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


@dataclass
class TrainResult:
    model: GraftNet
    loss_rows: list = field(default_factory=list)
    val_rows: list = field(default_factory=list)

    @property
    def final_val_mae(self):
        return self.val_rows[-1]["val_mae"] if self.val_rows else float("nan")


def train(cfg: TrainConfig, manifest: DatasetManifest, out_dir=None, val_manifest=None, max_steps=None) -> TrainResult:
    """Train ``cfg.variant`` on ``manifest``; writes a checkpoint and logs to out_dir when given."""
    if len(manifest) < 2:
        raise ValueError("training needs at least two samples")
    samples = [resize_sample(s, cfg.input_hw, cfg.input_hw) for s in load_all(manifest)]
    if val_manifest is not None:
        val = [resize_sample(s, cfg.input_hw, cfg.input_hw) for s in load_all(val_manifest)]
    else:
        n_val = int(len(samples) * cfg.val_fraction)
        val = samples[len(samples) - n_val :] if n_val else []
        samples = samples[: len(samples) - n_val] if n_val else samples
    val_images, val_masks = stack_samples(val) if val else (None, None)

    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    data_rng = np.random.default_rng([cfg.seed, 1])
    n = len(samples)
    spe = steps_per_epoch(n, cfg.batch_size)
    total = spe * cfg.epochs if max_steps is None else min(max_steps, spe * cfg.epochs)
    use_agl = cfg.variant == "cmgm_agl"
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        order = data_rng.permutation(n)
        for b in range(spe):
            if step >= total:
                break
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [samples[i] for i in idx]
            if cfg.augment:
                scale = cfg.scales[int(data_rng.integers(len(cfg.scales)))]
                batch = [augment(s, data_rng, cfg.input_hw, (scale,)) for s in batch]
            images, masks = stack_samples(batch)
            parts = _train_step(model, opt, images, masks, cfg, use_agl, step, total)
            result.loss_rows.append({"step": step, **parts})
            step += 1
        if val:
            preds = predict(model, val_images)
            v = float(np.mean([mae(p, g[0]) for p, g in zip(preds, val_masks)]))
            result.val_rows.append({"epoch": epoch, "val_mae": v})
            log.info("epoch %d  loss %.4f  val_mae %.4f", epoch, result.loss_rows[-1]["total"], v)
    if out_dir is not None:
        save_checkpoint(model, out_dir)
        write_loss_csv(result.loss_rows, Path(out_dir) / "loss.csv")
        _write_rows(result.val_rows, Path(out_dir) / "val.csv", ("epoch", "val_mae"))
    return result


def _train_step(model, opt, images, masks, cfg, use_agl, step, total):
    opt.zero_grad()
    with T.fresh_tape():
        try:
            out = model(images)
            loss, parts = model_loss(out, masks, cfg.beta, use_agl)
        except NonFiniteError as e:
            raise TrainingDivergedError(step, {"error": str(e)}) from e
        if not all(math.isfinite(v) for v in parts.values()):
            raise TrainingDivergedError(step, parts)
        loss.backward()
    opt.step(lr_factor(step, total, cfg.warmup_fraction))
    return parts


def write_loss_csv(rows, path):
    _write_rows(rows, path, LOSS_FIELDS)


def _write_rows(rows, path, fields):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(fields)
        for r in rows:
            wr.writerow([repr(r[f]) if isinstance(r[f], float) else r[f] for f in fields])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: GraftNet, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.config.save(directory / "config.cfg")
    gtns.save_arrays(directory, model.state_arrays())


def load_checkpoint(directory) -> GraftNet:
    directory = Path(directory)
    cfg = load_config(directory / "config.cfg")
    model = build_model(cfg)
    model.load_state_arrays(gtns.load_arrays(directory))
    return model.eval()


# ---------------------------------------------------------------- evaluation / inference

EVAL_FIELDS = ("sample_id", "mae", "f_max", "s", "e", "bde")


def evaluate_model(model: GraftNet, manifest: DatasetManifest):
    """Per-sample EvalResults; predictions are made at the model resolution and scored at GT resolution."""
    hw = model.config.input_hw
    results = []
    for s in load_all(manifest):
        small = resize_sample(s, hw, hw)
        images, _ = stack_samples([small])
        p = predict(model, images)[0]
        results.append((s.id, evaluate(p, s.mask)))
    return results


def write_eval_csv(results, path):
    agg = aggregate([r for _, r in results])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(EVAL_FIELDS)
        for sid, r in results:
            wr.writerow(_eval_row(sid, r))
        wr.writerow(_eval_row("mean", agg))
    return agg


def _eval_row(sid, r: EvalResult):
    return [sid] + [repr(float(v)) for v in (r.mae, r.f_max, r.s_measure, r.e_measure, r.bde)]


def eval_checkpoint(ckpt_dir, manifest: DatasetManifest, csv_path):
    model = load_checkpoint(ckpt_dir)
    return write_eval_csv(evaluate_model(model, manifest), csv_path)


def infer(ckpt_dir, image_path, out_path):
    """Write the saliency map of one image as an 8-bit PGM at the image's own resolution."""
    model = load_checkpoint(ckpt_dir)
    img = load_image(image_path)
    h, w = img.shape[:2]
    hw = model.config.input_hw
    x = resize_array(img.transpose(2, 0, 1).astype(np.float64), hw, hw).astype(np.float32)[None]
    p = predict(model, np.clip(x, 0, 1))[0]
    p = np.clip(resize_array(p.astype(np.float64), h, w), 0, 1)
    write_pnm(out_path, to_u8(p))
    return p
