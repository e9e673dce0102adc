"""Loss, optimizer, augmentation and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from . import tensor as ops
from .data import ClipBatch, ClipDataset, DatasetManifest, resize_bilinear_array, resize_nearest
from .metrics import MetricReport, sweep_report
from .model import FUnet
from .tensor import Tape, Tensor


class TrainingDiverged(ArithmeticError):
    """Loss became non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_clips: int = 2
    seed: int = 0
    loss_mix: float = 0.5  # weight of the dice term; 1 - mix goes to BCE
    hflip_prob: float = 0.5
    crop_scale_min: float = 0.75
    augment: bool = True
    grad_clip: float = 5.0  # global-norm ceiling; 0 disables
    early_stop: bool = False
    early_stop_patience: int = 10

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ValueError(f"loss_mix must lie in [0,1], got {self.loss_mix}")
        if not 0.0 < self.crop_scale_min <= 1.0:
            raise ValueError(f"crop_scale_min must lie in (0,1], got {self.crop_scale_min}")
        if self.epochs < 1 or self.batch_clips < 1:
            raise ValueError("epochs and batch_clips must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def segmentation_loss(logits: Tensor, masks: Tensor, mix: float = 0.5) -> Tensor:
    """mix * soft-dice + (1-mix) * BCE-with-logits, averaged over B*T frames.

    Soft dice per frame uses sigmoid probabilities with smoothing constant 1
    in numerator and denominator."""
    if logits.shape != masks.shape:
        raise ValueError(f"logits shape {logits.shape} != masks shape {masks.shape}")
    from .tensor import checked_mode

    if checked_mode():
        vals = np.unique(masks.data)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError("masks must be exactly binary")
    b, t = logits.shape[0], logits.shape[1]
    npix = int(np.prod(logits.shape[2:]))
    z = logits.reshape(b * t, npix)
    y = masks.reshape(b * t, npix)
    bce = ops.bce_with_logits(z, y).mean()
    p = ops.sigmoid(z)
    inter = (p * y).sum(axis=1)
    denom = p.sum(axis=1) + y.sum(axis=1)
    dice = (2.0 * inter + 1.0) / (denom + 1.0)
    dice_loss = 1.0 - dice.mean()
    return mix * dice_loss + (1.0 - mix) * bce


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with decoupled weight decay (p -= lr*wd*p before the moment
    update) and bias correction; eps is added outside the square root."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if cfg.weight_decay:
                p.data = p.data - cfg.lr * cfg.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale every gradient so the global L2 norm stays within max_norm;
    returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.einsum("i,i->", p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# augmentation


def augment_clip(clip: ClipBatch, rng: np.random.Generator, hflip_prob=0.5, crop_scale_min=0.75) -> ClipBatch:
    """One flip decision and one crop window per clip, shared by all T
    frames (temporal consistency). Crops are resized back to the input
    size, bilinear for frames and nearest for masks."""
    frames = clip.frames
    masks = clip.masks
    b, t, c, h, w = frames.shape
    out_frames = frames.copy()
    out_masks = masks.copy() if masks is not None else None
    for bi in range(b):
        flip = rng.random() < hflip_prob
        scale = rng.uniform(crop_scale_min, 1.0)
        ch = max(1, round(scale * h))
        cw = max(1, round(scale * w))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        f = out_frames[bi]
        if flip:
            f = f[..., ::-1]
        if (ch, cw) != (h, w):
            f = f[..., top : top + ch, left : left + cw]
            f = np.clip(resize_bilinear_array(np.ascontiguousarray(f, dtype=np.float32), h, w), 0.0, 1.0)
        out_frames[bi] = f
        if out_masks is not None:
            m = out_masks[bi]
            if flip:
                m = m[..., ::-1]
            if (ch, cw) != (h, w):
                m = resize_nearest(np.ascontiguousarray(m)[..., top : top + ch, left : left + cw], h, w)
            out_masks[bi] = m
    return ClipBatch(out_frames, out_masks)


# ---------------------------------------------------------------------------
# evaluation and the epoch loop


def predict_probabilities(model: FUnet, dataset: ClipDataset) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Run inference over a split's eval windows; later windows overwrite
    overlapping frames. Returns aligned (predictions, ground truths)."""
    per_frame: dict[tuple[str, int], np.ndarray] = {}
    for idx in range(len(dataset)):
        seq_id, start = dataset.windows[idx]
        clip = dataset.clip(idx)
        logits = model(clip.frames_tensor())
        probs = ops.sigmoid(logits).data[0, :, 0]
        for i in range(dataset.t):
            per_frame[(seq_id, start + i)] = probs[i]
    keys = dataset.frame_keys()
    preds = [per_frame[k] for k in keys]
    gts = [dataset.mask_for(*k).astype(np.float64) for k in keys]
    return preds, gts


def evaluate(model: FUnet, dataset: ClipDataset, **report_kwargs) -> MetricReport:
    preds, gts = predict_probabilities(model, dataset)
    return sweep_report(preds, gts, **report_kwargs)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_max_dice: float


@dataclass
class TrainResult:
    trace: list[EpochRecord]
    best_epoch: int
    best_val_max_dice: float
    best_state: dict[str, np.ndarray]


def train(
    model: FUnet,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Shuffled-epoch training with per-epoch validation.

    Each epoch shuffles the dense train windows, augments per clip, and
    steps Adam; validation maxDice is computed on the full val split. The
    best-validation parameter snapshot is restored into the model before
    returning. Fully deterministic for a given config seed."""
    cfg.validate()
    mcfg = model.config
    train_ds = ClipDataset(manifest, "train", mcfg.t_frames, (mcfg.input_h, mcfg.input_w))
    val_ds = ClipDataset(manifest, "val", mcfg.t_frames, (mcfg.input_h, mcfg.input_w))
    if len(train_ds) == 0:
        raise ValueError("training split has no clips")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg)

    trace: list[EpochRecord] = []
    best = TrainResult(trace=trace, best_epoch=-1, best_val_max_dice=-1.0, best_state=model.state_dict())
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_ds))
        losses = []
        for chunk_start in range(0, len(order), cfg.batch_clips):
            chunk = order[chunk_start : chunk_start + cfg.batch_clips]
            clips = [train_ds.clip(int(i)) for i in chunk]
            if cfg.augment:
                clips = [augment_clip(cl, rng, cfg.hflip_prob, cfg.crop_scale_min) for cl in clips]
            frames = np.concatenate([cl.frames for cl in clips])
            masks = np.concatenate([cl.masks for cl in clips])
            batch = ClipBatch(frames, masks)
            with Tape() as tape:
                logits = model(batch.frames_tensor())
                loss = segmentation_loss(logits, batch.masks_tensor(), cfg.loss_mix)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {chunk_start // cfg.batch_clips}")
            opt.zero_grad()
            tape.backward(loss)
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            losses.append(loss_val)

        if len(val_ds) > 0:
            val_dice = evaluate(model, val_ds).max_dice
        else:
            val_dice = float("nan")
        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)), val_max_dice=val_dice)
        trace.append(record)
        if on_epoch:
            on_epoch(record)
        if not math.isnan(val_dice) and val_dice > best.best_val_max_dice:
            best.best_val_max_dice = val_dice
            best.best_epoch = epoch
            best.best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if cfg.early_stop and stale > cfg.early_stop_patience:
                break
    if best.best_epoch >= 0:
        model.load_state_dict(best.best_state)
    else:
        best.best_state = model.state_dict()
    return best
