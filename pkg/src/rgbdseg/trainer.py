"""SGD-with-momentum training loop, data preparation, evaluation, checkpoints.

The update folds weight decay into the gradient before the velocity step
(the convention of the framework the original training ran on):

    g' = g + weight_decay * w
    v  = momentum * v - lr * g'
    w  = w + v

with the learning rate chosen per parameter group ("pretrained_analog" = RGB
conv stack, "new" = everything else). Training shuffles sample order with a
seeded generator, runs batch-size-1 steps, and is bit-reproducible at 64-bit.

Checkpoint file layout (all integers little-endian): magic "LSCF", u32
version, u32 epoch, u32 config length + config text, then two sections
(parameters, optimizer state), each a u32 record count followed by records of
u32 name length, name, u32 rank, u32 dims, raw float64 values.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tape
from .dataset import crop as crop_sample
from .hha import encode_hha
from .metrics import ConfusionMatrix, resize_labels_nearest

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


class CheckpointError(ValueError):
    """Unreadable, corrupt, or architecturally incompatible checkpoint."""


@dataclass
class SgdConfig:
    lr_new: float = 1e-2
    lr_pretrained_analog: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0
    lr_schedule: tuple = ("constant",)  # or ("step", gamma, every_epochs)
    clip_norm: float = 0.0              # 0 disables; extension, not paper behavior

    def validate(self):
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.lr_new < 0 or self.lr_pretrained_analog < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be >= 0")
        if self.batch_size != 1:
            raise ValueError("batch size is fixed at 1")
        kind = self.lr_schedule[0]
        if kind not in ("constant", "step"):
            raise ValueError(f"unknown lr schedule {kind!r}")
        if kind == "step" and (len(self.lr_schedule) != 3 or self.lr_schedule[2] < 1):
            raise ValueError("step schedule needs (gamma, every_epochs)")

    def lr_scale(self, epoch):
        if self.lr_schedule[0] == "step":
            gamma, every = self.lr_schedule[1], self.lr_schedule[2]
            return float(gamma) ** (epoch // int(every))
        return 1.0


@dataclass
class TrainState:
    velocities: dict
    epoch: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model):
        return cls({name: np.zeros_like(p.data)
                    for name, p in model.parameters().items()})


def sgd_step(state, model, cfg, lr_scale=1.0):
    """One momentum-SGD update from the gradients sitting on the model."""
    grads = {}
    for name, p in model.parameters().items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name}")
        grads[name] = p.grad

    if cfg.clip_norm > 0:
        total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if total > cfg.clip_norm:
            factor = cfg.clip_norm / total
            grads = {k: g * factor for k, g in grads.items()}

    groups = model.param_groups()
    for group_name, params in groups.items():
        lr = (cfg.lr_pretrained_analog if group_name == "pretrained_analog"
              else cfg.lr_new) * lr_scale
        for name, p in params.items():
            g = grads[name] + cfg.weight_decay * p.data
            v = state.velocities[name]
            v *= cfg.momentum
            v -= lr * g
            p.data += v


# ---------------------------------------------------------------------------
# data preparation (HHA encoding is the expensive part; do it once per sample)

def prepare_sample(sample, crop_size, policy="center", seed=0, grid=None):
    """Crop, encode HHA, and downsample labels to the model grid."""
    if sample.height != crop_size or sample.width != crop_size:
        sample = crop_sample(sample, crop_size, policy, seed)
    hha_img = encode_hha(sample.depth)
    item = {
        "id": sample.id,
        "rgb": sample.rgb,
        "hha": hha_img.to_unit_range(),
        "labels": sample.labels,
    }
    if grid is not None:
        item["labels_grid"] = resize_labels_nearest(sample.labels, grid, grid)
    return item


def prepare_dataset(samples, crop_size, policy="center", seed=0, grid=None):
    return [prepare_sample(s, crop_size, policy, seed + i, grid)
            for i, s in enumerate(samples)]


def train(model, items, cfg, on_epoch=None):
    """Epoch loop over prepared items; returns the final TrainState.

    ``on_epoch(epoch, mean_loss, state)`` runs after each epoch (checkpoint
    cadence lives in the caller). A non-finite loss aborts with NumericError;
    whatever checkpoints the caller wrote stay on disk.
    """
    cfg.validate()
    if not items:
        raise ValueError("training set is empty")
    state = TrainState.for_model(model)
    order_rng = np.random.Generator(np.random.PCG64(cfg.seed))
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(items))
        scale = cfg.lr_scale(epoch)
        total = 0.0
        for idx in order:
            item = items[idx]
            rgb = ad.tensor(item["rgb"])
            hha = ad.tensor(item["hha"])
            model.zero_grad()
            with Tape() as tape:
                logits = model.forward(rgb, hha)
                loss = nnops.softmax_cross_entropy(logits, item["labels_grid"])
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss on sample {item['id']} in epoch {epoch}")
            tape.backward(loss)
            sgd_step(state, model, cfg, scale)
            total += loss_val
        mean_loss = total / len(items)
        state.epoch = epoch + 1
        state.loss_history.append(mean_loss)
        log.info("epoch %d: mean loss %.6f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, state)
    return state


def evaluate(model, items, num_classes, oracle=False):
    """Confusion matrix at label resolution using upsampled grid predictions."""
    cm = ConfusionMatrix(num_classes)
    for item in items:
        truth = item["labels"]
        if oracle:
            cm.accumulate(truth, truth)
            continue
        logits = model.forward(ad.tensor(item["rgb"]), ad.tensor(item["hha"]))
        _, upsampled = model.predict_labels(logits, *truth.shape)
        cm.accumulate(upsampled, truth)
    return cm


def grid_accuracy(model, items):
    """Pixel accuracy against the grid-resolution training targets."""
    correct = total = 0
    for item in items:
        logits = model.forward(ad.tensor(item["rgb"]), ad.tensor(item["hha"]))
        grid_labels, _ = model.predict_labels(logits)
        t = item["labels_grid"]
        valid = t != 255
        correct += int((grid_labels[valid] == t[valid]).sum())
        total += int(valid.sum())
    return correct / total if total else float("nan")


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LSCF"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    epoch: int
    config_text: str
    params: dict      # name -> float64 array
    opt_state: dict   # name -> float64 array

    @classmethod
    def of(cls, model, state, config_text=""):
        return cls(VERSION, state.epoch if state else 0, config_text,
                   {k: np.array(v.data, dtype=np.float64)
                    for k, v in model.parameters().items()},
                   {f"velocity/{k}": np.array(v, dtype=np.float64)
                    for k, v in (state.velocities if state else {}).items()})


def _write_records(f, records):
    f.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def save_checkpoint(path, ckpt):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", ckpt.version, ckpt.epoch))
        cfg = ckpt.config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        _write_records(f, ckpt.params)
        _write_records(f, ckpt.opt_state)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _read_records(r):
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise CheckpointError(f"{r.path}: implausible tensor rank {rank}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        out[name] = np.array(arr)
    return out


def load_checkpoint(path):
    from pathlib import Path
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
    version, epoch = r.u32(), r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    config_text = r.take(r.u32()).decode("utf-8")
    params = _read_records(r)
    opt_state = _read_records(r)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Checkpoint(version, epoch, config_text, params, opt_state)


def apply_checkpoint(ckpt, model):
    """Load parameters into a model, rejecting any shape/name disagreement."""
    current = model.parameters()
    diffs = []
    for name in sorted(set(current) | set(ckpt.params)):
        if name not in ckpt.params:
            diffs.append(f"  {name}: missing from checkpoint (model wants {current[name].shape})")
        elif name not in current:
            diffs.append(f"  {name}: not in model (checkpoint has {ckpt.params[name].shape})")
        elif tuple(ckpt.params[name].shape) != tuple(current[name].shape):
            diffs.append(f"  {name}: checkpoint {ckpt.params[name].shape}"
                         f" vs model {current[name].shape}")
    if diffs:
        raise CheckpointError("architecture mismatch:\n" + "\n".join(diffs))
    for name, arr in ckpt.params.items():
        current[name].data = arr.astype(current[name].data.dtype)
