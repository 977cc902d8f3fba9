"""Soft-Dice training: loss, Adam, the epoch loop with per-epoch accuracy
history, and bit-exact checkpointing.

The loss follows the two-channel output head: foreground probability is
the channel softmax (equivalently sigmoid of the logit difference), and
the Dice ratio is reduced jointly over the whole batch with smoothing 1.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from segforge import tensor as tz
from segforge.metrics import binarize, dsc
from segforge.tensor import ContractError, Tensor, backward, derive_seed, make_rng

__all__ = [
    "soft_dice_loss",
    "Adam",
    "EpochRecord",
    "TrainHistory",
    "train",
    "evaluate_mean_dsc",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "TrainingDiverged",
]


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or built for another model."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite."""


def soft_dice_loss(logits, target, smooth=1.0):
    """1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), batch-joint.

    ``logits`` is (N, 2, H, W); ``target`` a binary (N, H, W) array.
    The foreground probability is softmax over the two channels.
    """
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ContractError(f"expected (N, 2, H, W) logits, got {logits.shape}")
    g = np.asarray(target)
    if g.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ContractError(f"target shape {g.shape} does not match logits {logits.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ContractError("target mask must be binary")
    g = g.astype(logits.dtype)

    n, _, h, w = logits.shape
    bg = tz.reshape(tz.slice_ranges(logits, [None, (0, 1)]), (n, h, w))
    fg = tz.reshape(tz.slice_ranges(logits, [None, (1, 2)]), (n, h, w))
    p = tz.sigmoid(fg - bg)
    overlap = (p * Tensor(g)).sum()
    denom = p.sum() + float(g.sum())
    return 1.0 - (overlap * 2.0 + smooth) / (denom + smooth)


class Adam(object):
    """Bias-corrected Adam over a named parameter registry."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name!r} at step {self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (self.lr / bias1) * m / (np.sqrt(v / bias2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        out["adam.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, values):
        for name in self.params:
            self.m[name] = values[f"adam.m.{name}"].copy()
            self.v[name] = values[f"adam.v.{name}"].copy()
        self.t = int(values["adam.t"][0])


@dataclass
class EpochRecord:
    epoch: int
    train_dsc: float
    val_dsc: float
    loss: float
    seconds: float
    seed: int


class TrainHistory(list):
    """Per-epoch records; serializes to CSV (epoch,train_dsc,val_dsc,loss,seconds)."""

    def to_csv(self):
        lines = ["epoch,train_dsc,val_dsc,loss,seconds"]
        for r in self:
            lines.append(f"{r.epoch},{r.train_dsc:.6f},{r.val_dsc:.6f},{r.loss:.6f},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"


def _forward_batches(model, tiles, batch_size):
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        images = np.stack([t[0] for t in chunk])
        masks = np.stack([t[1] for t in chunk])
        yield images, masks


def evaluate_mean_dsc(model, tiles, batch_size=8):
    """Eval-mode mean per-tile Dice against ground truth."""
    model.set_mode("eval")
    scores = []
    for images, masks in _forward_batches(model, tiles, batch_size):
        logits = model(Tensor(images))
        pred = binarize(logits.data)
        for i in range(pred.shape[0]):
            scores.append(dsc(pred[i], masks[i]))
    return float(np.mean(scores))


def train(
    model,
    train_tiles,
    val_tiles,
    epochs,
    batch_size,
    seed,
    lr=1e-4,
    beta1=0.9,
    beta2=0.999,
    adam_eps=1e-8,
    checkpoint_path=None,
    log=None,
):
    """Run the epoch loop and return the per-epoch TrainHistory.

    Every epoch shuffles with seed+epoch, runs the minibatch steps, then
    records eval-mode DSC on both splits. The best-validation checkpoint
    is retained when ``checkpoint_path`` is given; a non-finite loss
    aborts after dumping the last good checkpoint.
    """
    if epochs < 0 or batch_size < 1:
        raise ContractError("epochs must be >= 0 and batch_size >= 1")
    if epochs > 0 and (not train_tiles or not val_tiles):
        raise ContractError("training needs non-empty train and validation sets")
    optimizer = Adam(model.parameters(), lr=lr, beta1=beta1, beta2=beta2, eps=adam_eps)
    history = TrainHistory()
    best_val = -1.0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.set_mode("train")
        order = make_rng(seed + epoch).permutation(len(train_tiles))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            images = np.stack([train_tiles[i][0] for i in idx])
            masks = np.stack([train_tiles[i][1] for i in idx])
            logits = model(Tensor(images))
            loss = soft_dice_loss(logits, masks)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                if checkpoint_path is not None and history:
                    save_checkpoint(checkpoint_path, model, optimizer)
                raise TrainingDiverged(f"loss became {loss_val} in epoch {epoch}")
            backward(loss)
            optimizer.step()
            model.constrain()
            optimizer.zero_grad()
            losses.append(loss_val)
        train_dsc = evaluate_mean_dsc(model, train_tiles, batch_size)
        val_dsc = evaluate_mean_dsc(model, val_tiles, batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_dsc=train_dsc,
            val_dsc=val_dsc,
            loss=float(np.mean(losses)),
            seconds=time.perf_counter() - t0,
            seed=seed,
        )
        history.append(record)
        if log is not None:
            log(
                f"epoch {epoch}/{epochs}: loss {record.loss:.4f} "
                f"train_dsc {train_dsc:.4f} val_dsc {val_dsc:.4f} ({record.seconds:.1f}s)"
            )
        if checkpoint_path is not None and val_dsc > best_val:
            best_val = val_dsc
            save_checkpoint(checkpoint_path, model, optimizer)
    return history


# -- checkpoint container -------------------------------------------------

_MAGIC = b"SGFC\x01"


def _blob_entries(model, optimizer=None):
    entries = []
    for name, p in model.parameters().items():
        entries.append((f"param.{name}", p.data))
    for name, b in model.named_buffers().items():
        entries.append((f"buffer.{name}", b))
    if optimizer is not None:
        for name, arr in optimizer.state_arrays().items():
            entries.append((name, arr))
    return entries


def save_checkpoint(path, model, optimizer=None, extra=None):
    """Little-endian container: magic, JSON header, raw named blobs."""
    entries = _blob_entries(model, optimizer)
    header = {
        "format": "segforge-checkpoint-v1",
        "spec_hash": model.spec_hash,
        "width_mult": model.width_mult,
        "hyper": model.hyper,
        "extra": extra or {},
        "blobs": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "nbytes": int(arr.nbytes)}
            for name, arr in entries
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 4 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[len(_MAGIC) : len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    offset = start + hlen
    expected = sum(b["nbytes"] for b in header["blobs"])
    if len(raw) - offset != expected:
        raise CheckpointError(
            f"{path}: payload is {len(raw) - offset} bytes, header declares {expected}"
        )
    blobs = {}
    for spec in header["blobs"]:
        n = spec["nbytes"]
        arr = np.frombuffer(raw[offset : offset + n], dtype=np.dtype(spec["dtype"]))
        blobs[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += n
    return header, blobs


def load_checkpoint(path, model, optimizer=None):
    """Restore parameters (and optimizer moments) saved for this exact build."""
    header, blobs = _read_checkpoint(path)
    if header["spec_hash"] != model.spec_hash:
        raise CheckpointError(
            "checkpoint was built for a different architecture/width "
            f"(saved {header['spec_hash'][:12]}, model {model.spec_hash[:12]})"
        )
    params = model.parameters()
    for name, p in params.items():
        key = f"param.{name}"
        if key not in blobs:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        p.data = blobs[key].astype(p.data.dtype, copy=True)
    buffer_values = {
        name[len("buffer.") :]: arr for name, arr in blobs.items() if name.startswith("buffer.")
    }
    _load_buffers(model, buffer_values)
    if optimizer is not None:
        optimizer.load_state_arrays(blobs)
    return header


def _load_buffers(layer, values, prefix=""):
    from segforge.layers import BatchNorm2d

    if isinstance(layer, BatchNorm2d):
        layer.load_buffers(values, prefix)
        return
    for name, child in layer._children():
        _load_buffers(child, values, f"{prefix}{name}.")
