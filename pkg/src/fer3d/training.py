"""Optimization: momentum SGD with weight decay, epoch loops, checkpoints.

The update is v <- momentum*v + grad + weight_decay*param followed by
param <- param - lr*v (defaults lr 0.01, momentum 0.9, weight decay 1e-4).
Decay applies to matrices and conv kernels (ndim >= 2), never to biases.
Everything is deterministic given (seed, config, data): batch shuffling and
dropout share one generator whose state rides along in checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, canonical_text, config_from_kv, config_hash, parse_kv
from .data import SequenceSample
from .errors import (CompatibilityError, ContractError, DataError, FormatError)
from .model import Model, ModelParams, build
from .tensor import Tensor, grad_map, read_tensor, write_tensor

CHECKPOINT_MAGIC = b"DIR3DCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray],
             state: OptimizerState) -> None:
    """Apply one momentum/weight-decay update in place."""
    missing = [n for n in params.names() if n not in grads]
    extra = [n for n in grads if n not in params]
    if missing or extra:
        raise ContractError(
            f"gradient keys do not match parameters; missing={missing} extra={extra}")
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ContractError(
                f"{name}: gradient shape {g.shape} != parameter shape {tensor.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
        update = g
        if state.weight_decay and tensor.data.ndim >= 2:
            update = g + state.weight_decay * tensor.data
        v = state.momentum * v + update
        state.velocity[name] = v
        tensor.data -= state.lr * v
    state.step += 1


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    return np.eye(num_classes, dtype=dtype)[labels]


def _batch_arrays(samples: list[SequenceSample], idx: np.ndarray, dtype):
    clips = np.stack([samples[i].clip for i in idx]).astype(dtype, copy=False)
    landmarks = [samples[i].landmarks for i in idx]
    labels = np.asarray([samples[i].label for i in idx])
    return clips, landmarks, labels


def train_epoch(model: Model, samples: list[SequenceSample], batch_size: int,
                state: OptimizerState, rng: np.random.Generator) -> tuple[float, float]:
    """One shuffled pass; returns (mean loss, accuracy over the pass)."""
    if not samples:
        raise DataError("train_epoch got an empty dataset")
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    cfg = model.config
    order = rng.permutation(len(samples))
    total_loss = 0.0
    correct = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        clips, landmarks, labels = _batch_arrays(samples, idx, cfg.np_dtype)
        logits = model.forward(clips, landmarks, mode="train", rng=rng)
        loss = T.softmax_cross_entropy(
            logits, _one_hot(labels, cfg.num_classes, cfg.np_dtype))
        grads = grad_map(loss, model.params.as_dict())
        sgd_step(model.params, grads, state)
        total_loss += loss.item() * len(idx)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return total_loss / len(order), correct / len(order)


def evaluate(model: Model, samples: list[SequenceSample],
             batch_size: int = 16) -> tuple[float, np.ndarray, np.ndarray]:
    """Eval-mode accuracy plus (truths, predictions) for reporting."""
    if not samples:
        raise DataError("evaluate got an empty dataset")
    truths, preds = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        clips = np.stack([s.clip for s in chunk])
        ids, _ = model.predict(clips, [s.landmarks for s in chunk])
        preds.extend(int(p) for p in ids)
        truths.extend(s.label for s in chunk)
    truths = np.asarray(truths)
    preds = np.asarray(preds)
    return float((truths == preds).mean()), truths, preds


def append_metrics(path, epoch: int, split: str, loss: float, accuracy: float) -> None:
    """Append one (epoch, split, loss, accuracy) row to the metrics CSV."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fp:
        writer = csv.writer(fp)
        if new:
            writer.writerow(["epoch", "split", "loss", "accuracy"])
        writer.writerow([epoch, split, f"{loss:.8f}", f"{accuracy:.6f}"])


@dataclass
class FitResult:
    history: list[dict]
    best_val_accuracy: float | None = None
    best_epoch: int | None = None
    stopped_epoch: int | None = None


def fit(model: Model, train_samples: list[SequenceSample], *, epochs: int,
        batch_size: int = 8, state: OptimizerState | None = None,
        rng: np.random.Generator | None = None, seed: int = 0,
        val_samples: list[SequenceSample] | None = None,
        metrics_path=None, checkpoint_path=None, best_checkpoint_path=None,
        target_train_accuracy: float | None = None,
        start_epoch: int = 0) -> FitResult:
    """Train for a fixed epoch budget with optional best-checkpoint retention.

    When ``target_train_accuracy`` is set, training stops early once
    eval-mode accuracy on the training set reaches it.
    """
    state = state if state is not None else OptimizerState()
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(seed))
    result = FitResult(history=[])
    best_acc = -1.0
    for epoch in range(start_epoch, epochs):
        loss, acc = train_epoch(model, train_samples, batch_size, state, rng)
        row = {"epoch": epoch, "train_loss": loss, "train_accuracy": acc}
        if metrics_path:
            append_metrics(metrics_path, epoch, "train", loss, acc)
        if val_samples:
            val_acc, truths, preds = evaluate(model, val_samples)
            val_loss = _eval_loss(model, val_samples)
            row["val_loss"] = val_loss
            row["val_accuracy"] = val_acc
            if metrics_path:
                append_metrics(metrics_path, epoch, "val", val_loss, val_acc)
            if val_acc > best_acc:
                best_acc = val_acc
                result.best_val_accuracy = val_acc
                result.best_epoch = epoch
                if best_checkpoint_path:
                    save_checkpoint(best_checkpoint_path, Checkpoint.capture(
                        model, state, rng, epoch=epoch))
        result.history.append(row)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, Checkpoint.capture(
                model, state, rng, epoch=epoch))
        if target_train_accuracy is not None:
            train_acc, _, _ = evaluate(model, train_samples)
            row["train_eval_accuracy"] = train_acc
            if train_acc >= target_train_accuracy:
                result.stopped_epoch = epoch
                break
    return result


def _eval_loss(model: Model, samples: list[SequenceSample],
               batch_size: int = 16) -> float:
    cfg = model.config
    total = 0.0
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            clips = np.stack([s.clip for s in chunk]).astype(cfg.np_dtype, copy=False)
            labels = np.asarray([s.label for s in chunk])
            logits = model.forward(clips, [s.landmarks for s in chunk], mode="eval")
            loss = T.softmax_cross_entropy(
                logits, _one_hot(labels, cfg.num_classes, cfg.np_dtype))
            total += loss.item() * len(chunk)
    return total / len(samples)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to resume a run bit-for-bit."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    optimizer: dict            # lr / momentum / weight_decay / step
    rng_state: dict | None
    epoch: int
    version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, model: Model, state: OptimizerState,
                rng: np.random.Generator | None, epoch: int) -> "Checkpoint":
        return cls(
            config=model.config,
            params={n: t.data.copy() for n, t in model.params.items()},
            velocity={n: v.copy() for n, v in state.velocity.items()},
            optimizer={"lr": state.lr, "momentum": state.momentum,
                       "weight_decay": state.weight_decay, "step": state.step},
            rng_state=rng.bit_generator.state if rng is not None else None,
            epoch=epoch,
        )

    def restore(self, seed=0) -> tuple[Model, OptimizerState, np.random.Generator | None]:
        model = build(self.config, seed=seed)
        expected = set(model.params.names())
        if set(self.params) != expected:
            raise FormatError("checkpoint parameter names do not match the config")
        for name, arr in self.params.items():
            if arr.shape != model.params[name].shape:
                raise FormatError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                  f"expected {model.params[name].shape}")
            model.params[name].data = arr.astype(model.config.np_dtype, copy=True)
        state = OptimizerState(
            lr=self.optimizer["lr"], momentum=self.optimizer["momentum"],
            weight_decay=self.optimizer["weight_decay"],
            step=self.optimizer["step"],
            velocity={n: v.copy() for n, v in self.velocity.items()})
        rng = None
        if self.rng_state is not None:
            rng = np.random.Generator(np.random.PCG64())
            rng.bit_generator.state = self.rng_state
        return model, state, rng


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg_text = canonical_text(ckpt.config).encode()
    header = json.dumps({
        "epoch": ckpt.epoch,
        "optimizer": ckpt.optimizer,
        "rng_state": ckpt.rng_state,
    }, sort_keys=True).encode()
    records = [(f"model.{n}", a) for n, a in ckpt.params.items()]
    records += [(f"opt.v.{n}", a) for n, a in ckpt.velocity.items()]
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", ckpt.version))
        fp.write(hashlib.sha256(cfg_text).digest())
        fp.write(struct.pack("<I", len(cfg_text)))
        fp.write(cfg_text)
        fp.write(struct.pack("<I", len(header)))
        fp.write(header)
        fp.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode()
            fp.write(struct.pack("<I", len(raw)))
            fp.write(raw)
            write_tensor(fp, arr)


def _read_exact(fp, n: int, what: str) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint file not found: {path}")
    with open(path, "rb") as fp:
        magic = _read_exact(fp, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fp, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        digest = _read_exact(fp, 32, "config hash")
        (cfg_len,) = struct.unpack("<I", _read_exact(fp, 4, "config length"))
        cfg_text = _read_exact(fp, cfg_len, "config")
        if hashlib.sha256(cfg_text).digest() != digest:
            raise FormatError("config hash mismatch: checkpoint corrupted")
        config = config_from_kv(parse_kv(cfg_text.decode()))
        (hdr_len,) = struct.unpack("<I", _read_exact(fp, 4, "header length"))
        header = json.loads(_read_exact(fp, hdr_len, "header").decode())
        (count,) = struct.unpack("<I", _read_exact(fp, 4, "record count"))
        params: dict[str, np.ndarray] = {}
        velocity: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fp, 4, "record name length"))
            name = _read_exact(fp, name_len, "record name").decode()
            arr = read_tensor(fp)
            if name.startswith("model."):
                params[name[len("model."):]] = arr
            elif name.startswith("opt.v."):
                velocity[name[len("opt.v."):]] = arr
            else:
                raise FormatError(f"unknown checkpoint record {name!r}")
    rng_state = header.get("rng_state")
    return Checkpoint(config=config, params=params, velocity=velocity,
                      optimizer=header["optimizer"], rng_state=rng_state,
                      epoch=header["epoch"], version=version)


def verify_checkpoint_compatible(ckpt: Checkpoint, config: ModelConfig) -> None:
    """Raise when a checkpoint cannot resume under the active config."""
    if config_hash(ckpt.config) != config_hash(config):
        raise CompatibilityError(
            "checkpoint config does not match the active config")
