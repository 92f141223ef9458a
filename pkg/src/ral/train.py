"""
Training harness: Adam with decoupled weight decay, per-epoch cosine learning
rate, epoch loop with NaN diagnosis, evaluation, and resumable fitting.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .data import ClipDataset
from .errors import ContractError, NumericError
from .model import RalModel, load_checkpoint, read_checkpoint, save_checkpoint
from .nn import BatchNorm, LayerNorm
from .tensor import backward, detect_anomaly, no_grad


@dataclass
class AdamConfig:
    lr: float = 3e-4
    min_lr: float = 1e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    temporal_crop_min: int = 0
    flip_augment: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "AdamConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


def cosine_lr(epoch: int, epochs: int, base: float = 3e-4, floor: float = 1e-6) -> float:
    """Cosine decay from ``base`` at epoch 0 to ``floor`` at epoch ``epochs - 1``."""
    if epochs <= 1:
        return base
    t = min(max(epoch, 0), epochs - 1) / (epochs - 1)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def decay_mask(model) -> dict[str, bool]:
    """Weight decay applies to every parameter except norm gains/biases and biases."""
    norm_ids = set()
    for m in model.modules():
        if isinstance(m, (BatchNorm, LayerNorm)):
            norm_ids.update(id(p) for p in m.parameters())
    return {name: (id(p) not in norm_ids and not name.endswith(".bias"))
            for name, p in model.named_parameters()}


class AdamW:
    def __init__(self, model, config: AdamConfig):
        self.model = model
        self.config = config
        self.params = dict(model.named_parameters())
        self.decay = decay_mask(model)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.lr = config.lr

    def step(self) -> None:
        c = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - c.beta1 ** t
        bc2 = 1 - c.beta2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if self.decay[name]:
                p.data -= (self.lr * c.weight_decay) * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        state = {"step": np.array(self.step_count)}
        state.update({f"m/{k}": v for k, v in self.m.items()})
        state.update({f"v/{k}": v for k, v in self.v.items()})
        return state

    def load_state_dict(self, state) -> None:
        self.step_count = int(state["step"])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(state[f"v/{k}"], dtype=self.params[k].dtype)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    lr: float
    val_acc: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _diagnose_nan(model, xb, yb, rng) -> str:
    """Rerun a batch with finiteness checks on and report the first failing op."""
    try:
        with detect_anomaly(), no_grad():
            logits = model(xb, rng=rng)
            ops.cross_entropy_logits(logits, yb)
    except NumericError as err:
        return err.op or "unknown"
    return "loss"


def train_epoch(model: RalModel, dataset: ClipDataset, optim: AdamW, epoch: int,
                seed: int = 0) -> EpochStats:
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    cfg = optim.config
    optim.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.min_lr)
    rng = np.random.default_rng([seed, epoch])
    drop_rng = np.random.default_rng([seed, epoch, 1])
    model.train()
    total_loss = 0.0
    correct = 0
    for xb, yb in dataset.batches(cfg.batch_size, rng):
        if cfg.temporal_crop_min and cfg.temporal_crop_min < xb.shape[2]:
            length = int(rng.integers(cfg.temporal_crop_min, xb.shape[2] + 1))
            start = int(rng.integers(0, xb.shape[2] - length + 1))
            xb = xb[:, :, start:start + length]
        if cfg.flip_augment:
            flip = rng.random(len(yb)) < 0.5
            xb = np.where(flip[:, None, None, None, None], xb[..., ::-1], xb)
        state = drop_rng.bit_generator.state
        logits = model(xb, rng=drop_rng)
        loss = ops.cross_entropy_logits(logits, yb)
        if not np.isfinite(loss.item()):
            replay = np.random.default_rng()
            replay.bit_generator.state = state
            op = _diagnose_nan(model, xb, yb, replay)
            raise NumericError(f"non-finite loss at epoch {epoch}; first non-finite op: {op}", op=op)
        optim.zero_grad()
        backward(loss)
        optim.step()
        total_loss += loss.item() * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    n = len(dataset)
    return EpochStats(epoch=epoch, loss=total_loss / n, train_acc=correct / n, lr=optim.lr)


def predict(model: RalModel, dataset: ClipDataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for xb, _ in dataset.batches(batch_size):
            out.append(model(xb).data)
    model.train()
    return np.concatenate(out, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("cannot score an empty dataset")
    return float((np.asarray(logits).argmax(axis=1) == labels).mean())


def evaluate(model: RalModel, dataset: ClipDataset, batch_size: int = 64) -> float:
    if len(dataset) == 0:
        raise ContractError("evaluation dataset is empty")
    return accuracy(predict(model, dataset, batch_size), dataset.labels)


# -- resumable fitting -------------------------------------------------------------

def _save_state(out_dir: Path, model, optim: AdamW, epoch: int, seed: int) -> None:
    save_checkpoint(model, out_dir / "checkpoint", extra={"epoch": epoch, "seed": seed})
    np.savez(out_dir / "optimizer.npz", **optim.state_dict())


def fit(model: RalModel, train: ClipDataset, val: Optional[ClipDataset], config: AdamConfig,
        seed: int = 0, out_dir=None, resume: bool = False,
        on_epoch: Optional[Callable[[EpochStats], None]] = None,
        stop_after: Optional[int] = None) -> tuple[RalModel, list[EpochStats]]:
    """Train for ``config.epochs`` epochs, optionally persisting after every epoch.

    With ``out_dir`` set, ``metrics.jsonl`` gains one line per epoch and
    ``checkpoint.{json,bin}`` + ``optimizer.npz`` hold the latest state; with
    ``resume`` the run continues from that state. ``stop_after`` ends the run
    early (after that many epochs in total), as an interrupted run would.
    """
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    optim = AdamW(model, config)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "checkpoint.json").exists():
            manifest, _ = read_checkpoint(out / "checkpoint")
            model = load_checkpoint(out / "checkpoint")
            optim = AdamW(model, config)
            optim.load_state_dict(dict(np.load(out / "optimizer.npz")))
            start = manifest["extra"]["epoch"] + 1
    history = []
    metrics = out / "metrics.jsonl" if out is not None else None
    if metrics is not None and start == 0:
        metrics.write_text("")
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start, end):
        stats = train_epoch(model, train, optim, epoch, seed)
        if val is not None and len(val):
            stats.val_acc = evaluate(model, val)
        history.append(stats)
        if out is not None:
            with metrics.open("a") as fh:
                fh.write(json.dumps(stats.to_dict()) + "\n")
            _save_state(out, model, optim, epoch, seed)
        if on_epoch is not None:
            on_epoch(stats)
    return model, history
