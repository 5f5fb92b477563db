"""L1-loss SGD training on patch pairs and patch-averaged image prediction."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint
from .data import DataError, ImageRecord, extract_patches, load_image, load_pair
from .model import ModelConfig, ModelParams, forward, init_model, predict
from .tensor import Tensor, backward, l1_loss, zero_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-6
    epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MosScaler:
    """Affine map of the training MOS range onto [0, 1] and back."""

    lo: float = 0.0
    hi: float = 1.0

    @classmethod
    def fit(cls, mos: Sequence[float]) -> "MosScaler":
        lo, hi = float(min(mos)), float(max(mos))
        if hi == lo:
            hi = lo + 1.0
        return cls(lo, hi)

    def forward(self, mos):
        return (np.asarray(mos, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def inverse(self, score):
        return np.asarray(score, dtype=np.float64) * (self.hi - self.lo) + self.lo


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None

    def rows(self) -> list:
        return [[i + 1, repr(loss), f"{sec:.3f}"] for i, (loss, sec) in enumerate(zip(self.losses, self.seconds))]


def sgd_step(params: dict, velocity: dict, cfg: TrainConfig) -> None:
    """Momentum SGD with coupled L2 decay, in place.

    ``g' = g + wd * w``; ``v = momentum * v + g'``; ``w -= lr * v``.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        v = velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        velocity[name] = v
        p.data = (p.data - cfg.lr * v).astype(p.dtype)


def _stack(patches: Sequence, dtype) -> tuple:
    hr = np.stack([p.hr_patch for p in patches]).astype(dtype)
    sr = np.stack([p.sr_patch for p in patches]).astype(dtype)
    return hr, sr


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    """Visiting order for one epoch: a pure function of (seed, epoch)."""
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    model: ModelParams,
    train_set: Sequence,
    cfg: TrainConfig,
    scaler: Optional[MosScaler] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> tuple:
    """Fit ``model`` in place on patch pairs; returns ``(model, TrainLog)``.

    MOS targets are rescaled to [0, 1] by ``scaler`` (fitted on the training
    set when not given); the scaler is stored as ``model.scaler``. Patches are
    put in a canonical order first, so the run depends only on the set of
    patches and ``cfg``.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    patches = sorted(train_set, key=lambda p: (p.image_index, tuple(p.offset)))
    scaler = scaler or MosScaler.fit([p.mos for p in patches])
    model.scaler = scaler
    dtype = model.fc1.weight.dtype
    hr_all, sr_all = _stack(patches, dtype)
    targets = scaler.forward([p.mos for p in patches]).astype(dtype)
    params = model.named_parameters()
    velocity: dict = {}
    tlog = TrainLog()
    n = len(patches)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = epoch_order(n, cfg.seed, epoch, cfg.shuffle)
        total = 0.0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            zero_grad(params.values())
            pred = forward(hr_all[idx], sr_all[idx], model, training=True)
            loss = l1_loss(pred, Tensor(targets[idx]))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}")
            backward(loss)
            sgd_step(params, velocity, cfg)
            total += value * len(idx)
        tlog.losses.append(total / n)
        tlog.seconds.append(time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(epoch + 1, tlog.losses[-1])
    return model, tlog


def predict_patches(model: ModelParams, patches: Sequence, batch_size: int = 64) -> np.ndarray:
    """Raw (normalised-scale) eval-mode scores for each patch pair."""
    dtype = model.fc1.weight.dtype
    out = []
    for b0 in range(0, len(patches), batch_size):
        hr, sr = _stack(patches[b0 : b0 + batch_size], dtype)
        out.append(predict(hr, sr, model))
    return np.concatenate(out) if out else np.zeros(0)


def predict_images(
    model: ModelParams,
    records: Sequence[ImageRecord],
    size: int = 32,
    stride: int = 16,
    loader: Callable = load_image,
    indices: Optional[Sequence[int]] = None,
    batch_size: int = 64,
) -> list:
    """``(image_index, score)`` per record: the mean patch score mapped back to MOS scale.

    Images that fail to load are logged and reported with a NaN score.
    """
    scaler = getattr(model, "scaler", None) or MosScaler()
    indices = list(range(len(records))) if indices is None else list(indices)
    results = []
    for idx, rec in zip(indices, records):
        try:
            hr, sr = load_pair(rec, loader)
            patches = extract_patches(hr, sr, size, stride, mos=rec.mos, image_index=idx)
        except DataError as exc:
            log.warning("skipping image %d: %s", idx, exc)
            results.append((idx, math.nan))
            continue
        raw = predict_patches(model, patches, batch_size)
        results.append((idx, float(scaler.inverse(raw.mean()))))
    return results


# ---------------------------------------------------------------------------
# checkpoint + JSON sidecar

SIDECAR_FORMAT = 1


def sidecar_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".json")


def save_model(checkpoint_path, model: ModelParams, train_cfg: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    """Write the BIAT weights file and its sidecar (model config, MOS scaler, train config)."""
    checkpoint.save(checkpoint_path, model.state_dict())
    scaler = model.scaler or MosScaler()
    meta = {
        "format": SIDECAR_FORMAT,
        "mode": model.config.mode,
        "model": model.config.to_dict(),
        "mos_scaler": {"lo": scaler.lo, "hi": scaler.hi},
        "train": train_cfg.to_dict() if train_cfg is not None else None,
    }
    meta.update(extra or {})
    sidecar_path(checkpoint_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(checkpoint_path) -> tuple:
    """Rebuild a model from a checkpoint and its sidecar; returns ``(model, sidecar dict)``.

    Raises :class:`checkpoint.CheckpointError` when either file is unreadable or
    the weights do not fit the recorded model configuration.
    """
    arrays = checkpoint.load(checkpoint_path)
    side = sidecar_path(checkpoint_path)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
        cfg = ModelConfig.from_dict(meta["model"])
        scaler = MosScaler(**meta["mos_scaler"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise checkpoint.CheckpointError(f"bad checkpoint sidecar {side}: {exc}") from exc
    model = init_model(cfg, seed=0)
    try:
        model.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"checkpoint does not match its model config: {exc}") from exc
    model.scaler = scaler
    return model, meta
