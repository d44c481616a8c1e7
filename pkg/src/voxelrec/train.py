"""Twin-objective training: MSE losses, Adam, decoder switching and
suppression of the image-decoder gradient into the shape code."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model
from .tensor import Tensor, as_tensor, backward, mask_gradient, reduce_mean, square, sub

log = logging.getLogger(__name__)

MODES = ("volume_only", "twin")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 10
    switch_period: int = 3
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "volume_only"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")
        if self.switch_period < 1:
            raise ValueError("switch_period must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    t: int = 0


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: prediction {pred.shape} and target {target.shape} differ")
    return reduce_mean(square(sub(pred, target)))


def adam_step(params: dict[str, Tensor], s: AdamState, cfg: TrainConfig | None = None, *,
              lr=None, beta1=None, beta2=None, eps=None) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    Each parameter keeps its own step count so that parameters updated
    only on some batches (e.g. one decoder under switching) get the
    correct bias correction.
    """
    cfg = cfg or TrainConfig()
    lr = cfg.lr if lr is None else lr
    b1 = cfg.beta1 if beta1 is None else beta1
    b2 = cfg.beta2 if beta2 is None else beta2
    eps = cfg.eps if eps is None else eps
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    s.t += 1
    for k, p in params.items():
        g = p.grad
        if k not in s.m:
            s.m[k] = np.zeros_like(p.data)
            s.v[k] = np.zeros_like(p.data)
            s.steps[k] = 0
        s.steps[k] += 1
        t = s.steps[k]
        m, v = s.m[k], s.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)


def _to_batch(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def volume_loss(model: Model, images, volumes) -> tuple[Tensor, Tensor]:
    """Forward encode -> shape slots -> volume decoder; returns (loss, code)."""
    code = model.encode(_to_batch(images))
    shape_code, _ = model.split_code(code)
    pred = model.decode_volume(shape_code)
    return mse_loss(pred, np.asarray(volumes, dtype=np.float32)), code


def image_loss(model: Model, images, suppress: bool = True) -> tuple[Tensor, Tensor]:
    """Forward encode -> full code -> image decoder; returns (loss, code).

    With ``suppress`` the gradient reaching the shape slots of ``code``
    from this loss is zeroed at the code boundary.
    """
    x = _to_batch(images)
    code = model.encode(x)
    routed = code
    if suppress:
        cfg = model.config
        mask = np.concatenate([np.zeros(cfg.shape_len), np.ones(cfg.transform_len)])
        routed = mask_gradient(code, mask)
    zs, zt = model.split_code(routed)
    recon = model.decode_image(zs, zt)
    return mse_loss(recon, x.data), code


def _step(model: Model, loss: Tensor, prefixes, state: AdamState, cfg: TrainConfig) -> float:
    model.zero_grad()
    backward(loss)
    params = {k: v for k, v in model.parameters().items() if k.startswith(prefixes)}
    adam_step(params, state, cfg)
    return loss.item()


def volume_step(model: Model, batch, state: AdamState, cfg: TrainConfig) -> float:
    images, volumes = batch[0], batch[1]
    loss, _ = volume_loss(model, images, volumes)
    return _step(model, loss, ("encoder.", "volume_decoder."), state, cfg)


def image_step(model: Model, batch, state: AdamState, cfg: TrainConfig) -> float:
    loss, _ = image_loss(model, batch[0], suppress=True)
    return _step(model, loss, ("encoder.", "image_decoder."), state, cfg)


def schedule(n_batches: int, mode: str, switch_period: int = 3) -> list[str]:
    """Decoder used for each batch: ``"volume"`` or ``"image"``."""
    if mode == "volume_only":
        return ["volume"] * n_batches
    return ["volume" if (i // switch_period) % 2 == 0 else "image" for i in range(n_batches)]


@dataclass
class TrainLog:
    records: list[tuple[int, str, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def losses(self, mode: str | None = None) -> np.ndarray:
        return np.array([r[2] for r in self.records if mode is None or r[1] == mode])


def train(model: Model, dataset, cfg: TrainConfig, log_path=None, progress: bool = False) -> tuple[Model, TrainLog]:
    """Show each example once per epoch in seeded random order.

    ``dataset`` needs ``images`` (N x C x S x S) and ``volumes`` arrays.
    The trailing partial batch is dropped. Returns the model (trained in
    place) and the per-batch loss log.
    """
    n = len(dataset.images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if n < cfg.batch_size:
        raise ValueError(f"dataset has {n} examples, fewer than one batch of {cfg.batch_size}")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    trainlog = TrainLog()
    model.set_training(True)
    handle = writer = None
    if log_path is not None:
        handle = open(Path(log_path), "w", newline="\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "mode", "loss"])
    try:
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            n_batches = n // cfg.batch_size
            for i, mode in enumerate(schedule(n_batches, cfg.mode, cfg.switch_period)):
                idx = np.sort(order[i * cfg.batch_size:(i + 1) * cfg.batch_size])
                images = dataset.images[idx].astype(np.float32)
                if mode == "volume":
                    loss = volume_step(model, (images, dataset.volumes[idx].astype(np.float32)), state, cfg)
                else:
                    loss = image_step(model, (images,), state, cfg)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                trainlog.records.append((step, mode, loss))
                if writer is not None:
                    writer.writerow([step, mode, f"{loss:.8g}"])
                    handle.flush()
                if progress and step % 20 == 0:
                    log.info("step %d %s loss %.5f", step, mode, loss)
                step += 1
    finally:
        if handle is not None:
            handle.close()
    model.set_training(False)
    return model, trainlog
