"""Noise-prediction training loop.

Each step draws a batch of clean images, a uniform timestep per image, noises
them with the collapsed forward kernel and regresses the predicted noise onto
the realized noise (pixel-mean squared error).

Determinism: the train/val split and the fixed validation tuples derive from
the config seed; every epoch draws from its own (seed, epoch)-derived stream,
so a run interrupted at epoch k and resumed from a checkpoint follows exactly
the same trajectory as an uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, simple_loss
from .nn.adam import Adam
from .nn.unet import TinyUNet
from .seeding import derive_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "lr", "beta1", "beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class LossCurve:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])


def _check_dataset(dataset: np.ndarray) -> np.ndarray:
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty stack of equal-shaped images")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("clean images must lie in [0, 1]")
    return data


def split_dataset(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/val index split for a dataset of n images."""
    perm = derive_rng(cfg.seed, "split").permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        raise ValueError(f"dataset of {n} images too small for validation split")
    return perm[n_val:], perm[:n_val]


def make_val_tuples(data: np.ndarray, val_idx: np.ndarray, schedule: NoiseSchedule,
                    cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed (x_t, t, eps) triples so validation loss is comparable across epochs."""
    rng = derive_rng(cfg.seed, "val")
    x0 = data[val_idx]
    t = rng.integers(1, schedule.t_max + 1, size=len(val_idx))
    x_t, eps = schedule.forward_to(x0, t, rng)
    return x_t, t, eps


def validation_loss(denoise_forward, x_t, t, eps, batch_size=64) -> float:
    losses = []
    for i in range(0, len(x_t), batch_size):
        eps_hat = denoise_forward(x_t[i:i + batch_size], t[i:i + batch_size])
        d = (eps_hat.astype(np.float64) - eps[i:i + batch_size]) ** 2
        losses.extend(d.mean(axis=(1, 2)))
    return float(np.mean(losses))


def zero_predictor_val_loss(eps: np.ndarray) -> float:
    """Validation loss of the constant-zero predictor (expected ~1.0)."""
    return float(np.mean(np.asarray(eps, dtype=np.float64) ** 2))


def train(net: TinyUNet, dataset, schedule: NoiseSchedule, cfg: TrainConfig,
          opt_state: dict[str, np.ndarray] | None = None, start_epoch: int = 0,
          ) -> tuple[LossCurve, dict[str, np.ndarray]]:
    """Train in place; returns the loss curve and final optimizer state.

    Resuming: pass the checkpointed optimizer state and the epoch to resume
    from; the continued trajectory is identical to an uninterrupted run.
    """
    cfg.validate()
    data = _check_dataset(dataset)
    train_idx, val_idx = split_dataset(len(data), cfg)
    x_val, t_val, eps_val = make_val_tuples(data, val_idx, schedule, cfg)

    opt = Adam(net.named_params(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
               eps=cfg.adam_eps)
    if opt_state:
        opt.load_state(opt_state)

    if cfg.epochs > start_epoch and len(train_idx) < cfg.batch_size:
        raise ValueError(
            f"train split of {len(train_idx)} images smaller than batch size "
            f"{cfg.batch_size}")

    curve = LossCurve()
    for epoch in range(start_epoch, cfg.epochs):
        rng = derive_rng(cfg.seed, "epoch", epoch)
        order = rng.permutation(train_idx)
        batch_losses = []
        for i in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            x0 = data[order[i:i + cfg.batch_size]]
            t = rng.integers(1, schedule.t_max + 1, size=len(x0))
            x_t, eps = schedule.forward_to(x0, t, rng)
            eps_hat = net.forward(x_t, t)
            batch_losses.append(simple_loss(eps, eps_hat))
            net.zero_grads()
            net.backward((2.0 / eps.size) * (eps_hat - eps))
            opt.step(net.named_grads())
        val = validation_loss(lambda xb, tb: net.forward(xb, tb), x_val, t_val, eps_val)
        rec = EpochRecord(epoch=epoch, train_loss=float(np.mean(batch_losses)),
                          val_loss=val)
        curve.records.append(rec)
        log.info("epoch %d: train %.4f  val %.4f", epoch, rec.train_loss, rec.val_loss)
    return curve, opt.state()
