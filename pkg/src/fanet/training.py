"""Training loop with per-sample feedback masks.

Every epoch reads each sample's previous-epoch mask from the store
(falling back to Otsu thresholding before the first epoch), feeds it to
the network as hard attention, and after the epoch rewrites the store
with the binarized predictions. The loss is mean binary cross-entropy
plus dice loss; the learning rate drops on validation-loss plateaus.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .mask_codec import MaskStore
from .network import FANet, NetworkConfig

__all__ = [
    "TrainConfig",
    "TrainState",
    "FitResult",
    "PlateauScheduler",
    "dice_loss",
    "bce_loss",
    "combined_loss",
    "train_epoch",
    "fit",
    "LOG_COLUMNS",
]

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "epoch_time")


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    min_learning_rate: float = 1e-7
    dice_smooth: float = 1.0
    bce_epsilon: float = 1e-7
    val_fraction: float = 0.1
    augment_per_sample: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 0:
            raise ValueError("plateau_patience must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(pred*target) + smooth) / (sum(pred) + sum(target) + smooth)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def combined_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    smooth: float = 1.0,
    eps: float = 1e-7,
) -> torch.Tensor:
    return bce_loss(pred, target, eps) + dice_loss(pred, target, smooth)


class PlateauScheduler:
    """Multiply the LR by ``factor`` after patience+1 consecutive non-improving epochs."""

    def __init__(self, optimizer, factor: float = 0.1, patience: int = 5, min_lr: float = 1e-7):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = float("inf")
        self.bad_epochs = 0
        self.num_reductions = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, monitored: float) -> None:
        if monitored < self.best:
            self.best = monitored
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] = max(group["lr"] * self.factor, self.min_lr)
            self.num_reductions += 1
            self.bad_epochs = 0


@dataclass
class TrainState:
    model: FANet
    optimizer: torch.optim.Optimizer
    scheduler: PlateauScheduler
    train_store: MaskStore
    val_store: MaskStore
    config: TrainConfig
    device: str = "cpu"
    epoch: int = 0
    loss_history: list = field(default_factory=list)


def make_state(
    train_cfg: TrainConfig, net_cfg: NetworkConfig, device: str = "cpu"
) -> TrainState:
    torch.manual_seed(train_cfg.seed)
    model = FANet(net_cfg).to(device)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.adam_eps,
    )
    scheduler = PlateauScheduler(
        optimizer,
        factor=train_cfg.plateau_factor,
        patience=train_cfg.plateau_patience,
        min_lr=train_cfg.min_learning_rate,
    )
    return TrainState(model, optimizer, scheduler, MaskStore(), MaskStore(), train_cfg, device)


def _batch_tensors(samples, store: MaskStore, device: str):
    images = torch.from_numpy(
        np.stack([s.image.transpose(2, 0, 1) for s in samples])
    ).to(device)
    targets = torch.from_numpy(
        np.stack([s.mask[None].astype(np.float32) for s in samples])
    ).to(device)
    prev = [store.get(s.sample_id, image=s.image) for s in samples]
    prev_t = torch.from_numpy(np.stack(prev)[:, None].astype(np.float32)).to(device)
    return images, targets, prev, prev_t


def train_epoch(state: TrainState, data, feedback_hook=None) -> TrainState:
    """One optimization pass; afterwards the store holds this epoch's predictions.

    ``feedback_hook(epoch, sample_ids, consumed_masks)`` is invoked per
    batch with the exact masks fed to the network, for instrumentation.
    """
    cfg = state.config
    model, device = state.model, state.device
    model.train()
    epoch = state.epoch
    threshold = model.cfg.binarize_threshold

    order = list(data.sample_ids)
    rng = np.random.default_rng(cfg.seed * 100003 + epoch)
    rng.shuffle(order)

    new_masks = {}
    total_loss = 0.0
    for start in range(0, len(order), cfg.batch_size):
        samples = [data.get(sid) for sid in order[start : start + cfg.batch_size]]
        images, targets, prev_np, prev = _batch_tensors(samples, state.train_store, device)
        if feedback_hook is not None:
            feedback_hook(epoch, [s.sample_id for s in samples], prev_np)
        state.optimizer.zero_grad()
        pred = model(images, prev)
        loss = combined_loss(pred, targets, cfg.dice_smooth, cfg.bce_epsilon)
        loss.backward()
        state.optimizer.step()
        total_loss += float(loss.detach()) * len(samples)
        binar = (pred.detach() >= threshold).to(torch.uint8).cpu().numpy()
        for i, s in enumerate(samples):
            new_masks[s.sample_id] = binar[i, 0]

    for sid, mask in new_masks.items():
        state.train_store.put(sid, mask, epoch)

    state.loss_history.append(total_loss / max(1, len(order)))
    state.epoch = epoch + 1
    return state


def _validate(state: TrainState, data) -> float:
    cfg = state.config
    model = state.model
    model.eval()
    epoch = state.epoch  # called after train_epoch incremented it
    threshold = model.cfg.binarize_threshold
    total = 0.0
    new_masks = {}
    with torch.no_grad():
        for start in range(0, len(data.sample_ids), cfg.batch_size):
            samples = [data.get(sid) for sid in data.sample_ids[start : start + cfg.batch_size]]
            images, targets, _, prev = _batch_tensors(samples, state.val_store, state.device)
            pred = model(images, prev)
            loss = combined_loss(pred, targets, cfg.dice_smooth, cfg.bce_epsilon)
            total += float(loss) * len(samples)
            binar = (pred >= threshold).to(torch.uint8).cpu().numpy()
            for i, s in enumerate(samples):
                new_masks[s.sample_id] = binar[i, 0]
    for sid, mask in new_masks.items():
        state.val_store.put(sid, mask, epoch - 1)
    return total / max(1, len(data.sample_ids))


class _Subset:
    def __init__(self, base, ids):
        self.base = base
        self.sample_ids = list(ids)

    def __len__(self):
        return len(self.sample_ids)

    def get(self, sid):
        return self.base.get(sid)


@dataclass
class FitResult:
    state: TrainState
    history: list
    best_val_loss: float
    best_checkpoint: Path | None
    final_checkpoint: Path | None
    log_path: Path | None


def fit(
    train_cfg: TrainConfig,
    net_cfg: NetworkConfig,
    train_data,
    val_data=None,
    out_dir: str | None = None,
    device: str = "cpu",
    feedback_hook=None,
    log=None,
) -> FitResult:
    """Train for the configured number of epochs with plateau LR scheduling.

    When no validation split is given, a seeded fraction of the training
    samples is held out; with ``val_fraction == 0`` the scheduler monitors
    the training loss instead. Checkpoints (best-validation and final),
    the epoch log CSV, and the mask stores are written under ``out_dir``.
    """
    if len(train_data) == 0:
        raise ValueError("empty training dataset")

    if val_data is None and train_cfg.val_fraction > 0 and len(train_data) >= 2:
        ids = list(train_data.sample_ids)
        rng = np.random.default_rng(train_cfg.seed)
        rng.shuffle(ids)
        n_val = max(1, int(round(len(ids) * train_cfg.val_fraction)))
        val_ids = set(ids[:n_val])
        val_data = _Subset(train_data, sorted(val_ids))
        train_data = _Subset(train_data, [i for i in ids if i not in val_ids])

    if train_cfg.augment_per_sample > 0:
        from .augment import AugmentedData

        train_data = AugmentedData(train_data, train_cfg.augment_per_sample)

    state = make_state(train_cfg, net_cfg, device)
    out = Path(out_dir) if out_dir is not None else None
    log_path = best_path = final_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(exist_ok=True)
        log_path = out / "training_log.csv"
        best_path = out / "checkpoint_best.pt"
        final_path = out / "checkpoint_final.pt"

    history = []
    best_val = float("inf")
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        train_epoch(state, train_data, feedback_hook=feedback_hook)
        train_loss = state.loss_history[-1]
        val_loss = _validate(state, val_data) if val_data is not None else float("nan")
        monitored = train_loss if val_data is None else val_loss
        state.scheduler.step(monitored)
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": state.scheduler.lr,
            "epoch_time": time.perf_counter() - t0,
        }
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}"
                f"  lr {state.scheduler.lr:.2e}"
            )
        improved = monitored < best_val
        if out is not None:
            _write_log(log_path, history)
            state.train_store.save(out / "masks" / "train.rlestore")
            if val_data is not None:
                state.val_store.save(out / "masks" / "val.rlestore")
            extra = {
                "train_config": train_cfg.to_dict(),
                "epoch": epoch,
                "val_loss": val_loss,
                "train_loss": train_loss,
            }
            if improved:
                save_checkpoint(best_path, state.model, net_cfg, extra)
            save_checkpoint(final_path, state.model, net_cfg, extra)
        if improved:
            best_val = monitored

    return FitResult(state, history, best_val, best_path, final_path, log_path)


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["train_loss"]),
                    repr(row["val_loss"]),
                    repr(row["lr"]),
                    f"{row['epoch_time']:.3f}",
                ]
            )
