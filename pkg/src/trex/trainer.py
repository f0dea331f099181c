"""Teacher-forced training loop with early stopping and run logging."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tape, backward
from .checkpoint import Checkpoint, save_checkpoint
from .data import SplitDataset
from .model import ModelConfig, TrexModel
from .optim import Adam, clip_global_norm
from .sampler import TrainingSample, make_epoch, split_at_pivot


class TrainerError(RuntimeError):
    pass


class TrainingDivergedError(TrainerError):
    """The loss went non-finite mid-training."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 0.5
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    samples_per_customer: int = 4
    shuffle_within_session: bool = False

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate/clip_norm must be positive, weight_decay >= 0")
        if self.batch_size < 1 or self.samples_per_customer < 1:
            raise ValueError("batch_size and samples_per_customer must be >= 1")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


def validation_samples(split: SplitDataset, cfg: ModelConfig) -> list[TrainingSample]:
    """One fixed sample per validation customer: pivot at the final session.

    Fixed pivots keep the early-stopping signal stable across epochs.
    """
    samples = []
    for cust in split.validation.customers:
        if cust.num_sessions < 2:
            continue
        pivot = cust.sessions[-1].day
        samples.append(
            split_at_pivot(cust, pivot, cfg.n_enc, cfg.n_dec, split.validation.vocab)
        )
    return samples


def validation_loss(model: TrexModel, samples: list[TrainingSample]) -> float:
    """Eval-mode (dropout-free) mean loss over fixed validation samples."""
    if not samples:
        raise TrainerError("validation set has no usable samples")
    total = 0.0
    for s in samples:
        total += model.sample_loss(
            s.enc, s.dec_input, s.dec_target, s.target_mask
        ).item()
    return total / len(samples)


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    split: SplitDataset,
    checkpoint_path: str | Path | None = None,
    runlog_path: str | Path | None = None,
) -> Checkpoint:
    """Train on the split's train customers, early-stop on validation loss.

    Keeps the best-validation parameters and returns (and optionally saves)
    that checkpoint. Fully deterministic for a given config and split.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not split.train.customers:
        raise TrainerError("training split is empty")

    model = TrexModel(model_cfg, seed=train_cfg.seed)
    opt = Adam(
        model.params.as_dict(),
        lr=train_cfg.learning_rate,
        weight_decay=train_cfg.weight_decay,
    )
    dropout_rng = np.random.default_rng(train_cfg.seed + 777_001)
    val_samples = validation_samples(split, model_cfg)

    log_rows: list[dict] = []
    best_val = validation_loss(model, val_samples)
    best_epoch = 0
    best_params = model.params.copy()
    log_rows.append({"epoch": 0, "train_loss": None, "val_loss": best_val})
    epochs_since_improve = 0
    final_train_loss = None

    t0 = time.monotonic()
    for epoch in range(1, train_cfg.max_epochs + 1):
        batches = make_epoch(
            split.train,
            train_cfg.samples_per_customer,
            model_cfg.n_enc,
            model_cfg.n_dec,
            train_cfg.batch_size,
            seed=_epoch_seed(train_cfg.seed, epoch),
            shuffle_within_session=train_cfg.shuffle_within_session,
        )
        total_loss = 0.0
        total_samples = 0
        for i, batch in enumerate(batches):
            tape = Tape()
            tape.watch_all(m for _, m in model.params.named_tensors())
            loss = model.batch_loss(batch, training=True, rng=dropout_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {i}"
                )
            backward(tape, loss)
            tape.release()
            grads = {name: m.grad for name, m in model.params.named_tensors()}
            opt.step(clip_global_norm(grads, train_cfg.clip_norm))
            total_loss += value * batch.size
            total_samples += batch.size
        train_loss = total_loss / max(total_samples, 1)
        final_train_loss = train_loss
        val = validation_loss(model, val_samples)
        log_rows.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val,
                "wall_time_s": round(time.monotonic() - t0, 3),
            }
        )
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = model.params.copy()
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
            if epochs_since_improve >= train_cfg.patience:
                break

    ckpt = Checkpoint(
        model_config=model_cfg,
        params=best_params,
        vocab=split.train.vocab,
        metadata={
            "epoch": best_epoch,
            "best_val_loss": best_val,
            "seed": train_cfg.seed,
            "trained_epochs": len(log_rows) - 1,
            "final_train_loss": final_train_loss,
        },
    )
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    if runlog_path is not None:
        with open(runlog_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")
    return ckpt
