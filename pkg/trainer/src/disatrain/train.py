"""Training loop: regress the descriptor dot product onto stored targets.

Both patches of a record go through the same network; the prediction is
the dot product of their center descriptors and the loss is plain MSE
against the stored similarity. The best-validation epoch is what gets
exported, not the last one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import torch

from .augment import augment
from .dataset import PairDataset, load_dataset, split_dataset
from .model import DescriptorNet, build_model, center_descriptor, export_weights


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 35
    batch_size: int = 256
    lr: float = 1e-3
    val_split: float = 0.1
    rotate: bool = True
    intensity: bool = True
    small_angle: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must lie in (0, 1)")


@dataclass
class TrainResult:
    """Per-epoch log plus the best-validation model (weights loaded)."""

    log: list
    best_epoch: int
    best_val_mse: float
    model: DescriptorNet


def predict_targets(model: DescriptorNet, ds: PairDataset,
                    batch_size: int = 256) -> np.ndarray:
    """Model predictions for every record, in dataset order."""
    model.eval()
    out = np.empty(len(ds), dtype=np.float64)
    with torch.no_grad():
        for lo in range(0, len(ds), batch_size):
            hi = min(lo + batch_size, len(ds))
            dm = center_descriptor(
                model(torch.from_numpy(ds.patches_m[lo:hi, None])), ds.side)
            df = center_descriptor(
                model(torch.from_numpy(ds.patches_f[lo:hi, None])), ds.side)
            out[lo:hi] = (dm * df).sum(1).numpy()
    return out


def evaluate_mse(model: DescriptorNet, ds: PairDataset,
                 batch_size: int = 256) -> float:
    pred = predict_targets(model, ds, batch_size)
    return float(np.mean((pred - ds.targets.astype(np.float64)) ** 2))


def _augmented_batch(ds: PairDataset, idx, cfg: TrainConfig, rng):
    bm = ds.patches_m[idx]
    bf = ds.patches_f[idx]
    if cfg.rotate or cfg.intensity or cfg.small_angle > 0.0:
        for j in range(len(idx)):
            rec = augment(ds.record(idx[j]), rng, rotate=cfg.rotate,
                          intensity=cfg.intensity, small_angle=cfg.small_angle)
            bm[j] = rec.patch_m
            bf[j] = rec.patch_f
    return bm, bf


def train(dataset, config: TrainConfig = TrainConfig(), weights_out=None,
          log_out=None, progress: bool = False) -> TrainResult:
    """Fit the regression and keep the best-validation weights.

    ``dataset`` is a PairDataset or DISAP1 path(s). train_mse is the
    running mean over the epoch's augmented batches; val_mse is computed
    clean after each epoch. With a fixed config the run is deterministic
    on CPU (init, shuffling and augmentation all derive from config.seed).
    """
    if not isinstance(dataset, PairDataset):
        dataset = load_dataset(dataset)
    torch.manual_seed(config.seed)
    model = build_model()
    tr, va = split_dataset(dataset, config.val_split, config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    log = []
    best_val = np.inf
    best_epoch = -1
    best_state = None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        se = 0.0
        n_seen = 0
        order = rng.permutation(len(tr))
        for lo in range(0, len(tr), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            bm, bf = _augmented_batch(tr, idx, config, rng)
            dm = center_descriptor(model(torch.from_numpy(bm[:, None])), tr.side)
            df = center_descriptor(model(torch.from_numpy(bf[:, None])), tr.side)
            pred = (dm * df).sum(1)
            loss = torch.mean((pred - torch.from_numpy(tr.targets[idx])) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            se += float(loss.detach()) * len(idx)
            n_seen += len(idx)
        val_mse = evaluate_mse(model, va, config.batch_size)
        log.append({"epoch": epoch, "train_mse": se / n_seen,
                    "val_mse": val_mse})
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = {k: v.detach().clone()
                          for k, v in model.state_dict().items()}
        if progress:
            print(f"epoch {epoch}: train {se / n_seen:.5f} "
                  f"val {val_mse:.5f} ({time.perf_counter() - t0:.1f}s)",
                  flush=True)
    model.load_state_dict(best_state)
    if weights_out is not None:
        export_weights(model, weights_out)
    if log_out is not None:
        with open(log_out, "w") as fh:
            json.dump(log, fh, indent=2)
            fh.write("\n")
    return TrainResult(log, best_epoch, best_val, model)
