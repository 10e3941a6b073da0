"""Loss, training loop and inference for MobilePosenet."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .. import nn_engine as ne
from ..datagen import Dataset, DatasetSplit
from ..dipole import MagnetPose
from ..errors import ContractError, NumericError
from ..sensor_array import COORD_SCALE, FLUX_SCALE, ArrayReading, SensorArrayGeometry, assemble_inputs
from .checkpoint import Checkpoint, Scaling, load_checkpoint, state_to_numpy
from .inference import FoldedPosenet
from .model import MobilePosenet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 256
    batch_size: int = 3200
    base_lr: float = 1e-4
    beta_loss_weight: float = 1.0
    noise_sigma: float = 1e-6  # T
    seed: int = 0
    eval_batch_size: int = 4096

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.base_lr <= 0 or self.beta_loss_weight <= 0:
            raise ContractError("epochs, batch_size, base_lr and beta must be positive (batch_size >= 2)")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def pose_loss(pred_pos, pred_head, target_pos, target_head, beta: float = 1.0, reduction: str = "mean"):
    """beta * |dp| + |dh| per sample, with positions in normalised units and raw headings."""
    e_p = torch.linalg.vector_norm(pred_pos - target_pos, dim=1)
    e_o = torch.linalg.vector_norm(pred_head - target_head, dim=1)
    per_sample = beta * e_p + e_o
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def scaling_for(dataset: Dataset) -> Scaling:
    s = dataset.sampling
    return Scaling.from_range(s.pos_min, s.pos_max, FLUX_SCALE, COORD_SCALE)


class _Arrays:
    """In-memory copy of the records a split touches."""

    def __init__(self, dataset: Dataset, idx):
        idx = np.asarray(idx, dtype=np.int64)
        self.flux = np.asarray(dataset.records["flux"][idx], dtype=np.float32).reshape(len(idx), -1, 3)
        self.pose = np.asarray(dataset.records["pose"][idx], dtype=np.float64)

    def __len__(self):
        return len(self.pose)


def _inputs(flux, geom, include_coords) -> torch.Tensor:
    return torch.from_numpy(assemble_inputs(flux, geom, include_coords))


def _targets(poses, scaling: Scaling):
    pos = torch.from_numpy(scaling.normalize(poses[:, :3]).astype(np.float32))
    head = torch.from_numpy(poses[:, 3:].astype(np.float32))
    return pos, head


@torch.no_grad()
def _predict_arrays(model, flux, geom, include_coords, batch):
    model.eval()
    pos, head = [], []
    for s in range(0, len(flux), batch):
        p, h = model(_inputs(flux[s : s + batch], geom, include_coords))
        pos.append(p.double().numpy())
        head.append(h.double().numpy())
    return np.concatenate(pos), np.concatenate(head)


def validation_metrics(model, arrays: _Arrays, geom, scaling: Scaling, include_coords, beta, batch=4096) -> dict:
    """Clean (noise-free) metrics: loss in training units, E_p in mm, angle error in degrees."""
    pos_n, head = _predict_arrays(model, arrays.flux, geom, include_coords, batch)
    tgt_n = scaling.normalize(arrays.pose[:, :3])
    e_p_norm = np.linalg.norm(pos_n - tgt_n, axis=1)
    e_o_raw = np.linalg.norm(head - arrays.pose[:, 3:], axis=1)
    pos_m = scaling.denormalize(pos_n)
    unit = head / np.linalg.norm(head, axis=1, keepdims=True)
    e_p_mm = np.linalg.norm(pos_m - arrays.pose[:, :3], axis=1) * 1e3
    e_o = np.linalg.norm(unit - arrays.pose[:, 3:], axis=1)
    angle = np.degrees(2 * np.arcsin(np.clip(e_o / 2, 0, 1)))
    return {
        "loss": float(np.mean(beta * e_p_norm + e_o_raw)),
        "position_mm": float(np.mean(e_p_mm)),
        "angle_deg": float(np.mean(angle)),
    }


def train(
    model: MobilePosenet,
    dataset: Dataset,
    split: DatasetSplit,
    config: TrainConfig,
    run_config: dict | None = None,
    on_epoch=None,
) -> Checkpoint:
    """Adam + cosine schedule, fresh Gaussian flux noise per sample per epoch.

    The returned checkpoint holds the weights of the epoch with the lowest
    clean validation loss and the full per-epoch history.
    """
    if len(split.train) < 2:
        raise ContractError("training split needs at least 2 records")
    if len(split.val) == 0:
        raise ContractError("validation split is empty")
    geom = dataset.geometry
    scaling = scaling_for(dataset)
    include_coords = model.config.use_coord_channels
    train_arr = _Arrays(dataset, split.train)
    val_arr = _Arrays(dataset, split.val)
    noise_scaled = config.noise_sigma  # tesla, added before scaling
    params = [p for p in model.parameters() if p.requires_grad]
    opt = ne.OptimizerState(base_lr=config.base_lr, total_epochs=config.epochs)
    torch.manual_seed(config.seed)

    history = []
    best = {"loss": math.inf}
    best_state = None
    n = len(train_arr)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = opt.lr_at(epoch)
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            flux = train_arr.flux[idx]
            if noise_scaled > 0:
                rng = np.random.default_rng([config.seed, epoch, b])
                flux = flux + rng.normal(0.0, noise_scaled, size=flux.shape).astype(np.float32)
            x = _inputs(flux, geom, include_coords)
            tgt_pos, tgt_head = _targets(train_arr.pose[idx], scaling)
            pred_pos, pred_head = model(x)
            loss = pose_loss(pred_pos, pred_head, tgt_pos, tgt_head, config.beta_loss_weight)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch + 1}, batch {b}")
            for p in params:
                p.grad = None
            loss.backward()
            ne.adam_step(params, [p.grad for p in params], opt, lr)
            total += loss.item() * len(idx)
            seen += len(idx)
        val = validation_metrics(model, val_arr, geom, scaling, include_coords, config.beta_loss_weight, config.eval_batch_size)
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": total / max(seen, 1),
            "val_loss": val["loss"],
            "val_position_mm": val["position_mm"],
            "val_angle_deg": val["angle_deg"],
        }
        history.append(row)
        log.info("epoch %d (%.1fs): %s", epoch + 1, time.perf_counter() - t0, row)
        if val["loss"] < best["loss"]:
            best = dict(val, epoch=epoch + 1)
            best_state = copy.deepcopy(model.state_dict())
        if on_epoch is not None:
            on_epoch(row)

    model.load_state_dict(best_state)
    model.eval()
    extra = {
        "optimizer": opt.describe(),
        "batch_norm": {"momentum": ne.BN_MOMENTUM, "eps": ne.BN_EPS},
        "noise": {"sigma_T": config.noise_sigma, "resampled": "per sample per epoch", "channels": "flux only"},
        "init": "uniform(+-sqrt(1/fan_in)); BN gamma=1 beta=0",
        "split_sizes": [len(split.train), len(split.val), len(split.test)],
        "dataset_records": len(dataset),
        "run_config": run_config or {},
    }
    return Checkpoint(
        model_config=model.config,
        scaling=scaling,
        geometry=geom,
        tensors=state_to_numpy(model),
        train_config=config.to_dict(),
        history=history,
        best=best,
        seed=config.seed,
        extra=extra,
    )


class PosePredictor:
    """Read-only inference wrapper around a checkpoint; safe to share across threads."""

    def __init__(self, ckpt: Checkpoint | str):
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        self.ckpt = ckpt
        self.model = ckpt.build()
        self.fast = FoldedPosenet(self.model)
        self.geometry = ckpt.geometry
        self.scaling = ckpt.scaling
        self.include_coords = ckpt.model_config.use_coord_channels

    def check_geometry(self, geom: SensorArrayGeometry | None):
        if geom is not None and not geom.same_as(self.geometry):
            raise ContractError("reading geometry does not match the checkpoint's sensor array")

    @torch.no_grad()
    def predict_batch(self, flux, batch: int = 4096):
        """(B, N, 3) tesla -> positions (B, 3) m and unit headings (B, 3)."""
        flux = np.asarray(flux)
        pos_n, head = _predict_arrays(self.model, flux, self.geometry, self.include_coords, batch)
        head = head / np.linalg.norm(head, axis=1, keepdims=True)
        return self.scaling.denormalize(pos_n), head

    def __call__(self, reading: ArrayReading) -> MagnetPose:
        if reading.flux.shape != (self.geometry.n_sensors, 3):
            raise ContractError("reading does not match the checkpoint's sensor count")
        p, h = self.fast(assemble_inputs(reading.flux[None], self.geometry, self.include_coords))
        pos = self.scaling.denormalize(p[0].astype(np.float64))
        return MagnetPose.normalized(pos, h[0].astype(np.float64))


def predict_pose(model_or_checkpoint, reading: ArrayReading, geometry: SensorArrayGeometry | None = None) -> MagnetPose:
    predictor = model_or_checkpoint if isinstance(model_or_checkpoint, PosePredictor) else PosePredictor(model_or_checkpoint)
    predictor.check_geometry(geometry)
    return predictor(reading)
