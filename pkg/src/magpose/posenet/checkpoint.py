"""MPNT checkpoint files.

Layout (little-endian)::

    b"MPNT" | u32 version | u32 header_len | header JSON | f32 tensor data

The header carries the model/training configuration, position normalisation,
sensor geometry, metric history and a manifest of ``{name, shape, offset,
count, trainable}`` entries; offsets are in bytes from the start of the
tensor data block.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import FormatError
from ..sensor_array import SensorArrayGeometry
from .model import MobilePosenet, ModelConfig, build_model

MAGIC = b"MPNT"
VERSION = 1


@dataclass
class Scaling:
    """Input scaling and the affine position normalisation used by the heads."""

    flux_scale: float
    coord_scale: float
    pos_center: tuple
    pos_half_range: tuple

    def normalize(self, positions):
        return (np.asarray(positions) - np.asarray(self.pos_center)) / np.asarray(self.pos_half_range)

    def denormalize(self, normalized):
        return np.asarray(normalized, dtype=np.float64) * np.asarray(self.pos_half_range) + np.asarray(self.pos_center)

    def to_dict(self) -> dict:
        return {
            "flux_scale_per_T": self.flux_scale,
            "coord_scale_per_m": self.coord_scale,
            "pos_center_m": list(self.pos_center),
            "pos_half_range_m": list(self.pos_half_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaling":
        return cls(d["flux_scale_per_T"], d["coord_scale_per_m"], tuple(d["pos_center_m"]), tuple(d["pos_half_range_m"]))

    @classmethod
    def from_range(cls, pos_min, pos_max, flux_scale, coord_scale) -> "Scaling":
        lo = np.asarray(pos_min, dtype=np.float64)
        hi = np.asarray(pos_max, dtype=np.float64)
        return cls(flux_scale, coord_scale, tuple((lo + hi) / 2), tuple((hi - lo) / 2))


@dataclass
class Checkpoint:
    model_config: ModelConfig
    scaling: Scaling
    geometry: SensorArrayGeometry
    tensors: "OrderedDict[str, np.ndarray]"
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_model(cls, model: MobilePosenet, scaling, geometry, **kw) -> "Checkpoint":
        return cls(model.config, scaling, geometry, state_to_numpy(model), **kw)

    def build(self) -> MobilePosenet:
        model = build_model(self.model_config)
        load_state(model, self.tensors)
        model.eval()
        return model

    def parameter_count(self) -> int:
        trainable = _trainable_names(build_model(self.model_config))
        return int(sum(v.size for k, v in self.tensors.items() if k in trainable))

    def header(self) -> dict:
        manifest = []
        offset = 0
        trainable = _trainable_names(build_model(self.model_config))
        for name, arr in self.tensors.items():
            manifest.append(
                {"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size), "trainable": name in trainable}
            )
            offset += arr.size * 4
        return {
            "format": "MPNT",
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "scaling": self.scaling.to_dict(),
            "geometry": self.geometry.to_dict(),
            "history": self.history,
            "best": self.best,
            "seed": self.seed,
            "extra": self.extra,
            "manifest": manifest,
        }


def _trainable_names(model) -> set:
    return {n for n, p in model.named_parameters() if p.requires_grad}


def state_to_numpy(model: torch.nn.Module) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, t in model.state_dict().items():
        out[name] = t.detach().cpu().numpy().astype("<f4", copy=True)
    return out


def load_state(model: torch.nn.Module, tensors) -> None:
    expected = model.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        unexpected = sorted(set(tensors) - set(expected))
        raise FormatError(f"checkpoint tensors do not match model (missing={missing[:3]}, unexpected={unexpected[:3]})")
    state = OrderedDict()
    for name, ref in expected.items():
        arr = np.asarray(tensors[name])
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}")
        state[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
    model.load_state_dict(state)


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    hb = _header_bytes(ckpt.header())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(hb)) + hb)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise FormatError(f"unsupported format: {path} is not an MPNT checkpoint")
        version, hlen = struct.unpack("<II", head[4:])
        if version != VERSION:
            raise FormatError(f"unsupported format: MPNT version {version}")
        try:
            return json.loads(fh.read(hlen))
        except ValueError as exc:
            raise FormatError(f"corrupt checkpoint header in {path}") from exc


def load_checkpoint(path) -> Checkpoint:
    header = read_checkpoint_header(path)
    with open(path, "rb") as fh:
        fh.seek(8)
        (hlen,) = struct.unpack("<I", fh.read(4))
        fh.seek(12 + hlen)
        data = fh.read()
    tensors = OrderedDict()
    for entry in header["manifest"]:
        start, count = entry["offset"], entry["count"]
        if start + 4 * count > len(data):
            raise FormatError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    ckpt = Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        scaling=Scaling.from_dict(header["scaling"]),
        geometry=SensorArrayGeometry.from_dict(header["geometry"]),
        tensors=tensors,
        train_config=header.get("train_config", {}),
        history=header.get("history", []),
        best=header.get("best", {}),
        seed=header.get("seed", 0),
        extra=header.get("extra", {}),
        version=VERSION,
    )
    # validate every shape against the declared architecture
    load_state(build_model(ckpt.model_config), tensors)
    return ckpt
