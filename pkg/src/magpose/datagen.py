"""Theoretical dataset generation and the MGDS binary record store.

File layout (little-endian)::

    b"MGDS" | u32 version | u32 header_len | header JSON | u64 count | records

Each record is 6 x f64 pose (a, b, c in metres; m, n, p) followed by
48 x f32 flux in tesla, sensor-major. Readings are clean dipole theory; noise
is only ever added at training or evaluation time.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .dipole import DEFAULT_MAGNET, MagnetPose, MagnetSpec, headings_from_angles
from .errors import ContractError, FormatError
from .sensor_array import COORD_SCALE, DEFAULT_GEOMETRY, FLUX_SCALE, SensorArrayGeometry, simulate_flux

MAGIC = b"MGDS"
VERSION = 1
N_FLUX = 48


def record_dtype(n_flux: int = N_FLUX) -> np.dtype:
    return np.dtype([("pose", "<f8", (6,)), ("flux", "<f4", (n_flux,))])


BOUNDARY_HEADINGS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64
)


@dataclass
class SamplingConfig:
    pos_min: tuple = (-0.05, -0.05, 0.03)
    pos_max: tuple = (0.05, 0.05, 0.13)
    pos_step: float = 0.005
    angle_step: float = math.pi / 6
    pos_jitter: float = 0.005
    angle_jitter: float = math.pi / 6
    repeats: int = 3
    include_boundary_orientations: bool = True
    seed: int = 0

    def __post_init__(self):
        self.pos_min = tuple(float(v) for v in self.pos_min)
        self.pos_max = tuple(float(v) for v in self.pos_max)
        if self.pos_step <= 0 or self.angle_step <= 0:
            raise ContractError("pos_step and angle_step must be positive")
        if self.repeats < 1:
            raise ContractError("repeats must be >= 1")
        if any(hi <= lo for lo, hi in zip(self.pos_min, self.pos_max)):
            raise ContractError("position range is degenerate")
        if self.pos_jitter < 0 or self.angle_jitter < 0:
            raise ContractError("jitters must be >= 0")

    def axis_values(self, axis: int) -> np.ndarray:
        """Grid values along one axis: pos_min + k*step, k = 0..floor(span/step)."""
        span = self.pos_max[axis] - self.pos_min[axis]
        n = int(math.floor(span / self.pos_step + 1e-9)) + 1
        return self.pos_min[axis] + np.arange(n) * self.pos_step

    def angle_values(self) -> np.ndarray:
        """Grid over [-pi, pi] inclusive of both endpoints."""
        n = int(math.floor(2 * math.pi / self.angle_step + 1e-9)) + 1
        return -math.pi + np.arange(n) * self.angle_step

    @property
    def grid_shape(self) -> tuple:
        return tuple(len(self.axis_values(k)) for k in range(3))

    @property
    def per_position(self) -> int:
        n_ang = len(self.angle_values())
        boundary = len(BOUNDARY_HEADINGS) if self.include_boundary_orientations else 0
        return (n_ang * n_ang + boundary) * self.repeats

    def pose_count(self) -> int:
        return int(np.prod(self.grid_shape)) * self.per_position

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pos_min"] = list(self.pos_min)
        d["pos_max"] = list(self.pos_max)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingConfig":
        return cls(**d)


def _grid_position(config: SamplingConfig, g: int) -> np.ndarray:
    nx, ny, nz = config.grid_shape
    ix, rem = divmod(g, ny * nz)
    iy, iz = divmod(rem, nz)
    return np.array([config.axis_values(0)[ix], config.axis_values(1)[iy], config.axis_values(2)[iz]])


def pose_block(config: SamplingConfig, g: int) -> tuple[np.ndarray, np.ndarray]:
    """All poses emitted at grid position ``g``: (positions (K, 3), headings (K, 3)).

    Order: yaw-major, then pitch, then repeat; boundary headings (x repeats)
    follow. Jitter comes from a generator keyed on (seed, g), so any block can
    be produced independently of the others.
    """
    centre = _grid_position(config, g)
    angles = config.angle_values()
    yaw, pitch = np.meshgrid(angles, angles, indexing="ij")
    yaw = np.repeat(yaw.ravel(), config.repeats)
    pitch = np.repeat(pitch.ravel(), config.repeats)
    rng = np.random.default_rng([config.seed, g])
    u = rng.uniform(-1.0, 1.0, size=(yaw.size, 5))
    positions = centre + u[:, :3] * config.pos_jitter
    headings = headings_from_angles(yaw + u[:, 3] * config.angle_jitter, pitch + u[:, 4] * config.angle_jitter)
    if config.include_boundary_orientations:
        b_head = np.repeat(BOUNDARY_HEADINGS, config.repeats, axis=0)
        positions = np.concatenate([positions, np.broadcast_to(centre, b_head.shape)])
        headings = np.concatenate([headings, b_head])
    return positions, headings


def n_grid_positions(config: SamplingConfig) -> int:
    return int(np.prod(config.grid_shape))


def enumerate_poses(config: SamplingConfig) -> Iterator[MagnetPose]:
    for g in range(n_grid_positions(config)):
        positions, headings = pose_block(config, g)
        for p, h in zip(positions, headings):
            yield MagnetPose(p, h)


# --------------------------------------------------------------------------- file I/O


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def build_header(config: SamplingConfig, spec: MagnetSpec, geom: SensorArrayGeometry, run_config=None) -> dict:
    return {
        "format": "MGDS",
        "sampling": config.to_dict(),
        "seed": config.seed,
        "magnet": spec.to_dict(),
        "geometry": geom.to_dict(),
        "scaling": {"flux_scale_per_T": FLUX_SCALE, "coord_scale_per_m": COORD_SCALE},
        "jitter_distribution": "uniform",
        "units": {"pose": "m, unit heading", "flux": "T"},
        "run_config": run_config or {},
    }


@dataclass
class GenerationSummary:
    path: str
    count: int
    checksum: str
    header: dict = field(repr=False, default_factory=dict)


def _block_records(args):
    config, spec, geom, start, stop = args
    dtype = record_dtype(geom.n_sensors * 3)
    chunks = []
    for g in range(start, stop):
        positions, headings = pose_block(config, g)
        flux = simulate_flux(positions, headings, spec, geom)
        rec = np.empty(len(positions), dtype=dtype)
        rec["pose"][:, :3] = positions
        rec["pose"][:, 3:] = headings
        rec["flux"] = flux.reshape(len(positions), -1)
        chunks.append(rec)
    return np.concatenate(chunks).tobytes()


def generate_dataset(
    config: SamplingConfig,
    spec: MagnetSpec = DEFAULT_MAGNET,
    geom: SensorArrayGeometry = DEFAULT_GEOMETRY,
    out_path: str | os.PathLike | None = None,
    run_config: dict | None = None,
    workers: int = 1,
    chunk_positions: int = 64,
) -> GenerationSummary:
    """Write the dataset to ``out_path`` and return count + SHA-256 of the record payload.

    ``out_path=None`` only computes the count and checksum. Output is
    independent of ``workers``: blocks are produced per grid position and
    written in index order.
    """
    # the sampling range must keep the magnet off every sensor
    zmin = config.pos_min[2] - config.pos_jitter
    if zmin <= float(np.max(geom.positions[:, 2])) and config.pos_max[2] + config.pos_jitter >= float(np.min(geom.positions[:, 2])):
        raise ContractError("sampling volume intersects the sensor plane")
    header = build_header(config, spec, geom, run_config)
    count = config.pose_count()
    n_pos = n_grid_positions(config)
    tasks = [(config, spec, geom, s, min(s + chunk_positions, n_pos)) for s in range(0, n_pos, chunk_positions)]
    digest = hashlib.sha256()
    fh = open(out_path, "wb") if out_path is not None else None
    try:
        if fh is not None:
            hb = _header_bytes(header)
            fh.write(MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + struct.pack("<Q", count))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                blobs = pool.map(_block_records, tasks)
                written = _drain(blobs, digest, fh)
        else:
            written = _drain(map(_block_records, tasks), digest, fh)
    finally:
        if fh is not None:
            fh.close()
    if written != count * record_dtype(geom.n_sensors * 3).itemsize:
        raise RuntimeError("record count mismatch while writing dataset")
    return GenerationSummary(str(out_path) if out_path else "", count, digest.hexdigest(), header)


def _drain(blobs, digest, fh) -> int:
    n = 0
    for blob in blobs:
        digest.update(blob)
        if fh is not None:
            fh.write(blob)
        n += len(blob)
    return n


@dataclass
class Dataset:
    """Memory-mapped view of an MGDS file."""

    path: str
    header: dict
    records: np.ndarray

    def __len__(self):
        return len(self.records)

    @property
    def geometry(self) -> SensorArrayGeometry:
        return SensorArrayGeometry.from_dict(self.header["geometry"])

    @property
    def magnet(self) -> MagnetSpec:
        return MagnetSpec.from_dict(self.header["magnet"])

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig.from_dict(self.header["sampling"])

    def poses(self, idx=slice(None)) -> np.ndarray:
        return np.asarray(self.records["pose"][idx], dtype=np.float64)

    def flux(self, idx=slice(None)) -> np.ndarray:
        """(B, N, 3) float64 tesla."""
        f = np.asarray(self.records["flux"][idx], dtype=np.float64)
        return f.reshape(len(f), -1, 3)

    def checksum(self) -> str:
        h = hashlib.sha256()
        step = 1 << 16
        for s in range(0, len(self.records), step):
            h.update(np.ascontiguousarray(self.records[s : s + step]).tobytes())
        return h.hexdigest()


def read_header(path) -> tuple[dict, int, int]:
    """Return (header, record count, payload offset)."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise FormatError(f"unsupported format: {path} is not an MGDS dataset")
        version, hlen = struct.unpack("<II", head[4:])
        if version != VERSION:
            raise FormatError(f"unsupported format: MGDS version {version}")
        raw = fh.read(hlen)
        try:
            header = json.loads(raw)
        except ValueError as exc:
            raise FormatError(f"corrupt dataset header in {path}") from exc
        (count,) = struct.unpack("<Q", fh.read(8))
    return header, count, 12 + hlen + 8


def load_dataset(path) -> Dataset:
    header, count, offset = read_header(path)
    dtype = record_dtype(int(header["geometry"]["rows"]) * int(header["geometry"]["cols"]) * 3)
    expected = offset + count * dtype.itemsize
    if os.path.getsize(path) != expected:
        raise FormatError(f"{path}: truncated or oversized payload")
    if count == 0:
        records = np.empty(0, dtype=dtype)
    else:
        records = np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=(count,))
    return Dataset(str(path), header, records)


def write_records(path, header: dict, poses: np.ndarray, flux: np.ndarray) -> str:
    """Write arbitrary (pose, flux) rows as an MGDS file; returns the payload checksum."""
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 6)
    flux = np.asarray(flux).reshape(len(poses), -1)
    rec = np.empty(len(poses), dtype=record_dtype(flux.shape[1]))
    rec["pose"] = poses
    rec["flux"] = flux
    blob = rec.tobytes()
    hb = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + struct.pack("<Q", len(rec)) + blob)
    return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    fractions: tuple = (0.96, 0.02, 0.02)


def split_dataset(count: int, fractions=(0.96, 0.02, 0.02), seed: int = 0) -> DatasetSplit:
    """Random disjoint partition. val/test sizes are floored; train takes the remainder."""
    if count < 3:
        raise ContractError("need at least 3 records to split")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError("fractions must be three non-negative values summing to 1")
    n_val = int(math.floor(count * fractions[1] + 1e-9))
    n_test = int(math.floor(count * fractions[2] + 1e-9))
    perm = np.random.default_rng(seed).permutation(count)
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test : n_test + n_val])
    train = np.sort(perm[n_test + n_val :])
    return DatasetSplit(train, val, test, fractions)


def subsample_split(count: int, subsample: float = 1.0, fractions=(0.96, 0.02, 0.02), seed: int = 0) -> DatasetSplit:
    """Split a random ``subsample`` fraction of ``count`` records; indices refer to the full store."""
    if not 0 < subsample <= 1:
        raise ContractError("subsample must be in (0, 1]")
    if subsample == 1:
        return split_dataset(count, fractions, seed)
    n = int(round(count * subsample))
    chosen = np.sort(np.random.default_rng([seed, 1]).choice(count, n, replace=False))
    sp = split_dataset(n, fractions, seed)
    return DatasetSplit(chosen[sp.train], chosen[sp.val], chosen[sp.test], sp.fractions)
