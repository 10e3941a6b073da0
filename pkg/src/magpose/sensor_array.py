"""Magnetometer array geometry, simulated readings and network input assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dipole import MagnetPose, MagnetSpec, field_at_points
from .errors import ContractError, SingularFieldError

# Network input units: flux in 100 uT, coordinates in 100 mm.
FLUX_SCALE = 1e4  # 1/T
COORD_SCALE = 10.0  # 1/m
DEFAULT_RANGE_LIMIT = 1600e-6  # T
DEFAULT_PITCH = 0.1 / 3  # m
LAYOUT = "row-major"  # sensor k <-> cell (k // cols, k % cols)


@dataclass(frozen=True)
class SensorArrayGeometry:
    positions: np.ndarray  # (N, 3) m
    rows: int = 4
    cols: int = 4
    range_limit: float = DEFAULT_RANGE_LIMIT

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ContractError("positions must be (N, 3)")
        if pos.shape[0] != self.rows * self.cols:
            raise ContractError(f"{pos.shape[0]} sensors do not fill a {self.rows}x{self.cols} grid")
        if not np.all(np.isfinite(pos)):
            raise ContractError("sensor positions must be finite")
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        if np.any(d[~np.eye(len(pos), dtype=bool)] <= 0):
            raise ContractError("sensor positions must be pairwise distinct")
        if not self.range_limit > 0:
            raise ContractError("range_limit must be positive")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n_sensors(self) -> int:
        return self.rows * self.cols

    @classmethod
    def grid(cls, rows=4, cols=4, pitch=DEFAULT_PITCH, range_limit=DEFAULT_RANGE_LIMIT):
        """Planar grid in z = 0 centred on the origin: cell (i, j) sits at (x_j, y_i)."""
        xs = (np.arange(cols) - (cols - 1) / 2) * pitch
        ys = (np.arange(rows) - (rows - 1) / 2) * pitch
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        pos = np.stack([gx.ravel(), gy.ravel(), np.zeros(rows * cols)], axis=1)
        return cls(pos, rows, cols, range_limit)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "positions_mm": (self.positions * 1e3).tolist(),
            "range_limit_uT": self.range_limit * 1e6,
            "layout": LAYOUT,
            # exact SI copies: mm <-> m scaling is not bit-reversible
            "positions_m": self.positions.tolist(),
            "range_limit_T": self.range_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorArrayGeometry":
        if "positions_m" in d:
            pos = np.asarray(d["positions_m"], dtype=np.float64)
        else:
            pos = np.asarray(d["positions_mm"], dtype=np.float64) * 1e-3
        limit = float(d["range_limit_T"]) if "range_limit_T" in d else float(d["range_limit_uT"]) * 1e-6
        return cls(pos, int(d["rows"]), int(d["cols"]), limit)

    def same_as(self, other: "SensorArrayGeometry", atol=1e-12) -> bool:
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.positions.shape == other.positions.shape
            and bool(np.allclose(self.positions, other.positions, rtol=0, atol=atol))
        )


DEFAULT_GEOMETRY = SensorArrayGeometry.grid()


@dataclass(frozen=True)
class ArrayReading:
    flux: np.ndarray  # (N, 3) T
    saturated: bool = field(default=False, compare=False)

    def __post_init__(self):
        f = np.asarray(self.flux, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ContractError("flux must be (N, 3)")
        if not np.all(np.isfinite(f)):
            raise ContractError("flux must be finite")
        object.__setattr__(self, "flux", f)

    def vector(self) -> np.ndarray:
        """Sensor-major, component-minor flattening (48,)."""
        return self.flux.reshape(-1)


def simulate_flux(positions, headings, spec: MagnetSpec, geom: SensorArrayGeometry, saturate=False):
    """Batch field evaluation: (B, 3) poses -> (B, N, 3) flux in tesla."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    headings = np.asarray(headings, dtype=np.float64).reshape(-1, 3)
    x = geom.positions[None, :, :] - positions[:, None, :]
    r = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(r < 1e-9):
        sample, sensor = np.argwhere(r < 1e-9)[0]
        raise SingularFieldError(f"singular field point (pose {sample})", sensor_index=int(sensor))
    hx = np.einsum("bnk,bk->bn", x, headings)
    r3 = r**3
    flux = spec.bt * (3.0 * (hx / (r3 * r * r))[..., None] * x - headings[:, None, :] / r3[..., None])
    if saturate:
        np.clip(flux, -geom.range_limit, geom.range_limit, out=flux)
    return flux


def simulate_reading(pose: MagnetPose, spec: MagnetSpec, geom: SensorArrayGeometry, saturate: bool = False) -> ArrayReading:
    flux = field_at_points(pose.position, pose.heading, spec.bt, geom.positions)
    if saturate:
        flux = np.clip(flux, -geom.range_limit, geom.range_limit)
    return ArrayReading(flux, saturated=saturate)


def add_noise(reading: ArrayReading, sigma: float, rng_seed: int) -> ArrayReading:
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    if sigma == 0:
        return ArrayReading(reading.flux.copy(), reading.saturated)
    rng = np.random.default_rng(rng_seed)
    return ArrayReading(reading.flux + rng.normal(0.0, sigma, size=reading.flux.shape), reading.saturated)


def coordinate_channels(geom: SensorArrayGeometry) -> np.ndarray:
    """(3, rows, cols) scaled sensor coordinates."""
    return (geom.positions * COORD_SCALE).T.reshape(3, geom.rows, geom.cols)


def assemble_inputs(flux, geom: SensorArrayGeometry, include_coords: bool = True) -> np.ndarray:
    """Batch version of ``assemble_input``: (B, N, 3) tesla -> (B, 6, rows, cols) float32."""
    flux = np.asarray(flux)
    if flux.ndim != 3 or flux.shape[1:] != (geom.n_sensors, 3):
        raise ContractError(f"flux batch shape {flux.shape} does not match a {geom.n_sensors}-sensor array")
    b = flux.shape[0]
    out = np.zeros((b, 6, geom.rows, geom.cols), dtype=np.float32)
    out[:, :3] = (flux * FLUX_SCALE).transpose(0, 2, 1).reshape(b, 3, geom.rows, geom.cols)
    if include_coords:
        out[:, 3:] = coordinate_channels(geom)
    return out


def assemble_input(reading: ArrayReading, geom: SensorArrayGeometry, include_coords: bool = True) -> np.ndarray:
    """Single reading -> (6, rows, cols) input tensor (Bx, By, Bz, X, Y, Z)."""
    if reading.flux.shape != (geom.n_sensors, 3):
        raise ContractError("reading does not match geometry")
    return assemble_inputs(reading.flux[None], geom, include_coords)[0]


def flux_from_input(tensor: np.ndarray, geom: SensorArrayGeometry) -> np.ndarray:
    """Inverse of the flux half of ``assemble_input``: (6, rows, cols) -> (N, 3) tesla."""
    t = np.asarray(tensor, dtype=np.float64)
    return t[:3].reshape(3, geom.n_sensors).T / FLUX_SCALE
