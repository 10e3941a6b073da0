"""Closed-form magnetic dipole forward model.

All quantities are SI: metres, tesla, radians. ``bt`` is the lumped dipole
strength in T*m^3, i.e. ``mu_r * mu_0 * pi * r^2 * l * M / (4 * pi)``. Catalogue
values quoted in T*cm^3 (for instance 8.18e-2 for a 10 x 10 mm N35 cylinder)
convert with ``bt_from_tesla_cm3``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, SingularFieldError

SINGULAR_RADIUS = 1e-9  # m
HEADING_NORM_TOL = 1e-9


def bt_from_tesla_cm3(value: float) -> float:
    return value * 1e-6


@dataclass(frozen=True)
class MagnetSpec:
    bt: float  # T*m^3
    radius: float  # m
    length: float  # m

    def __post_init__(self):
        if not (self.bt > 0 and self.radius > 0 and self.length > 0):
            raise ContractError("MagnetSpec requires bt, radius and length > 0")

    def to_dict(self) -> dict:
        return {"bt": self.bt, "radius": self.radius, "length": self.length}

    @classmethod
    def from_dict(cls, d: dict) -> "MagnetSpec":
        return cls(bt=float(d["bt"]), radius=float(d["radius"]), length=float(d["length"]))


# 10 mm diameter x 10 mm long N35 cylinder used on the reference rig.
DEFAULT_MAGNET = MagnetSpec(bt=bt_from_tesla_cm3(8.18e-2), radius=0.005, length=0.010)


@dataclass(frozen=True)
class MagnetPose:
    """5-DOF magnet state: centre position (m) and unit magnetisation heading."""

    position: np.ndarray
    heading: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        head = np.asarray(self.heading, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(head))):
            raise ContractError("MagnetPose fields must be finite")
        if abs(np.linalg.norm(head) - 1.0) > HEADING_NORM_TOL:
            raise ContractError(f"heading must be unit norm, got |h|={np.linalg.norm(head)!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "heading", head)

    @classmethod
    def normalized(cls, position, heading) -> "MagnetPose":
        """Build a pose, rescaling ``heading`` to unit length first."""
        head = np.asarray(heading, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(head)
        if not norm > 0:
            raise ContractError("heading has zero length")
        return cls(position, head / norm)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.heading])

    @classmethod
    def from_vector(cls, v) -> "MagnetPose":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls.normalized(v[:3], v[3:])


@dataclass(frozen=True)
class EulerAngles:
    yaw_varphi: float
    pitch_theta: float
    roll_phi: float = 0.0


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(angles: EulerAngles) -> np.ndarray:
    """R = Rot(z, roll) @ Rot(y, pitch) @ Rot(x, yaw)."""
    return _rot_z(angles.roll_phi) @ _rot_y(angles.pitch_theta) @ _rot_x(angles.yaw_varphi)


def heading_from_euler(angles: EulerAngles) -> np.ndarray:
    h = rotation_matrix(angles)[:, 2]
    return h / np.linalg.norm(h)


def headings_from_angles(yaw, pitch, roll=None) -> np.ndarray:
    """Vectorised ``heading_from_euler``: arrays of angles -> (..., 3) unit headings.

    Expands the third column of Rot(z, roll) Rot(y, pitch) Rot(x, yaw).
    """
    yaw = np.asarray(yaw, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    roll = np.zeros_like(yaw) if roll is None else np.asarray(roll, dtype=np.float64)
    # Rot(x, yaw) e_z = (0, -sin yaw, cos yaw)
    v0 = np.zeros_like(yaw)
    v1 = -np.sin(yaw)
    v2 = np.cos(yaw)
    # Rot(y, pitch)
    w0 = np.cos(pitch) * v0 + np.sin(pitch) * v2
    w1 = v1
    w2 = -np.sin(pitch) * v0 + np.cos(pitch) * v2
    # Rot(z, roll)
    h0 = np.cos(roll) * w0 - np.sin(roll) * w1
    h1 = np.sin(roll) * w0 + np.cos(roll) * w1
    h = np.stack([h0, h1, w2], axis=-1)
    return h / np.linalg.norm(h, axis=-1, keepdims=True)


def _offsets(position, points):
    x = np.asarray(points, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    r = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(r < SINGULAR_RADIUS):
        bad = np.flatnonzero(np.atleast_1d(r) < SINGULAR_RADIUS)
        raise SingularFieldError(sensor_index=int(bad[0]) if x.ndim > 1 else None)
    return x, r


def field_at_points(position, heading, bt: float, points) -> np.ndarray:
    """Dipole flux density (T) at each row of ``points`` (..., 3)."""
    x, r = _offsets(position, points)
    h = np.asarray(heading, dtype=np.float64)
    hx = x @ h
    r3 = r**3
    r5 = r3 * r * r
    return bt * (3.0 * (hx / r5)[..., None] * x - h / r3[..., None])


def field_at_point(pose: MagnetPose, spec: MagnetSpec, point) -> np.ndarray:
    return field_at_points(pose.position, pose.heading, spec.bt, np.asarray(point, dtype=np.float64).reshape(3))


def field_componentwise(pose: MagnetPose, spec: MagnetSpec, point) -> np.ndarray:
    """Scalar component-by-component evaluation of the dipole field.

    Kept deliberately unvectorised; tests use it to cross-check the vector form.
    """
    a, b, c = (float(v) for v in pose.position)
    m, n, p = (float(v) for v in pose.heading)
    xi, yi, zi = (float(v) for v in point)
    dx, dy, dz = xi - a, yi - b, zi - c
    r = (dx * dx + dy * dy + dz * dz) ** 0.5
    if r < SINGULAR_RADIUS:
        raise SingularFieldError()
    dot = m * dx + n * dy + p * dz
    bx = spec.bt * (3.0 * dot * dx / r**5 - m / r**3)
    by = spec.bt * (3.0 * dot * dy / r**5 - n / r**3)
    bz = spec.bt * (3.0 * dot * dz / r**5 - p / r**3)
    return np.array([bx, by, bz])


def field_jacobian_points(position, heading, bt: float, points) -> np.ndarray:
    """Analytic d(B)/d(a, b, c, m, n, p) at each point, shape (..., 3, 6)."""
    x, r = _offsets(position, points)
    h = np.asarray(heading, dtype=np.float64)
    u = x @ h
    r2 = r * r
    ir3 = 1.0 / (r2 * r)
    ir5 = ir3 / r2
    ir7 = ir5 / r2
    eye = np.eye(3)
    xx = x[..., :, None] * x[..., None, :]
    # dB_i/dX_k = bt (3 H_k X_i / R^5 + 3 u d_ik / R^5 - 15 u X_i X_k / R^7 + 3 H_i X_k / R^5)
    d_dx = bt * (
        3.0 * ir5[..., None, None] * (x[..., :, None] * h[None, :] + h[:, None] * x[..., None, :])
        + 3.0 * (u * ir5)[..., None, None] * eye
        - 15.0 * (u * ir7)[..., None, None] * xx
    )
    d_dh = bt * (3.0 * ir5[..., None, None] * xx - ir3[..., None, None] * eye)
    return np.concatenate([-d_dx, d_dh], axis=-1)


def field_jacobian(pose: MagnetPose, spec: MagnetSpec, point) -> np.ndarray:
    return field_jacobian_points(pose.position, pose.heading, spec.bt, np.asarray(point, dtype=np.float64).reshape(3))
