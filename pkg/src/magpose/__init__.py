"""Permanent-magnet pose tracking from a planar magnetometer array."""
from .dipole import (
    DEFAULT_MAGNET,
    EulerAngles,
    MagnetPose,
    MagnetSpec,
    field_at_point,
    field_at_points,
    field_jacobian,
    heading_from_euler,
)
from .errors import ContractError, FormatError, MagposeError, NumericError, SingularFieldError
from .sensor_array import DEFAULT_GEOMETRY, ArrayReading, SensorArrayGeometry, assemble_input, simulate_reading

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MAGNET",
    "DEFAULT_GEOMETRY",
    "EulerAngles",
    "MagnetPose",
    "MagnetSpec",
    "SensorArrayGeometry",
    "ArrayReading",
    "field_at_point",
    "field_at_points",
    "field_jacobian",
    "heading_from_euler",
    "simulate_reading",
    "assemble_input",
    "MagposeError",
    "ContractError",
    "FormatError",
    "NumericError",
    "SingularFieldError",
]
