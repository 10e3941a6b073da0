"""Levenberg-Marquardt inversion of array readings to a 5-DOF magnet pose.

The unknowns are (a, b, c, m, n, p); the heading is carried as three free
components and renormalised after each trial step. Internally positions are
measured in units of ``position_scale`` metres so that the normal matrix is
reasonably conditioned.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .dipole import DEFAULT_MAGNET, MagnetPose, MagnetSpec, field_at_points, field_jacobian_points
from .errors import ContractError
from .sensor_array import DEFAULT_GEOMETRY, ArrayReading, SensorArrayGeometry


class FailureReason(str, enum.Enum):
    NONE = "none"
    MAX_ITERS = "max_iters"
    DIVERGED = "diverged"
    OUT_OF_BOUNDS = "out_of_bounds"
    SINGULAR = "singular"


@dataclass
class LmConfig:
    max_iterations: int = 200
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    step_tolerance: float = 1e-10  # scaled units
    residual_tolerance: float = 1e-30  # T^2
    divergence_factor: float = 10.0
    position_bound: float = 0.5  # m, per axis
    position_scale: float = 0.1  # m per internal unit
    max_damping: float = 1e16

    def __post_init__(self):
        vals = [
            self.max_iterations,
            self.initial_damping,
            self.damping_up,
            self.damping_down,
            self.step_tolerance,
            self.residual_tolerance,
            self.divergence_factor,
            self.position_bound,
            self.position_scale,
            self.max_damping,
        ]
        if any(not v > 0 for v in vals):
            raise ContractError("all LM settings must be positive")
        if not self.damping_up > 1 > self.damping_down:
            raise ContractError("need damping_up > 1 > damping_down")


@dataclass
class LmResult:
    pose: MagnetPose
    converged: bool
    iterations: int
    final_cost: float  # T^2
    failure_reason: FailureReason = FailureReason.NONE
    cost_history: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class InitialBias:
    position_offset: tuple  # m
    heading_offset: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(np.r_[self.position_offset, self.heading_offset])):
            raise ContractError("bias must be finite")

    @classmethod
    def from_mm(cls, values) -> "InitialBias":
        """(dx, dy, dz in mm, dm, dn, dp) -> bias."""
        v = [float(x) for x in values]
        if len(v) != 6:
            raise ContractError("bias needs six values")
        return cls(tuple(np.array(v[:3]) * 1e-3), tuple(v[3:]))

    def apply(self, truth: MagnetPose) -> MagnetPose:
        return MagnetPose.normalized(truth.position + np.asarray(self.position_offset), truth.heading + np.asarray(self.heading_offset))


BIAS1 = InitialBias.from_mm((3, 3, -3, 0.2, -0.2, 0.2))
BIAS2 = InitialBias.from_mm((20, -20, 20, 0.3, 0.3, -0.3))


def residuals(params, reading: ArrayReading, spec: MagnetSpec = DEFAULT_MAGNET, geom: SensorArrayGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Simulated minus measured flux, sensor-major (48,). ``params`` heading is used unnormalised."""
    params = np.asarray(params, dtype=np.float64)
    model = field_at_points(params[:3], params[3:], spec.bt, geom.positions)
    return (model - reading.flux).reshape(-1)


def lm_step(jac: np.ndarray, res: np.ndarray, damping: float, tangent_to=None, stiffness: float = 1e4) -> np.ndarray:
    """Solve (J^T J + damping * diag(J^T J)) delta = -J^T r.

    With ``tangent_to`` (the current unit heading) a stiff row
    ``w * h . delta_h = 0`` is appended, so the heading moves along the unit
    sphere instead of changing length.
    """
    a = jac.T @ jac
    g = jac.T @ res
    d = np.diag(a).copy()
    d[d <= 0] = np.finfo(float).tiny
    m = a + damping * np.diag(d)
    if tangent_to is not None:
        c = np.zeros(a.shape[0])
        c[3:] = tangent_to
        m = m + stiffness * np.max(d) * np.outer(c, c)
    return np.linalg.solve(m, -g)


class _Problem:
    def __init__(self, reading, spec, geom, scale):
        self.flux = reading.flux
        self.bt = spec.bt
        self.sensors = geom.positions
        self.s = np.array([scale, scale, scale, 1.0, 1.0, 1.0])

    def unscale(self, x):
        return x * self.s

    def residual(self, x):
        p = x * self.s
        return (field_at_points(p[:3], p[3:], self.bt, self.sensors) - self.flux).reshape(-1)

    def jacobian(self, x):
        p = x * self.s
        j = field_jacobian_points(p[:3], p[3:], self.bt, self.sensors).reshape(-1, 6)
        return j * self.s


def _renormalize(x):
    n = np.linalg.norm(x[3:])
    if not np.isfinite(n) or n < 1e-12:
        return None
    y = x.copy()
    y[3:] /= n
    return y


def solve(
    reading: ArrayReading,
    initial: MagnetPose,
    config: LmConfig | None = None,
    spec: MagnetSpec = DEFAULT_MAGNET,
    geom: SensorArrayGeometry = DEFAULT_GEOMETRY,
) -> LmResult:
    config = config or LmConfig()
    if reading.flux.shape != (geom.n_sensors, 3):
        raise ContractError("reading does not match geometry")
    prob = _Problem(reading, spec, geom, config.position_scale)
    x = initial.as_vector() / prob.s
    try:
        r = prob.residual(x)
    except ValueError:
        return LmResult(initial, False, 0, float("inf"), FailureReason.SINGULAR)
    cost = float(r @ r)
    lam = config.initial_damping
    history = [cost]
    jac = None
    reason = FailureReason.MAX_ITERS
    it = 0

    def finish(x, converged, reason):
        p = prob.unscale(x)
        return LmResult(MagnetPose.normalized(p[:3], p[3:]), converged, it, cost, reason, history)

    if np.any(np.abs(initial.position) > config.position_bound):
        return finish(x, False, FailureReason.OUT_OF_BOUNDS)

    while it < config.max_iterations:
        if cost <= config.residual_tolerance:
            reason = FailureReason.NONE
            break
        it += 1
        if jac is None:
            jac = prob.jacobian(x)
        try:
            delta = lm_step(jac, r, lam, tangent_to=x[3:])
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            lam *= config.damping_up
            if lam > config.max_damping:
                return finish(x, False, FailureReason.SINGULAR)
            continue
        cand = _renormalize(x + delta)
        cand_cost = np.inf
        if cand is not None:
            try:
                r_new = prob.residual(cand)
                cand_cost = float(r_new @ r_new)
            except ValueError:
                pass
        # measured after renormalisation: the radial heading part of delta is never taken
        step = float(np.linalg.norm(cand - x)) if cand is not None else np.inf
        if cand_cost < cost:
            x, r, cost = cand, r_new, cand_cost
            history.append(cost)
            jac = None
            lam = max(lam * config.damping_down, 1e-300)
            if np.any(np.abs(x[:3] * prob.s[:3]) > config.position_bound):
                return finish(x, False, FailureReason.OUT_OF_BOUNDS)
            if step < config.step_tolerance:
                reason = FailureReason.NONE
                break
        else:
            lam *= config.damping_up
            if step < config.step_tolerance:
                # no descent possible from here: a stationary point
                reason = FailureReason.NONE
                break
            if lam > config.max_damping:
                reason = FailureReason.NONE
                break

    if reason is FailureReason.NONE:
        # a stationary point that leaves a large part of the signal unexplained is a failed fit
        signal = float(np.sum(reading.flux**2))
        if cost * config.divergence_factor**2 > signal:
            return finish(x, False, FailureReason.DIVERGED)
        return finish(x, True, FailureReason.NONE)
    return finish(x, False, reason)


def apply_bias(truth: MagnetPose, bias: InitialBias) -> MagnetPose:
    return bias.apply(truth)


@dataclass
class BatchStats:
    results: list
    count: int
    failures: int
    failure_rate: float | None  # None for an empty batch
    position_mm_mean: float | None
    position_mm_std: float | None
    angle_deg_mean: float | None
    angle_deg_std: float | None
    position_errors_mm: np.ndarray = field(repr=False, default=None)
    angle_errors_deg: np.ndarray = field(repr=False, default=None)


def batch_solve(
    truths,
    readings,
    bias: InitialBias,
    config: LmConfig | None = None,
    spec: MagnetSpec = DEFAULT_MAGNET,
    geom: SensorArrayGeometry = DEFAULT_GEOMETRY,
) -> BatchStats:
    """Solve each reading from its biased ground truth; error statistics over converged cases."""
    from .evalbench import pose_errors

    truths = list(truths)
    readings = list(readings)
    if len(truths) != len(readings):
        raise ContractError("truths and readings must align")
    results, pos_err, ang_err = [], [], []
    for truth, reading in zip(truths, readings):
        if not isinstance(reading, ArrayReading):
            reading = ArrayReading(reading)
        res = solve(reading, bias.apply(truth), config, spec, geom)
        results.append(res)
        e = pose_errors(res.pose, truth)
        pos_err.append(e.position_error * 1e3)
        ang_err.append(np.degrees(e.angle_error))
    pos_err = np.asarray(pos_err)
    ang_err = np.asarray(ang_err)
    ok = np.array([r.converged for r in results], dtype=bool)
    n = len(results)
    failures = int(n - ok.sum())

    def stat(fn, v):
        return float(fn(v[ok])) if ok.any() else None

    return BatchStats(
        results=results,
        count=n,
        failures=failures,
        failure_rate=failures / n if n else None,
        position_mm_mean=stat(np.mean, pos_err),
        position_mm_std=stat(np.std, pos_err),
        angle_deg_mean=stat(np.mean, ang_err),
        angle_deg_std=stat(np.std, ang_err),
        position_errors_mm=pos_err,
        angle_errors_deg=ang_err,
    )
