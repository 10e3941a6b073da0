"""Pose error metrics, per-height error reports, stress readings and latency benchmarks."""
from __future__ import annotations

import csv
import math
import os
import platform
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import BOUNDARY_HEADINGS
from .dipole import DEFAULT_MAGNET, MagnetPose, MagnetSpec
from .errors import ContractError
from .lm_solver import InitialBias, LmConfig, solve
from .sensor_array import DEFAULT_GEOMETRY, ArrayReading, SensorArrayGeometry, simulate_flux

DEFAULT_HEIGHTS_MM = tuple(range(40, 121, 10))


@dataclass(frozen=True)
class PoseErrors:
    position_error: float  # m
    orientation_error: float  # |dh|, in [0, 2]
    angle_error: float  # rad

    @property
    def position_mm(self) -> float:
        return self.position_error * 1e3

    @property
    def angle_deg(self) -> float:
        return math.degrees(self.angle_error)


def orientation_to_angle(e_o):
    """Chord length between unit headings -> angle in radians."""
    return 2.0 * np.arcsin(np.clip(np.asarray(e_o, dtype=np.float64) / 2.0, 0.0, 1.0))


def pose_errors(predicted: MagnetPose, truth: MagnetPose) -> PoseErrors:
    hp = predicted.heading / np.linalg.norm(predicted.heading)
    ht = truth.heading / np.linalg.norm(truth.heading)
    e_p = float(np.linalg.norm(predicted.position - truth.position))
    e_o = float(np.linalg.norm(hp - ht))
    return PoseErrors(e_p, e_o, float(orientation_to_angle(e_o)))


def pose_errors_batch(pred_pos, pred_head, true_pos, true_head):
    """Vectorised metrics: returns (E_p in m, E_O, angle in rad) arrays."""
    hp = pred_head / np.linalg.norm(pred_head, axis=1, keepdims=True)
    ht = true_head / np.linalg.norm(true_head, axis=1, keepdims=True)
    e_p = np.linalg.norm(pred_pos - true_pos, axis=1)
    e_o = np.linalg.norm(hp - ht, axis=1)
    return e_p, e_o, orientation_to_angle(e_o)


# --------------------------------------------------------------------------- methods under test


class NetworkMethod:
    """Adapter: a PosePredictor as an estimation method. A pose is a failure only if non-finite."""

    name = "mobileposenet"

    def __init__(self, predictor):
        self.predictor = predictor

    def estimate(self, flux, truths=None):
        pos, head = self.predictor.predict_batch(flux)
        ok = np.all(np.isfinite(pos), axis=1) & np.all(np.isfinite(head), axis=1)
        return pos, head, ok

    def single(self, reading: ArrayReading, truth=None):
        return self.predictor(reading)


class LmMethod:
    """Adapter: LM solves started from ground truth plus a fixed bias."""

    def __init__(self, bias: InitialBias, config: LmConfig | None = None, spec: MagnetSpec = DEFAULT_MAGNET,
                 geom: SensorArrayGeometry = DEFAULT_GEOMETRY, workers: int = 1, name: str = "lm"):
        self.bias = bias
        self.config = config or LmConfig()
        self.spec = spec
        self.geom = geom
        self.workers = workers
        self.name = name

    def single(self, reading: ArrayReading, truth: MagnetPose):
        return solve(reading, self.bias.apply(truth), self.config, self.spec, self.geom)

    def estimate(self, flux, truths):
        flux = np.asarray(flux, dtype=np.float64)
        truths = np.asarray(truths, dtype=np.float64)
        if truths is None or len(truths) != len(flux):
            raise ContractError("LM evaluation needs one ground-truth pose per reading")

        def one(i):
            return self.single(ArrayReading(flux[i]), MagnetPose.normalized(truths[i, :3], truths[i, 3:]))

        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(one, range(len(flux))))
        else:
            results = [one(i) for i in range(len(flux))]
        pos = np.array([r.pose.position for r in results]).reshape(-1, 3)
        head = np.array([r.pose.heading for r in results]).reshape(-1, 3)
        ok = np.array([r.converged for r in results], dtype=bool)
        return pos, head, ok


class TruthMethod:
    """Returns the ground truth; useful as a harness self-check."""

    name = "truth"

    def estimate(self, flux, truths):
        t = np.asarray(truths, dtype=np.float64)
        return t[:, :3].copy(), t[:, 3:].copy(), np.ones(len(t), dtype=bool)


# --------------------------------------------------------------------------- reports


@dataclass
class BucketStats:
    label: str
    center_mm: float | None
    count: int
    failures: int
    position_mm_mean: float | None
    position_mm_std: float | None
    angle_deg_mean: float | None
    angle_deg_std: float | None


@dataclass
class ErrorReport:
    method: str
    buckets: list
    overall: BucketStats
    samples: dict = field(repr=False)  # column name -> array, one entry per sample

    def failure_rate(self) -> float | None:
        return self.overall.failures / self.overall.count if self.overall.count else None


def _stats(label, center, pos_mm, ang_deg, ok) -> BucketStats:
    n = len(ok)
    good = np.asarray(ok, dtype=bool)

    def m(v):
        return float(np.mean(v[good])) if good.any() else None

    def s(v):
        return float(np.std(v[good])) if good.any() else None

    return BucketStats(label, center, n, int(n - good.sum()), m(pos_mm), s(pos_mm), m(ang_deg), s(ang_deg))


def bucket_labels(heights_mm, centers_mm=DEFAULT_HEIGHTS_MM):
    """Nearest centre within half a spacing; anything else is 'other'."""
    centers = np.asarray(centers_mm, dtype=np.float64)
    half = (np.min(np.diff(centers)) / 2) if len(centers) > 1 else np.inf
    heights = np.asarray(heights_mm, dtype=np.float64)
    nearest = np.abs(heights[:, None] - centers[None, :]).argmin(axis=1)
    inside = np.abs(heights - centers[nearest]) <= half + 1e-9
    return np.where(inside, nearest, -1)


def aggregate(method_name, samples: dict, centers_mm=DEFAULT_HEIGHTS_MM) -> ErrorReport:
    pos, ang, ok = samples["position_error_mm"], samples["angle_error_deg"], samples["converged"].astype(bool)
    which = bucket_labels(samples["height_mm"], centers_mm)
    buckets = []
    for k, c in enumerate(centers_mm):
        sel = which == k
        buckets.append(_stats(f"{c:g}mm", float(c), pos[sel], ang[sel], ok[sel]))
    sel = which == -1
    if sel.any():
        buckets.append(_stats("other", None, pos[sel], ang[sel], ok[sel]))
    return ErrorReport(method_name, buckets, _stats("all", None, pos, ang, ok), samples)


def evaluate(method, truths, flux, centers_mm=DEFAULT_HEIGHTS_MM) -> ErrorReport:
    """Run ``method`` over readings and bucket its errors by true magnet height."""
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 6)
    flux = np.asarray(flux, dtype=np.float64)
    if len(truths) == 0:
        empty = {k: np.zeros(0) for k in SAMPLE_COLUMNS}
        empty["converged"] = np.zeros(0, dtype=bool)
        return aggregate(getattr(method, "name", "method"), empty, centers_mm)
    pos, head, ok = method.estimate(flux, truths)
    e_p, _e_o, ang = pose_errors_batch(pos, head, truths[:, :3], truths[:, 3:])
    unit = head / np.linalg.norm(head, axis=1, keepdims=True)
    samples = {
        "true_a_mm": truths[:, 0] * 1e3,
        "true_b_mm": truths[:, 1] * 1e3,
        "true_c_mm": truths[:, 2] * 1e3,
        "true_m": truths[:, 3],
        "true_n": truths[:, 4],
        "true_p": truths[:, 5],
        "pred_a_mm": pos[:, 0] * 1e3,
        "pred_b_mm": pos[:, 1] * 1e3,
        "pred_c_mm": pos[:, 2] * 1e3,
        "pred_m": unit[:, 0],
        "pred_n": unit[:, 1],
        "pred_p": unit[:, 2],
        "position_error_mm": e_p * 1e3,
        "angle_error_deg": np.degrees(ang),
        "height_mm": truths[:, 2] * 1e3,
        "converged": ok.astype(bool),
    }
    return aggregate(getattr(method, "name", "method"), samples, centers_mm)


SAMPLE_COLUMNS = (
    "true_a_mm", "true_b_mm", "true_c_mm", "true_m", "true_n", "true_p",
    "pred_a_mm", "pred_b_mm", "pred_c_mm", "pred_m", "pred_n", "pred_p",
    "position_error_mm", "angle_error_deg", "height_mm", "converged",
)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_samples_csv(path, report: ErrorReport, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        cols = [report.samples[c] for c in SAMPLE_COLUMNS]
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def read_samples_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    data = {c: [] for c in SAMPLE_COLUMNS}
    for row in reader:
        for c in SAMPLE_COLUMNS:
            data[c].append(float(row[c]))
    out = {c: np.asarray(v, dtype=np.float64) for c, v in data.items()}
    out["converged"] = out["converged"].astype(bool)
    return out


REPORT_COLUMNS = (
    "method", "bucket", "center_mm", "count", "failures",
    "position_mm_mean", "position_mm_std", "angle_deg_mean", "angle_deg_std",
)


def write_report_csv(path_or_file, reports, header_comment: str | None = None):
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for b in [*rep.buckets, rep.overall]:
                d = asdict(b)
                w.writerow([rep.method, d["label"]] + [_fmt(d[k]) for k in REPORT_COLUMNS[2:]])
    finally:
        if own:
            fh.close()


# --------------------------------------------------------------------------- stress readings


def pseudo_real_flux(truths, spec: MagnetSpec = DEFAULT_MAGNET, geom: SensorArrayGeometry = DEFAULT_GEOMETRY,
                     noise_sigma: float = 1e-6, saturate: bool = True, sensor_bias_sigma: float = 0.0, seed: int = 0):
    """Theory + optional fixed per-sensor offsets + Gaussian noise, clamped at the sensor range.

    Stands in for hardware readings: the clamp is applied last, as a physical
    magnetometer would.
    """
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 6)
    flux = simulate_flux(truths[:, :3], truths[:, 3:], spec, geom)
    rng = np.random.default_rng(seed)
    if sensor_bias_sigma > 0:
        flux = flux + rng.normal(0.0, sensor_bias_sigma, size=(1, geom.n_sensors, 3))
    if noise_sigma > 0:
        flux = flux + rng.normal(0.0, noise_sigma, size=flux.shape)
    if saturate:
        flux = np.clip(flux, -geom.range_limit, geom.range_limit)
    return flux


def workspace_grid(heights_mm=DEFAULT_HEIGHTS_MM, extent_mm=45.0, step_mm=15.0, headings=BOUNDARY_HEADINGS) -> np.ndarray:
    """Calibration-board style poses: an x/y lattice per height, each with every listed heading."""
    xs = np.arange(-extent_mm, extent_mm + 1e-9, step_mm)
    rows = []
    for z in heights_mm:
        for x in xs:
            for y in xs:
                for h in headings:
                    rows.append([x * 1e-3, y * 1e-3, z * 1e-3, *h])
    return np.asarray(rows, dtype=np.float64)


# --------------------------------------------------------------------------- latency


@dataclass
class LatencyReport:
    method: str
    mean_ms: float
    median_ms: float
    p99_ms: float
    iterations: int
    warmup: int
    environment: dict = field(default_factory=dict)


def environment_descriptor() -> dict:
    import numpy
    import torch

    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "cpu_count": os.cpu_count(),
        "batch_size": 1,
    }


def benchmark_latency(name, fn, fixtures, iterations: int = 100, warmup: int = 10) -> LatencyReport:
    """Time ``fn(fixture)`` one call at a time, cycling through ``fixtures``; warmup calls are discarded."""
    if iterations < 30 or warmup < 5:
        raise ContractError("need iterations >= 30 and warmup >= 5")
    fixtures = list(fixtures)
    if not fixtures:
        raise ContractError("no fixtures to time")
    for i in range(warmup):
        fn(fixtures[i % len(fixtures)])
    times = []
    for i in range(iterations):
        fx = fixtures[i % len(fixtures)]
        t0 = time.perf_counter_ns()
        fn(fx)
        times.append((time.perf_counter_ns() - t0) / 1e6)
    times.sort()
    p99 = times[min(len(times) - 1, int(math.ceil(0.99 * len(times))) - 1)]
    return LatencyReport(name, statistics.fmean(times), statistics.median(times), p99, iterations, warmup, environment_descriptor())
