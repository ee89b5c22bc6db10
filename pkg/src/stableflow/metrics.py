"""Reproduction-accuracy metrics: RMSE, dynamic time warping, discrete Frechet."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist

from .core import DemonstrationSet
from .dynamics import VelocityField, rollout_many
from .errors import DimensionMismatch, EmptySequence, LengthMismatch


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise EmptySequence("metric inputs must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"point dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    if len(a) != len(b):
        raise LengthMismatch(f"RMSE needs equal lengths, got {len(a)} and {len(b)}")
    return math.sqrt(float(np.mean(np.sum((a - b) ** 2, axis=1))))


@njit(cache=True, nogil=True)
def _dtw_table(cost):
    p, q = cost.shape
    acc = np.empty((p, q))
    acc[0, 0] = cost[0, 0]
    for i in range(1, p):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
    for j in range(1, q):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
    for i in range(1, p):
        for j in range(1, q):
            acc[i, j] = cost[i, j] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    return acc


@njit(cache=True, nogil=True)
def _frechet_table(cost):
    # Eiter & Mannila recursion
    p, q = cost.shape
    acc = np.empty((p, q))
    acc[0, 0] = cost[0, 0]
    for i in range(1, p):
        acc[i, 0] = max(acc[i - 1, 0], cost[i, 0])
    for j in range(1, q):
        acc[0, j] = max(acc[0, j - 1], cost[0, j])
    for i in range(1, p):
        for j in range(1, q):
            acc[i, j] = max(min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]), cost[i, j])
    return acc


def dtwd(a, b) -> float:
    """Dynamic time warping distance: summed Euclidean cost of the best monotone alignment."""
    a, b = _pair(a, b)
    return float(_dtw_table(cdist(a, b))[-1, -1])


def frechet(a, b) -> float:
    """Discrete Frechet distance."""
    a, b = _pair(a, b)
    return float(_frechet_table(cdist(a, b))[-1, -1])


@dataclass
class MetricReport:
    rmse: float
    dtwd: float
    avg_dtwd: float
    frechet: float
    T: int
    rollout_len: int
    converged: bool


def compare(demo, repro, rollout_len=None, converged=True) -> MetricReport:
    """All metrics for one demonstration against an equally sampled reproduction."""
    T = len(demo)
    d = dtwd(demo, repro)
    return MetricReport(rmse(demo, repro), d, d / T, frechet(demo, repro), T,
                        len(repro) if rollout_len is None else rollout_len, converged)


def worker_count() -> int:
    """Worker cap from ``STABLEFLOW_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("STABLEFLOW_THREADS", "1")))
    except ValueError:
        return 1


def reproduce(field: VelocityField, data: DemonstrationSet, dt: float = 1e-2):
    """Roll out from every demonstration's first point.

    Returns ``(samples, rollouts)`` where ``samples[i]`` is the rollout
    interpolated at demonstration ``i``'s timestamps, in original
    coordinates. Rollouts continue past the demonstration's duration until
    they converge or exceed 1.5 times their latent distance in time.
    """
    norm = field.model.normalizer
    x0 = norm.normalize(np.array([tr.x[0] for tr in data]))
    reach = 1.5 * field.latent_distance(x0)
    horizon = max(max(tr.duration for tr in data), float(np.max(reach)))
    max_steps = int(math.ceil(horizon / dt)) + 10
    rollouts = rollout_many(field, x0, dt, max_steps, "rk4")
    samples = []
    for tr, ro in zip(data, rollouts):
        rel = tr.t - tr.t[0]
        xs = np.column_stack([np.interp(rel, ro.t, ro.x[:, j]) for j in range(ro.x.shape[1])])
        samples.append(norm.denormalize(xs))
    return samples, rollouts


def evaluate(model, data: DemonstrationSet, dt: float = 1e-2, field: VelocityField | None = None):
    """Per-demonstration metrics in the data's original units."""
    field = field or VelocityField(model)
    samples, rollouts = reproduce(field, data, dt)
    jobs = [(tr.x, s, len(ro.x), ro.converged) for tr, s, ro in zip(data, samples, rollouts)]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda job: compare(*job), jobs))
    return [compare(*job) for job in jobs]


REPORT_COLUMNS = ["demo_index", "rmse", "dtwd", "avg_dtwd", "frechet", "T"]


def save_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for i, r in enumerate(reports):
            w.writerow([i, repr(r.rmse), repr(r.dtwd), repr(r.avg_dtwd), repr(r.frechet), r.T])


def summarize(reports) -> dict:
    out = {}
    for key in ("rmse", "dtwd", "avg_dtwd", "frechet"):
        vals = np.array([getattr(r, key) for r in reports])
        out[key] = {"mean": float(np.mean(vals)), "median": float(np.median(vals))}
    return out


def report_dicts(reports):
    return [asdict(r) for r in reports]
