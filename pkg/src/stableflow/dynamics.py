"""Latent potentials, the pulled-back velocity field, and rollouts.

The field lives in normalized coordinates. Points whose latent image is
within ``eps_goal`` of the latent goal are declared converged and get zero
velocity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AtGoal, DimensionMismatch, NonFinite
from .flow import EPS_GOAL, POTENTIALS, DiffeoModel, forward, potential_pullback


@dataclass(frozen=True, eq=False)
class Potential:
    kind: str
    goal_y: np.ndarray

    def __post_init__(self):
        if self.kind not in POTENTIALS:
            raise ValueError(f"unknown potential {self.kind!r}")

    def value(self, y):
        r = np.linalg.norm(np.asarray(y) - self.goal_y, axis=-1)
        return r if self.kind == "euclidean" else 0.5 * r * r


def latent_velocity(potential: Potential, y) -> np.ndarray:
    """Negative gradient of the potential: unit vectors toward the goal, or ``-(y - y*)``."""
    d = np.asarray(y, dtype=float) - potential.goal_y
    if potential.kind == "quadratic":
        return -d
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(r == 0):
        raise AtGoal("the Euclidean potential has no gradient at the goal")
    return -d / r


class VelocityField:
    """``f(x) = J(x)^-1 (-grad Phi)(psi(x))`` with a dead zone around the goal."""

    def __init__(self, model: DiffeoModel, potential: str | None = None, eps_goal: float = EPS_GOAL):
        if not eps_goal > 0:
            raise ValueError("eps_goal must be positive")
        self.model = model
        self.kind = potential or model.potential
        self.eps_goal = eps_goal

    @property
    def potential(self) -> Potential:
        return Potential(self.kind, self.model.goal_y)

    @property
    def dim(self) -> int:
        return self.model.dim

    def __call__(self, x):
        return eval_field(self, x)

    def latent_distance(self, x):
        return np.linalg.norm(forward(self.model, x) - self.model.goal_y, axis=-1)


def _eval_with_latent(field: VelocityField, x, dead_zone=True):
    """Field values plus latent distances for a batch ``(N, n)``.

    Without the dead zone the field is only zeroed exactly at the goal.
    """
    radius = field.eps_goal if dead_zone else 0.0
    f, r = potential_pullback(field.model, x, field.kind, radius)
    if not np.all(np.isfinite(f)):
        raise NonFinite("velocity field evaluation overflowed")
    return f, r


def eval_field(field: VelocityField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != field.dim:
        raise DimensionMismatch(f"expected points of dimension {field.dim}, got {x.shape}")
    f, _ = _eval_with_latent(field, x.reshape(-1, field.dim))
    return f.reshape(x.shape)


@dataclass
class Rollout:
    t: np.ndarray  # (T,)
    x: np.ndarray  # (T, n)
    converged: bool
    steps: int
    latent_distance: np.ndarray  # (T,)

    @property
    def states(self):
        return list(zip(self.t, self.x))


def rollout_many(field: VelocityField, x0, dt: float = 1e-2, max_steps: int = 10_000,
                 method: str = "rk4") -> list[Rollout]:
    """Integrate several starts together; each stops once it enters the goal ball.

    Under the Euclidean potential the latent point moves at unit speed, so
    a start at latent distance ``r < dt + eps_goal`` enters the ball during
    the coming step. That step is shortened to ``r - eps_goal / 2`` (landing
    inside the ball, where the flow is at rest) and the result is recorded
    at the regular grid time. Without this the unit-speed field, which is
    discontinuous at the goal, makes fixed-step schemes chatter around it.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if method not in ("rk4", "euler"):
        raise ValueError(f"unknown integration method {method!r}")
    x = np.array(x0, dtype=float).reshape(-1, field.dim)
    B = len(x)
    eps = field.eps_goal
    paths = [[row.copy()] for row in x]
    dists = [[] for _ in range(B)]
    converged = np.zeros(B, dtype=bool)
    steps = np.zeros(B, dtype=int)
    active = np.arange(B)

    def f(z):
        return _eval_with_latent(field, z, dead_zone=False)[0]

    for _ in range(max_steps + 1):
        xa = x[active]
        k1, r = _eval_with_latent(field, xa, dead_zone=False)
        for i, ri in zip(active, r):
            dists[i].append(ri)
        done = r <= eps
        converged[active[done]] = True
        keep = ~done & (steps[active] < max_steps)
        active, xa, k1, r = active[keep], xa[keep], k1[keep], r[keep]
        if active.size == 0:
            break
        h = np.full(len(active), dt)
        if field.kind == "euclidean":
            last = r < dt + eps
            h[last] = r[last] - 0.5 * eps
        h = h[:, None]
        if method == "euler":
            xn = xa + h * k1
        else:
            k2 = f(xa + 0.5 * h * k1)
            k3 = f(xa + 0.5 * h * k2)
            k4 = f(xa + h * k3)
            xn = xa + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        x[active] = xn
        steps[active] += 1
        for i, row in zip(active, xn):
            paths[i].append(row.copy())

    out = []
    for i in range(B):
        xs = np.array(paths[i])
        out.append(Rollout(dt * np.arange(len(xs)), xs, bool(converged[i]), int(steps[i]),
                           np.array(dists[i])))
    return out


def rollout(field: VelocityField, x0, dt: float = 1e-2, max_steps: int = 10_000,
            method: str = "rk4") -> Rollout:
    """Integrate ``x' = f(x)`` from ``x0`` (normalized coordinates)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (field.dim,):
        raise DimensionMismatch(f"x0 must have shape ({field.dim},)")
    return rollout_many(field, x0[None], dt, max_steps, method)[0]


def field_grid(field: VelocityField, bounds, resolution: int, fixed=None, axes=(0, 1)):
    """Sample the field on a regular grid in original data coordinates.

    Parameters
    ----------
    bounds : ((lo1, hi1), (lo2, hi2))
        Box spanned by the two grid axes.
    resolution : int
        Samples per axis; the grid has ``resolution**2`` points.
    fixed : array_like, optional
        Full-length point supplying the coordinates off the grid axes.
        Required when the model dimension is not 2.
    axes : pair of int
        Which coordinates the grid spans.

    Returns
    -------
    positions, velocities : (resolution**2, 2) arrays
        Row-major: the second axis varies fastest.
    """
    n = field.dim
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if n != 2 and fixed is None:
        raise DimensionMismatch(f"a {n}-dimensional field needs fixed values for the other coordinates")
    base = np.zeros(n) if fixed is None else np.asarray(fixed, dtype=float)
    if base.shape != (n,):
        raise DimensionMismatch(f"fixed point must have length {n}")
    (lo1, hi1), (lo2, hi2) = bounds
    g1, g2 = np.meshgrid(np.linspace(lo1, hi1, resolution), np.linspace(lo2, hi2, resolution),
                         indexing="ij")
    pts = np.tile(base, (resolution * resolution, 1))
    pts[:, axes[0]] = g1.ravel()
    pts[:, axes[1]] = g2.ravel()
    norm = field.model.normalizer
    vel = norm.denormalize_velocity(eval_field(field, norm.normalize(pts)))
    ax = list(axes)
    return pts[:, ax], vel[:, ax]


def save_grid_csv(path, positions, velocities) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "v1", "v2"])
        for p, v in zip(positions, velocities):
            w.writerow([repr(float(c)) for c in (*p, *v)])


def save_rollout_csv(path, t, x) -> None:
    x = np.asarray(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(x.shape[1])])
        for ti, xi in zip(t, x):
            w.writerow([repr(float(ti))] + [repr(float(c)) for c in xi])
