"""Synthetic goal-directed demonstrations for hermetic experiments.

Every shape is a planar curve ``p(u)``, ``u in [0, 1]``, inside roughly the
unit box and ending at the common goal ``p(1)``. Curves are traversed at
constant speed, so positions and velocities are exact before jitter.
"""

from __future__ import annotations

import numpy as np

from .core import DemonstrationSet, Trajectory

_TAU = 2.0 * np.pi


def _scurve(u):
    p = np.stack([-0.5 * np.sin(_TAU * u), 0.5 - u], axis=-1)
    dp = np.stack([-0.5 * _TAU * np.cos(_TAU * u), -np.ones_like(u)], axis=-1)
    return p, dp


def _sine(u):
    w = 3.0 * np.pi
    p = np.stack([u - 0.5, 0.3 * np.sin(w * u)], axis=-1)
    dp = np.stack([np.ones_like(u), 0.3 * w * np.cos(w * u)], axis=-1)
    return p, dp


def _spiral(u):
    turns = 1.25 * _TAU
    r = 0.5 * (1.0 - u)
    th = turns * u
    p = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    dp = np.stack(
        [-0.5 * np.cos(th) - r * turns * np.sin(th), -0.5 * np.sin(th) + r * turns * np.cos(th)],
        axis=-1,
    )
    return p, dp


SHAPES = {"scurve": _scurve, "sine": _sine, "spiral": _spiral}


def constant_speed_curve(shape: str, points: int, speed: float = 1.0):
    """Sample ``shape`` at ``points`` equally spaced times at constant ``speed``.

    Returns ``(t, x, xdot)``.
    """
    curve = SHAPES[shape]
    grid = np.linspace(0.0, 1.0, 20001)
    _, dp = curve(grid)
    rate = np.linalg.norm(dp, axis=1)
    arc = np.concatenate([[0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * np.diff(grid))])
    t = np.linspace(0.0, arc[-1] / speed, points)
    u = np.interp(speed * t, arc, grid)
    u[-1] = 1.0
    x, dx = curve(u)
    xdot = speed * dx / np.linalg.norm(dx, axis=1, keepdims=True)
    return t, x, xdot


def synthesize(shape="scurve", count=7, points=1000, noise=0.0, seed=0, speed=1.0):
    """``count`` jittered copies of one constant-speed curve.

    Jitter is isotropic Gaussian with standard deviation ``noise`` per
    coordinate, truncated at a norm of ``3 * noise``; velocities are the
    noise-free ones.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; choose from {sorted(SHAPES)}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if points < 10:
        raise ValueError("points must be >= 10")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    t, x, xdot = constant_speed_curve(shape, points, speed)
    trajs = []
    for _ in range(count):
        jitter = noise * rng.standard_normal(x.shape)
        norm = np.linalg.norm(jitter, axis=1, keepdims=True)
        cap = 3.0 * noise
        over = norm > cap
        if np.any(over):
            jitter = np.where(over, jitter * cap / np.where(over, norm, 1.0), jitter)
        trajs.append(Trajectory(t, x + jitter, xdot))
    return DemonstrationSet(tuple(trajs))
