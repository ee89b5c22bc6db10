"""Trajectories, demonstration sets, normalization and velocity estimation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFile,
    DataError,
    DegenerateExtent,
    DimensionMismatch,
    TooShort,
)

EXTENT_TOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped positions, optionally with velocities.

    Attributes
    ----------
    t : (T,) array
        Strictly increasing timestamps in seconds.
    x : (T, n) array
        Positions.
    xdot : (T, n) array or None
        Velocities aligned with ``x``.
    """

    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray | None = None

    def __post_init__(self):
        t = _frozen(self.t)
        x = _frozen(self.x)
        if t.ndim != 1 or x.ndim != 2 or len(t) != len(x):
            raise DimensionMismatch(
                f"expected t of shape (T,) and x of shape (T, n); got {t.shape}, {x.shape}"
            )
        if len(t) == 0:
            raise TooShort("trajectory has no samples")
        if x.shape[1] < 2:
            raise DimensionMismatch(f"positions must have dimension >= 2, got {x.shape[1]}")
        if np.any(np.diff(t) <= 0):
            raise DataError("timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        if self.xdot is not None:
            v = _frozen(self.xdot)
            if v.shape != x.shape:
                raise DimensionMismatch(
                    f"velocities shape {v.shape} does not match positions {x.shape}"
                )
            object.__setattr__(self, "xdot", v)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])


@dataclass(frozen=True, eq=False)
class DemonstrationSet:
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise DataError("a demonstration set needs at least one trajectory")
        dims = {tr.dim for tr in trajs}
        if len(dims) != 1:
            raise DimensionMismatch(f"trajectories disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "trajectories", trajs)

    @property
    def dim(self) -> int:
        return self.trajectories[0].dim

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def all_positions(self) -> np.ndarray:
        return np.concatenate([tr.x for tr in self.trajectories])


@dataclass(frozen=True, eq=False)
class AffineNormalizer:
    """Per-dimension affine map ``x -> scale * x + offset``.

    Velocities only pick up the scale.
    """

    scale: np.ndarray
    offset: np.ndarray = field(default=None)

    def __post_init__(self):
        scale = _frozen(self.scale)
        offset = _frozen(np.zeros_like(scale) if self.offset is None else self.offset)
        if scale.shape != offset.shape or scale.ndim != 1:
            raise DimensionMismatch("scale and offset must be vectors of equal length")
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise DataError("normalizer scale must be finite and strictly positive")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "offset", offset)

    @property
    def dim(self) -> int:
        return len(self.scale)

    @classmethod
    def identity(cls, n):
        return cls(np.ones(n), np.zeros(n))

    def normalize(self, x):
        return np.asarray(x, dtype=float) * self.scale + self.offset

    def denormalize(self, y):
        return (np.asarray(y, dtype=float) - self.offset) / self.scale

    def normalize_velocity(self, v):
        return np.asarray(v, dtype=float) * self.scale

    def denormalize_velocity(self, v):
        return np.asarray(v, dtype=float) / self.scale

    def apply(self, traj: Trajectory) -> Trajectory:
        xdot = None if traj.xdot is None else self.normalize_velocity(traj.xdot)
        return Trajectory(traj.t, self.normalize(traj.x), xdot)

    def apply_set(self, data: DemonstrationSet) -> DemonstrationSet:
        return DemonstrationSet(tuple(self.apply(tr) for tr in data))

    def to_dict(self):
        return {"scale": self.scale.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["scale"], dtype=float), np.asarray(d["offset"], dtype=float))


def fit_normalizer(data: DemonstrationSet) -> AffineNormalizer:
    """Map the bounding box of all demonstrated positions onto [-0.5, 0.5]^n."""
    pts = data.all_positions()
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    bad = np.flatnonzero(extent < EXTENT_TOL)
    if bad.size:
        raise DegenerateExtent(
            f"dimension(s) {bad.tolist()} have constant coordinates; drop or jitter them"
        )
    center = 0.5 * (lo + hi)
    scale = 1.0 / extent
    return AffineNormalizer(scale, -center * scale)


def estimate_velocities(traj: Trajectory) -> Trajectory:
    """Fill velocities by finite differences.

    Interior samples use the three-point central formula for nonuniform
    spacing (exact for quadratics); the endpoints use one-sided first-order
    differences.
    """
    if len(traj) < 3:
        raise TooShort(f"need at least 3 samples to estimate velocities, got {len(traj)}")
    t, x = traj.t, traj.x
    v = np.empty_like(x)
    h1 = (t[1:-1] - t[:-2])[:, None]
    h2 = (t[2:] - t[1:-1])[:, None]
    v[1:-1] = (
        -h2 / (h1 * (h1 + h2)) * x[:-2]
        + (h2 - h1) / (h1 * h2) * x[1:-1]
        + h1 / (h2 * (h1 + h2)) * x[2:]
    )
    v[0] = (x[1] - x[0]) / (t[1] - t[0])
    v[-1] = (x[-1] - x[-2]) / (t[-1] - t[-2])
    return Trajectory(t, x, v)


def extract_goal(data: DemonstrationSet) -> np.ndarray:
    """Mean of the final positions of all trajectories."""
    return np.mean([tr.x[-1] for tr in data], axis=0)


def with_velocities(data: DemonstrationSet) -> DemonstrationSet:
    return DemonstrationSet(
        tuple(tr if tr.xdot is not None else estimate_velocities(tr) for tr in data)
    )


# -- file formats -------------------------------------------------------------


def dataset_to_dict(data: DemonstrationSet) -> dict:
    trajs = []
    for tr in data:
        d = {"t": tr.t.tolist(), "x": tr.x.tolist()}
        if tr.xdot is not None:
            d["xdot"] = tr.xdot.tolist()
        trajs.append(d)
    return {"dim": data.dim, "trajectories": trajs}


def dataset_from_dict(d: dict) -> DemonstrationSet:
    try:
        dim = int(d["dim"])
        trajs = [
            Trajectory(
                np.asarray(item["t"], dtype=float),
                np.asarray(item["x"], dtype=float).reshape(len(item["t"]), -1),
                None if item.get("xdot") is None else np.asarray(item["xdot"], dtype=float),
            )
            for item in d["trajectories"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"malformed trajectory file: {exc}") from exc
    data = DemonstrationSet(tuple(trajs))
    if data.dim != dim:
        raise DimensionMismatch(f"file declares dim={dim} but trajectories have dim={data.dim}")
    return data


def save_dataset(data: DemonstrationSet, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(data)))


def load_dataset(path) -> DemonstrationSet:
    """Load a demonstration set from JSON, or a single trajectory from CSV."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return DemonstrationSet((load_trajectory_csv(path),))
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: not valid JSON ({exc})") from exc
    return dataset_from_dict(d)


def load_trajectory_csv(path) -> Trajectory:
    """Read ``t,x1..xn[,v1..vn]`` rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CorruptFile(f"{path}: empty CSV") from None
        rows = [r for r in reader if r]
    if not header or header[0] != "t":
        raise CorruptFile(f"{path}: first column must be 't'")
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    vcols = [i for i, h in enumerate(header) if h.startswith("v")]
    if vcols and len(vcols) != len(xcols):
        raise DimensionMismatch(f"{path}: {len(xcols)} position columns but {len(vcols)} velocity columns")
    try:
        arr = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise CorruptFile(f"{path}: ragged rows")
    xdot = arr[:, vcols] if vcols else None
    return Trajectory(arr[:, 0], arr[:, xcols], xdot)


def save_trajectory_csv(traj: Trajectory, path) -> None:
    n = traj.dim
    header = ["t"] + [f"x{i + 1}" for i in range(n)]
    cols = [traj.t[:, None], traj.x]
    if traj.xdot is not None:
        header += [f"v{i + 1}" for i in range(n)]
        cols.append(traj.xdot)
    rows = np.hstack(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
