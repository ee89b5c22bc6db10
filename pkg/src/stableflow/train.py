"""Fitting the diffeomorphism to demonstrations with ADAM."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import DemonstrationSet, extract_goal, fit_normalizer, with_velocities
from .errors import CorruptFile, EmptyBatch, NonFinite
from .flow import EPS_GOAL, POTENTIALS, DiffeoModel, forward, loss_gradient


@dataclass
class TrainConfig:
    K: int = 10
    m: int = 200
    lengthscale: float = 0.45
    learning_rate: float = 1e-4
    l2_coeff: float = 1e-8
    epochs: int = 2000
    batch_size: int | None = None  # None trains full-batch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    eps_goal: float = EPS_GOAL
    potential: str = "euclidean"

    def __post_init__(self):
        for name in ("K", "m", "lengthscale", "learning_rate", "eps_adam", "eps_goal"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.l2_coeff < 0 or self.epochs < 0:
            raise ValueError("l2_coeff and epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if self.potential not in POTENTIALS:
            raise ValueError(f"potential must be one of {POTENTIALS}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)

    def update(self, theta, grad, cfg: TrainConfig):
        """Return the parameters after one bias-corrected ADAM step."""
        self.step += 1
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad * grad
        m_hat = self.m / (1.0 - cfg.beta1 ** self.step)
        v_hat = self.v / (1.0 - cfg.beta2 ** self.step)
        return theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)

    def to_dict(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "step": self.step}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["m"], dtype=float), np.asarray(d["v"], dtype=float), int(d["step"]))


class Batch(NamedTuple):
    x: np.ndarray
    xdot: np.ndarray
    dropped: int = 0


@dataclass
class TrainReport:
    losses: list[float]
    grad_norms: list[float]
    final_loss: float
    final_data_loss: float
    wall_time: float
    config: dict
    dropped: int = 0
    model_path: str | None = None
    start_epoch: int = 0
    wall_ms: list[float] = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)


def prepare(data: DemonstrationSet, cfg: TrainConfig):
    """Normalize the data and build an identity-initialized model.

    Returns ``(model, batch)``; ``batch.dropped`` counts samples discarded
    for sitting inside the goal ball.
    """
    data = with_velocities(data)
    normalizer = fit_normalizer(data)
    normed = normalizer.apply_set(data)
    goal = extract_goal(normed)
    model = DiffeoModel.create(data.dim, cfg.K, cfg.m, cfg.lengthscale, cfg.seed,
                               normalizer, goal, cfg.potential)
    x = np.concatenate([tr.x for tr in normed])
    xdot = np.concatenate([tr.xdot for tr in normed])
    keep = np.linalg.norm(forward(model, x) - model.goal_y, axis=1) > cfg.eps_goal
    if not np.any(keep):
        raise EmptyBatch("every sample lies inside the goal ball")
    return model, Batch(x[keep], xdot[keep], int(np.sum(~keep)))


def _check_finite(epoch, loss, grad, theta):
    if not np.isfinite(loss):
        raise NonFinite(f"loss became non-finite at epoch {epoch}", epoch)
    if not np.all(np.isfinite(grad)):
        raise NonFinite(f"gradient became non-finite at epoch {epoch}", epoch)
    if theta is not None and not np.all(np.isfinite(theta)):
        raise NonFinite(f"weights became non-finite at epoch {epoch}", epoch)


def _minibatches(n, cfg, epoch):
    if cfg.batch_size is None or cfg.batch_size >= n:
        return [slice(None)]
    # keyed on (seed, epoch) so a resumed run shuffles identically
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def train(model: DiffeoModel, batch, cfg: TrainConfig, adam: AdamState | None = None,
          start_epoch: int = 0, log_path=None, checkpoint_path=None,
          checkpoint_every: int | None = None, model_path=None, callback=None) -> TrainReport:
    """Run ADAM on the velocity-matching loss from ``start_epoch`` to ``cfg.epochs``.

    ``callback(epoch, model)`` is called after every optimizer epoch.
    """
    x, xdot = np.asarray(batch[0]), np.asarray(batch[1])
    dropped = batch[2] if len(batch) > 2 else 0
    adam = adam if adam is not None else AdamState.zeros(model.n_params)
    losses, norms, wall = [], [], []
    t_start = time.perf_counter()
    log = None
    if log_path is not None:
        log = open(log_path, "a" if start_epoch else "w", newline="")
        writer = csv.writer(log)
        if not start_epoch:
            writer.writerow(["epoch", "loss", "grad_norm", "wall_ms"])
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            epoch_loss, epoch_norm, parts = 0.0, 0.0, _minibatches(len(x), cfg, epoch)
            for idx in parts:
                theta = model.params()
                loss, grad = loss_gradient(model, (x[idx], xdot[idx]), cfg.l2_coeff,
                                           cfg.eps_goal, cfg.potential)
                _check_finite(epoch, loss, grad, None)
                theta = adam.update(theta, grad, cfg)
                _check_finite(epoch, loss, grad, theta)
                model.set_params(theta)
                epoch_loss += loss
                epoch_norm += float(np.linalg.norm(grad))
            losses.append(epoch_loss / len(parts))
            norms.append(epoch_norm / len(parts))
            wall.append(1e3 * (time.perf_counter() - t0))
            if log is not None:
                writer.writerow([epoch + 1, repr(losses[-1]), repr(norms[-1]), f"{wall[-1]:.3f}"])
            if checkpoint_path is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path, adam, epoch + 1)
            if callback is not None:
                callback(epoch + 1, model)
    finally:
        if log is not None:
            log.close()
    final_loss, _ = loss_gradient(model, (x, xdot), cfg.l2_coeff, cfg.eps_goal, cfg.potential)
    final_data, _ = loss_gradient(model, (x, xdot), 0.0, cfg.eps_goal, cfg.potential)
    if model_path is not None:
        save_checkpoint(model, model_path, adam, max(cfg.epochs, start_epoch))
    return TrainReport(losses, norms, final_loss, final_data, time.perf_counter() - t_start,
                       cfg.to_dict(), dropped, None if model_path is None else str(model_path),
                       start_epoch, wall)


def baseline_loss(x, xdot, goal) -> float:
    """Velocity loss of the untrained (identity) model, computed directly from data."""
    d = np.asarray(x) - goal
    straight = -d / np.linalg.norm(d, axis=1, keepdims=True)
    return float(np.mean(np.sum((np.asarray(xdot) - straight) ** 2, axis=1)))


# -- checkpoints -----------------------------------------------------------------


def checkpoint_dict(model: DiffeoModel, adam: AdamState | None = None, epoch: int = 0) -> dict:
    d = model.to_dict()
    d["epoch"] = int(epoch)
    if adam is not None:
        d["adam"] = adam.to_dict()
    return d


def save_checkpoint(model: DiffeoModel, path, adam: AdamState | None = None, epoch: int = 0) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, adam, epoch)))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: not valid JSON ({exc})") from exc


def load_checkpoint(path) -> DiffeoModel:
    return DiffeoModel.from_dict(_read_json(path))


def load_training_state(path):
    """Return ``(model, adam_state_or_None, epoch)`` for resuming."""
    d = _read_json(path)
    model = DiffeoModel.from_dict(d)
    adam = AdamState.from_dict(d["adam"]) if "adam" in d else None
    if adam is not None and adam.m.shape != (model.n_params,):
        raise CorruptFile("optimizer state does not match the model size")
    return model, adam, int(d.get("epoch", 0))
