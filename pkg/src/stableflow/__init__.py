"""Stable motion policies learned as pullbacks of a straight-line latent field."""

from .core import (
    AffineNormalizer,
    DemonstrationSet,
    Trajectory,
    estimate_velocities,
    extract_goal,
    fit_normalizer,
    load_dataset,
    save_dataset,
)
from .dynamics import Potential, Rollout, VelocityField, eval_field, field_grid, rollout
from .flow import DiffeoModel, forward, inverse, jacobian, loss_gradient, pullback_velocity
from .metrics import MetricReport, dtwd, evaluate, frechet, rmse
from .train import TrainConfig, load_checkpoint, prepare, save_checkpoint, train

__version__ = "0.1.0"
