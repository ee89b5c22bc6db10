"""Command-line entry point: ``stableflow {synth,train,eval,rollout,field}``.

Exit codes: 0 success, 1 bad data or arguments, 2 numerical failure,
3 file errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import core, dynamics, metrics, synth
from .errors import DimensionMismatch, StableFlowError
from .train import TrainConfig, load_checkpoint, load_training_state, prepare, train

EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse's default exit status 2 would collide with the numeric-failure code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_DATA, f"{self.prog}: error: {message}\n")


def _train_overrides(args) -> dict:
    mapping = {
        "K": args.K, "m": args.m, "lengthscale": args.lengthscale,
        "learning_rate": args.lr, "l2_coeff": args.l2, "epochs": args.epochs,
        "batch_size": args.batch_size, "seed": args.seed, "eps_goal": args.eps_goal,
        "potential": args.potential,
    }
    return {k: v for k, v in mapping.items() if v is not None}


def cmd_synth(args):
    data = synth.synthesize(args.shape, args.count, args.points, args.noise, args.seed, args.speed)
    core.save_dataset(data, args.output)
    print(f"wrote {len(data)} {args.shape} trajectories to {args.output}")


def cmd_train(args):
    cfg_dict = {}
    if args.config:
        cfg_dict.update(json.loads(Path(args.config).read_text()))
    cfg_dict.update(_train_overrides(args))
    cfg = TrainConfig.from_dict(cfg_dict)
    data = core.load_dataset(args.data)
    model, batch = prepare(data, cfg)
    adam, start = None, 0
    if args.resume:
        model, adam, start = load_training_state(args.resume)
    print("config " + json.dumps(cfg.to_dict(), sort_keys=True))
    print(f"samples={len(batch.x)} dropped={batch.dropped} params={model.n_params}")
    report = train(model, batch, cfg, adam=adam, start_epoch=start, log_path=args.log,
                   checkpoint_path=args.checkpoint, checkpoint_every=args.checkpoint_every,
                   model_path=args.output)
    report_path = args.report or str(Path(args.output).with_suffix(".report.json"))
    Path(report_path).write_text(json.dumps(report.to_dict(), indent=1))
    print(f"final_loss={report.final_loss!r} data_loss={report.final_data_loss!r} "
          f"wall={report.wall_time:.1f}s model={args.output}")


def cmd_eval(args):
    model = load_checkpoint(args.model)
    data = core.load_dataset(args.data)
    reports = metrics.evaluate(model, data, args.dt)
    metrics.save_report_csv(args.output, reports)
    for key, stats in metrics.summarize(reports).items():
        print(f"{key}: mean={stats['mean']!r} median={stats['median']!r}")
    print(f"converged={sum(r.converged for r in reports)}/{len(reports)}")


def cmd_rollout(args):
    model = load_checkpoint(args.model)
    field = dynamics.VelocityField(model)
    norm = model.normalizer
    x0 = np.asarray(args.x0, dtype=float)
    if x0.shape != (model.dim,):
        raise DimensionMismatch(f"--x0 needs {model.dim} values")
    ro = dynamics.rollout(field, norm.normalize(x0), args.dt, args.max_steps, args.method)
    dynamics.save_rollout_csv(args.output, ro.t, norm.denormalize(ro.x))
    print(f"converged={str(ro.converged).lower()} steps={ro.steps}")


def cmd_field(args):
    model = load_checkpoint(args.model)
    field = dynamics.VelocityField(model)
    ax = tuple(args.axes)
    if args.bounds:
        lo1, hi1, lo2, hi2 = args.bounds
        bounds = ((lo1, hi1), (lo2, hi2))
    else:
        # the demonstrations' box padded by 10% on each side
        corners = model.normalizer.denormalize(np.array([[-0.6] * model.dim, [0.6] * model.dim]))
        bounds = tuple((corners[0, a], corners[1, a]) for a in ax)
    pos, vel = dynamics.field_grid(field, bounds, args.resolution, args.slice, ax)
    dynamics.save_grid_csv(args.output, pos, vel)
    print(f"wrote {len(pos)} grid samples to {args.output}")


def build_parser():
    p = _Parser(prog="stableflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic demonstrations")
    s.add_argument("--shape", choices=sorted(synth.SHAPES), default="scurve")
    s.add_argument("--count", type=int, default=7)
    s.add_argument("--points", type=int, default=1000)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--speed", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit a stable field to demonstrations")
    t.add_argument("data")
    t.add_argument("-o", "--output", required=True, help="model JSON")
    t.add_argument("--log", help="per-epoch CSV log")
    t.add_argument("--report", help="training report JSON (default: next to the model)")
    t.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    t.add_argument("--K", type=int)
    t.add_argument("--m", type=int)
    t.add_argument("--lengthscale", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--l2", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--eps-goal", type=float)
    t.add_argument("--potential", choices=["euclidean", "quadratic"])
    t.add_argument("--checkpoint", help="periodic checkpoint path")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score reproductions against demonstrations")
    e.add_argument("model")
    e.add_argument("data")
    e.add_argument("--dt", type=float, default=1e-2)
    e.add_argument("-o", "--output", required=True, help="metrics CSV")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="integrate the learned field from a start point")
    r.add_argument("model")
    r.add_argument("--x0", type=float, nargs="+", required=True)
    r.add_argument("--dt", type=float, default=1e-2)
    r.add_argument("--max-steps", type=int, default=10_000)
    r.add_argument("--method", choices=["rk4", "euler"], default="rk4")
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_rollout)

    f = sub.add_parser("field", help="export the velocity field on a grid")
    f.add_argument("model")
    f.add_argument("--bounds", type=float, nargs=4, metavar=("LO1", "HI1", "LO2", "HI2"))
    f.add_argument("--resolution", type=int, default=25)
    f.add_argument("--slice", type=float, nargs="+",
                   help="full-length point fixing the coordinates off the grid axes")
    f.add_argument("--axes", type=int, nargs=2, default=[0, 1])
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_field)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_DATA
    try:
        args.func(args)
    except StableFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
