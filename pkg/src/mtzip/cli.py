"""Command-line interface: train, zip, eval, inspect and curve.

Every command prints line-delimited ``key=value`` records. Options can also be
read from a JSON file (``--config``) whose keys are the option names; flags
given on the command line win. Exit status is 0 on success, 2 for invalid
configuration and 1 for errors raised while running the pipeline.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .hessian import DEFAULT_CALIBRATION_SIZE, CalibrationSet
from .model import Network, ZippedModel, load_model, save_model
from .trainer import RetrainSchedule, TrainConfig, build, permute_hidden_units, train
from .zipper import MergePlan, PlanError, ZipReport, sharing_curve, zip_many

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# option parsing helpers


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _lr_steps(text) -> tuple:
    """``"7000:0.03,9000:0.01"`` -> ((7000, 0.03), (9000, 0.01))."""
    if not text:
        return ()
    steps = []
    for item in str(text).split(","):
        try:
            start, rate = item.split(":")
            steps.append((int(start), float(rate)))
        except ValueError:
            raise ConfigError(f"bad learning-rate step {item!r}; use ITERATION:RATE") from None
    return tuple(steps)


def _schedule(text, n_hidden: int) -> RetrainSchedule:
    text = str(text)
    if text.startswith("proportional"):
        total = 550
        if ":" in text:
            total = int(text.split(":", 1)[1])
        return RetrainSchedule.proportional(n_hidden, total)
    counts = _int_list(text)
    if len(counts) == 1:
        counts = counts * n_hidden
    if len(counts) != n_hidden:
        raise ConfigError(f"retrain schedule has {len(counts)} entries for {n_hidden} hidden layers")
    return RetrainSchedule(counts)


def _add_data_options(p):
    p.add_argument("--data", help=f"MNIST directory with the four IDX files (default: ${data_mod.DATA_DIR_ENV})")
    p.add_argument("--synthetic", help="JSON file of synthetic task specs; used instead of MNIST")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtzip", description="Merge pre-trained networks by layer-wise neuron sharing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a single-task model")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--arch", help="mlp-H1-H2..., lenet5 or resmlp-WIDTH-INNER-BLOCKS")
    p.add_argument("--task", help="synthetic task name (with --synthetic)")
    p.add_argument("--task-id", help="task id stored in the model (default: task name or 'mnist')")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=10500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-steps", default="7000:0.03", help="ITERATION:RATE,... piecewise-constant rates")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--no-permute", action="store_true", help="keep hidden units in training order")
    p.add_argument("--log", help="write training records to this file")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", help="model file to write")
    _add_data_options(p)

    p = sub.add_parser("zip", help="zip two or more models")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("models", nargs="*", help="model files (at least two)")
    p.add_argument("--out", help="joint model file to write")
    p.add_argument("--report", help="also write the report to this file")
    p.add_argument("--share", default="full", choices=("full", "none", "counts", "thresholds"))
    p.add_argument("--counts", help="shared units per hidden layer, comma-separated")
    p.add_argument("--thresholds", help="functional-difference thresholds per hidden layer")
    p.add_argument("--alpha", type=float, help="weight of the first side's layer error")
    p.add_argument("--policy", default="greedy", choices=("greedy", "exhaustive"))
    p.add_argument("--retrain-schedule", "--retrain", default="proportional:550",
                   help="iterations per hidden layer (N1,N2,...), one N for all, or proportional[:TOTAL]")
    p.add_argument("--retrain-lr", type=float, default=0.1)
    p.add_argument("--retrain-lr-steps", default="")
    p.add_argument("--retrain-batch", type=int, default=64)
    p.add_argument("--calib-size", type=int, default=DEFAULT_CALIBRATION_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figures", help="directory for report figures")
    p.add_argument("--log", help="write per-layer and retraining records to this file")
    _add_data_options(p)

    p = sub.add_parser("eval", help="per-task test error of a model")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("model", nargs="?")
    p.add_argument("--task", help="only this task")
    p.add_argument("--split", default="test", choices=("train", "test"))
    _add_data_options(p)

    p = sub.add_parser("inspect", help="dump the structure of a model file")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("model", nargs="?")

    p = sub.add_parser("curve", help="error against shared units in one layer, MTZ vs random")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("models", nargs="*", help="two model files")
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--points", help="comma-separated shared counts (default: 0..width in 6 steps)")
    p.add_argument("--policy", default="exhaustive", choices=("greedy", "exhaustive"))
    p.add_argument("--calib-size", type=int, default=DEFAULT_CALIBRATION_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figures", help="directory for the figure")
    _add_data_options(p)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        subparser.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# data


def _mnist_dir(args) -> Path:
    directory = data_mod.find_mnist(args.data)
    if directory is None:
        where = args.data or f"${data_mod.DATA_DIR_ENV}"
        raise ConfigError(f"MNIST IDX files not found (looked in {where}); pass --data DIR")
    return directory


class _Data:
    """Train/test datasets per task name, loaded lazily."""

    def __init__(self, args):
        self.synthetic = None
        self.mnist = None
        if args.synthetic:
            try:
                specs = data_mod.load_task_specs(args.synthetic)
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"cannot read synthetic spec {args.synthetic}: {exc}") from None
            self.synthetic = data_mod.gen_correlated_tasks(specs)
        else:
            self.mnist_dir = _mnist_dir(args)

    def get(self, task) -> data_mod.TaskData:
        if self.synthetic is not None:
            if task not in self.synthetic:
                raise ConfigError(f"task {task!r} not in the synthetic spec ({', '.join(self.synthetic)})")
            return self.synthetic[task]
        if self.mnist is None:
            self.mnist = data_mod.TaskData(
                data_mod.load_mnist(self.mnist_dir, "train"), data_mod.load_mnist(self.mnist_dir, "test")
            )
        return self.mnist


def _emit(out, **fields):
    print(" ".join(f"{k}={v}" for k, v in fields.items()), file=out)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, out) -> int:
    if not args.arch or not args.out:
        raise ConfigError("train needs --arch and --out")
    if args.iterations < 0 or args.batch_size < 1 or not args.lr > 0:
        raise ConfigError("need iterations >= 0, batch size >= 1 and a positive learning rate")
    data = _Data(args)
    if data.synthetic is not None and not args.task:
        raise ConfigError("--synthetic needs --task")
    task_data = data.get(args.task)
    task_id = args.task_id or args.task or "mnist"
    train_set = task_data.train
    n_out = train_set.n_classes
    try:
        net = build(args.arch, train_set.dim, n_out, args.seed, task_id)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        iterations=args.iterations,
        seed=args.seed,
        lr_steps=_lr_steps(args.lr_steps),
        log_every=args.log_every,
    )
    log = open(args.log, "w") if args.log else None
    try:
        net = train(net, train_set, cfg, log=log, eval_data=task_data.test if log else None)
    finally:
        if log:
            log.close()
    if not args.no_permute:
        net = permute_hidden_units(net, np.random.default_rng([args.seed, 7]))
    save_model(net, args.out)
    err = data_mod.evaluate(net, None, task_data.test)
    _emit(out, model=args.out, task=task_id, arch=args.arch, params=net.parameter_count(), test_error=f"{err:.6f}")
    return EXIT_OK


def _load_networks(paths):
    """Load single-task models; repeated task ids get a ``.N`` suffix.

    Returns the networks and, per network, the task whose data it uses.
    """
    nets, sources, seen = [], [], {}
    for path in paths:
        net = load_model(path)
        if not isinstance(net, Network):
            raise ConfigError(f"{path} holds a joint model; zip expects single-task models")
        base = net.task_id
        seen[base] = seen.get(base, 0) + 1
        if seen[base] > 1:
            net.task_id = f"{base}.{seen[base]}"
        nets.append(net)
        sources.append(base)
    return nets, sources


def cmd_zip(args, out) -> int:
    if len(args.models) < 2:
        raise ConfigError("zip needs at least two model files")
    if not args.out:
        raise ConfigError("zip needs --out")
    if args.calib_size < 1:
        raise ConfigError("calibration size must be positive")
    nets, sources = _load_networks(args.models)
    n_hidden = nets[0].depth - 1
    try:
        plan = MergePlan(
            share=args.share,
            counts=_int_list(args.counts) if args.counts else None,
            thresholds=_float_list(args.thresholds) if args.thresholds else None,
            alpha=args.alpha,
            retrain=_schedule(args.retrain_schedule, n_hidden),
            policy=args.policy,
            train=TrainConfig(
                learning_rate=args.retrain_lr,
                batch_size=args.retrain_batch,
                iterations=0,
                seed=args.seed,
                lr_steps=_lr_steps(args.retrain_lr_steps),
            ),
        )
        plan.check_depth(n_hidden)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    data = _Data(args)
    per_task = {net.task_id: data.get(src) for net, src in zip(nets, sources)}
    calibs = {
        t: CalibrationSet.from_dataset(d.train, args.calib_size, args.seed + i, t)
        for i, (t, d) in enumerate(per_task.items())
    }
    train_data = {t: d.train for t, d in per_task.items()}
    eval_data = {t: d.test for t, d in per_task.items()}
    report = ZipReport()
    log = open(args.log, "w") if args.log else None
    try:
        zm = zip_many(nets, calibs, plan, train_data=train_data, eval_data=eval_data, report=report, log=log)
    finally:
        if log:
            log.close()
    save_model(zm, args.out)
    text = report.text()
    out.write(text)
    if args.report:
        Path(args.report).write_text(text)
    if args.figures:
        from .plotting import plot_zip_report

        path = plot_zip_report(report, Path(args.figures) / "zip_report.png")
        _emit(out, record="figure", path=path)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    if not args.model:
        raise ConfigError("eval needs a model file")
    model = load_model(args.model)
    data = _Data(args)
    tasks = model.tasks if isinstance(model, ZippedModel) else [model.task_id]
    if args.task:
        if args.task not in tasks:
            raise ConfigError(f"task {args.task!r} not in model ({', '.join(tasks)})")
        tasks = [args.task]
    for t in tasks:
        source = t.rsplit(".", 1)[0] if data.synthetic is not None and t not in data.synthetic else t
        ds = getattr(data.get(source), args.split)
        err = data_mod.evaluate(model, t, ds)
        _emit(out, task=t, split=args.split, samples=len(ds), error=f"{err:.6f}")
    return EXIT_OK


def _density(layer) -> float:
    if layer.mask is None or layer.mask.size == 0:
        return 1.0
    return float(layer.mask.mean())


def _joint_density(zm: ZippedModel, k: int) -> float:
    """Fraction of structurally used weights that the sparsity mask keeps."""
    layer = zm.layers[k]
    used = zm.used_entries(k)
    if layer.mask is None:
        return 1.0
    structural = (zm.in_members(k).astype(np.int64) @ zm.members[k].T.astype(np.int64)) > 0
    total = int(structural.sum()) * layer.rows_per_unit
    return float(used.sum()) / total if total else 1.0


def cmd_inspect(args, out) -> int:
    if not args.model:
        raise ConfigError("inspect needs a model file")
    model = load_model(args.model)
    if isinstance(model, Network):
        _emit(out, record="model", type="network", task=model.task_id, input_dim=model.input_dim,
              depth=model.depth, params=model.parameter_count())
        for k, layer in enumerate(model.layers):
            _emit(out, record="layer", layer=k + 1, kind=layer.kind, rows=layer.weights.shape[0],
                  units=layer.out_units, params=layer.parameter_count(), mask_density=f"{_density(layer):.4f}")
        return EXIT_OK
    _emit(out, record="model", type="zipped", tasks=",".join(model.tasks), depth=model.depth,
          params=model.parameter_count())
    for t in model.tasks:
        _emit(out, record="task", task=t, input_dim=model.input_dims[model.task_index(t)],
              params=model.task_network(t).parameter_count())
    for k, layer in enumerate(model.layers):
        members = model.members[k]
        shared = int((members.sum(axis=1) > 1).sum())
        used = model.used_entries(k)
        fields = dict(
            record="layer", layer=k + 1, kind=layer.kind, units=layer.out_units, shared=shared,
            shared_fraction=f"{shared / layer.out_units:.4f}",
            params=int(used.sum()) + layer.out_units,
            mask_density=f"{_joint_density(model, k):.4f}",
        )
        if model.n_tasks == 2 and k < model.depth - 1:
            view = model.shared_layer(k)
            blocks = {
                "w_hat_a": view.w_hat_a, "w_tilde_a": view.w_tilde_a, "w_tilde": view.w_tilde,
                "w_tilde_b": view.w_tilde_b, "w_hat_b": view.w_hat_b,
            }
            fields.update({name: "x".join(map(str, b.shape)) for name, b in blocks.items()})
            fields["block_entries"] = sum(b.size for b in blocks.values())
        _emit(out, **fields)
    return EXIT_OK


def cmd_curve(args, out) -> int:
    if len(args.models) != 2:
        raise ConfigError("curve needs exactly two model files")
    nets, sources = _load_networks(args.models)
    width = min(n.layers[args.layer - 1].out_units for n in nets) if 1 <= args.layer < nets[0].depth else None
    if width is None:
        raise ConfigError(f"layer {args.layer} is not a hidden layer")
    points = _int_list(args.points) if args.points else sorted({round(width * f) for f in np.linspace(0, 1, 6)})
    if any(p < 0 or p > width for p in points):
        raise ConfigError(f"points must lie in 0..{width}")
    data = _Data(args)
    per_task = {n.task_id: data.get(src) for n, src in zip(nets, sources)}
    calibs = [CalibrationSet.from_dataset(per_task[n.task_id].train, args.calib_size, args.seed + i, n.task_id)
              for i, n in enumerate(nets)]
    eval_data = {t: d.test for t, d in per_task.items()}
    rows = sharing_curve(nets[0], nets[1], calibs[0], calibs[1], args.layer, points, eval_data,
                         policy=args.policy, seed=args.seed)
    base = float(np.mean([data_mod.evaluate(n, None, eval_data[n.task_id]) for n in nets]))
    _emit(out, record="baseline", layer=args.layer, mean_error=f"{base:.6f}")
    for r in rows:
        _emit(out, record="point", shared=r["shared"], mtz=f"{r['mtz']:.6f}", random=f"{r['random']:.6f}")
    if args.figures:
        from .plotting import plot_sharing_curve

        path = plot_sharing_curve(rows, Path(args.figures) / f"sharing_curve_layer{args.layer}.png", base)
        _emit(out, record="figure", path=path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "zip": cmd_zip, "eval": cmd_eval, "inspect": cmd_inspect, "curve": cmd_curve}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args, out)
    except (ConfigError, PlanError) as exc:
        print(f"mtzip: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    except Exception as exc:  # pipeline failures
        print(f"mtzip: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
