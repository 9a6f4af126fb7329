#!/usr/bin/env python3

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import (
    baselines,
    data,
    environment,
    models,
    plotting,
    results,
    schema,
    sensing,
    trainer,
    utils,
)
from .errors import (
    AdaptiveSenseError,
    CheckpointError,
    ConfigError,
    DataError,
    UnsupportedError,
)

CONFIG_HELP = "Experiment configuration (YAML)."
SEED_HELP = "Random seed. Overrides the seed from the configuration file."
OUT_HELP = "Where to write results."
RESUME_HELP = "Continue from the latest checkpoint in the run directory."
CHECKPOINT_HELP = "Checkpoint file written by the train command."
SPLIT_HELP = "Dataset split to evaluate on."
ACTION_MODE_HELP = """
Use the mean of the policy (deterministic) or sample actions from it.
"""
LAMBDA_HELP = """
Soft-threshold weight for ISTA. Can be specified multiple times to sweep.
"""
COUNT_HELP = "Number of episodes to dump."
ACTIONS_HELP = "Also save the full action tensor to this .npy file."
DEST_HELP = "Directory to download the MNIST idx files into."
PRINT_SCHEMA_HELP = "Print schema for the configuration file to stdout."

ISTA_COLUMNS = ["lambda", "measurements", "mse_mean", "mse_stderr"]


def logging_setup(debug=False):

    class ExcludeErrorsFilter(logging.Filter):
        def filter(self, record):
            """Only lets through log messages with log level below ERROR."""
            return record.levelno < logging.ERROR

    console_stdout = logging.StreamHandler(stream=sys.stdout)
    console_stdout.addFilter(ExcludeErrorsFilter())
    console_stdout.setLevel(logging.DEBUG if debug else logging.INFO)

    console_stderr = logging.StreamHandler(stream=sys.stderr)
    console_stderr.setLevel(logging.ERROR)

    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        handlers=[console_stdout, console_stderr],
    )


def exit_code(exc):
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, DataError):
        return 3
    if isinstance(exc, CheckpointError):
        return 4
    return 1


def load_config(path, require=()):
    """Read and validate a config file; returns (config, config directory)."""
    path = Path(path)
    try:
        with open(path) as f:
            config = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"Can not read {path}: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}")
    schema.validate(config, require=require)
    return config, path.resolve().parent


def config_seed(config, args):
    if args.seed is not None:
        return args.seed
    return config.get("run", {}).get("seed", 0)


def resolve_paths(config, config_dir):
    """Copy of the config with data paths made absolute, for storing in a run."""
    section = dict(config["data"])
    if section.get("paths"):
        section["paths"] = [str(Path(config_dir, p)) for p in section["paths"]]
    if section.get("directory"):
        section["directory"] = str(Path(config_dir, section["directory"]))
    return config | {"data": section}


def load_data(config, config_dir, seed):
    return data.load_dataset(data.DataConfig.from_dict(config["data"], config_dir), seed)


def cmd_train(args):
    config, config_dir = load_config(args.config, require=("train",))
    seed = config_seed(config, args)
    # Command line wins over the config file.
    if args.seed is not None:
        config["train"]["seed"] = args.seed
    train_config = trainer.TrainConfig.from_dict({"seed": seed} | config["train"])
    model_config = models.ModelConfig.from_dict(config.get("model", {}))
    datasets = load_data(config, config_dir, seed)
    operator = sensing.create(train_config.operator, *datasets["train"].shape)

    run_id = results.make_run_id(config)
    out = args.out or utils.relative_to(config_dir, config.get("run", {}).get("out")) or "runs"
    run = results.RunDirectory(Path(out) / run_id, run_id)
    if args.resume:
        checkpoint = run.latest_checkpoint()
        logging.info("Resuming from %s", checkpoint)
        job = trainer.Trainer.from_checkpoint(checkpoint, datasets, operator)
        run.truncate_metrics(job.epoch)
    else:
        run.create(yaml.safe_dump(resolve_paths(config, config_dir), sort_keys=True))
        job = trainer.Trainer(train_config, model_config, operator, datasets)
    job.fit(run)
    return run


def _checkpoint_context(args):
    """Trainer restored from --checkpoint, with the data of its run."""
    checkpoint = Path(args.checkpoint)
    run_dir = checkpoint.parent.parent
    config_path = args.config or run_dir / "config.yaml"
    config, config_dir = load_config(config_path)
    seed = config_seed(config, args)
    datasets = load_data(config, config_dir, seed)
    return trainer.Trainer.from_checkpoint(checkpoint, datasets), run_dir.name, seed


def cmd_eval(args):
    job, run_id, _ = _checkpoint_context(args)
    result = job.evaluate(args.split, action_mode=args.action_mode)
    for t, (s, m) in enumerate(zip(result.ssim, result.mse), start=1):
        logging.info(
            "t=%d SSIM %.4f +- %.4f (worst %.4f), MSE %.5f",
            t, s.mean, s.stderr, s.worst_case, m.mean,
        )
    rows = results.metrics_rows(
        run_id, job.config, job.epoch, args.split, result=result, per_step=True
    )
    if args.out:
        results.write_metrics(args.out, rows)
        logging.info("Wrote %d rows to %s", len(rows), args.out)
    return rows


def cmd_compare(args):
    run_rows = {}
    for run in args.runs:
        path = Path(run)
        if path.is_dir():
            path = path / "metrics.csv"
        run_rows[str(path)] = schema.validate_metrics(path)
    return results.compare(run_rows, args.out or "comparison")


def cmd_ista(args):
    config, config_dir = load_config(args.config)
    operator = config.get("train", {}).get("operator", "gaussian")
    if operator != "gaussian":
        raise UnsupportedError(f"ISTA needs Gaussian measurements, not {operator}")
    seed = config_seed(config, args)
    ista = config.get("ista", {})
    images = load_data(config, config_dir, seed)["test"].images
    n_pixels = images.shape[1] * images.shape[2]
    measurements = ista.get("measurements") or [int(n_pixels * f) for f in np.linspace(0, 1, 9)]
    lambdas = args.lambdas or [ista.get("lambda", baselines.IstaConfig.lam)]

    rows = []
    for lam in lambdas:
        ista_config = baselines.IstaConfig.from_dict(ista | {"lambda": lam})
        rows.extend(
            baselines.ista_sweep(images, measurements, ista_config, np.random.default_rng(seed))
        )

    out = Path(args.out or "ista")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ista.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ISTA_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "lambda": repr(row.lam),
                    "measurements": row.measurements,
                    "mse_mean": repr(row.mse.mean),
                    "mse_stderr": repr(row.mse.stderr),
                }
            )
    plotting.mse_curve(
        out / "ista.svg",
        {
            f"lambda={lam:g}": (
                [r.measurements for r in rows if r.lam == lam],
                [r.mse.mean for r in rows if r.lam == lam],
            )
            for lam in lambdas
        },
        title="ISTA reconstruction error",
    )
    return rows


def cmd_dump_trajectory(args):
    job, _, seed = _checkpoint_context(args)
    images = job.datasets[args.split].images[:args.count]
    trajectory = environment.rollout(
        job.models,
        job.operator,
        images,
        job.config.T,
        np.random.default_rng(seed),
        reward_mode=job.config.reward_mode,
        action_mode=args.action_mode,
    )
    environment.write_trajectory(
        args.out or "trajectory.csv", trajectory, job.operator, actions_path=args.actions
    )
    return trajectory


def cmd_fetch(args):
    return data.fetch_idx(args.dest, url=args.url)


def build_parser():
    parser = argparse.ArgumentParser(prog="adaptive-sense")
    parser.add_argument("--debug", action="store_true")
    parser.add_argument(
        "--print-schema", action=schema.HelpAction, help=PRINT_SCHEMA_HELP
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train a model and its acquisition policy.")
    train.add_argument("--config", required=True, help=CONFIG_HELP)
    train.add_argument("--seed", type=int, help=SEED_HELP)
    train.add_argument("--out", help=OUT_HELP)
    train.add_argument("--resume", action="store_true", help=RESUME_HELP)
    train.set_defaults(func=cmd_train)

    def checkpoint_args(sub):
        sub.add_argument("--checkpoint", required=True, help=CHECKPOINT_HELP)
        sub.add_argument("--config", help=CONFIG_HELP)
        sub.add_argument("--seed", type=int, help=SEED_HELP)
        sub.add_argument("--split", choices=data.SPLITS, default="test", help=SPLIT_HELP)
        sub.add_argument(
            "--action-mode", choices=environment.ACTION_MODES, default="mean",
            help=ACTION_MODE_HELP,
        )
        sub.add_argument("--out", help=OUT_HELP)

    evaluate = commands.add_parser("eval", help="Per-step metrics of a checkpoint.")
    checkpoint_args(evaluate)
    evaluate.set_defaults(func=cmd_eval)

    compare = commands.add_parser("compare", help="Tabulate and plot several runs.")
    compare.add_argument("runs", nargs="+", metavar="RUN", help="Run directory or metrics.csv")
    compare.add_argument("--out", help=OUT_HELP)
    compare.set_defaults(func=cmd_compare)

    ista = commands.add_parser("ista", help="ISTA baseline over measurement counts.")
    ista.add_argument("--config", required=True, help=CONFIG_HELP)
    ista.add_argument("--seed", type=int, help=SEED_HELP)
    ista.add_argument(
        "--lambda", dest="lambdas", type=float, action="append", help=LAMBDA_HELP
    )
    ista.add_argument("--out", help=OUT_HELP)
    ista.set_defaults(func=cmd_ista)

    dump = commands.add_parser("dump-trajectory", help="Write per-step episode records.")
    checkpoint_args(dump)
    dump.add_argument("--count", type=int, default=8, help=COUNT_HELP)
    dump.add_argument("--actions", help=ACTIONS_HELP)
    dump.set_defaults(func=cmd_dump_trajectory)

    fetch = commands.add_parser("fetch", help="Download MNIST.")
    fetch.add_argument("--dest", default=str(utils.CACHE_PATH / "mnist"), help=DEST_HELP)
    fetch.add_argument("--url", default=data.MNIST_URL)
    fetch.set_defaults(func=cmd_fetch)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    logging_setup(args.debug)

    try:
        args.func(args)
    except AdaptiveSenseError as exc:
        logging.error("%s", exc)
        sys.exit(exit_code(exc))


if __name__ == "__main__":
    main()
