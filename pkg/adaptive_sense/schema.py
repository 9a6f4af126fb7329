import argparse
import csv
import json

import jsonschema

from . import environment, sensing, trainer
from .errors import ConfigError, SchemaError
from .results import METRICS_COLUMNS, METRICS_VERSION

NUMBER = r"^-?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?$"
POSITIVE_INT = {"type": "integer", "minimum": 1}


def get_schema():
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "type": "object",
        "properties": {
            "run": {
                "type": "object",
                "properties": {
                    "out": {"type": "string"},
                    "seed": {"type": "integer"},
                },
                "additionalProperties": False,
            },
            "data": {
                "type": "object",
                "properties": {
                    "source": {"enum": ["idx", "images"]},
                    "paths": {"type": "array", "items": {"type": "string"}},
                    "directory": {"type": "string"},
                    "size": POSITIVE_INT,
                    "crop": {"type": "boolean"},
                    "downsample": POSITIVE_INT,
                    "limit": {"type": "integer", "minimum": 10},
                    "cache": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
            "train": {
                "type": "object",
                "properties": {
                    "strategy": {"enum": list(trainer.STRATEGIES)},
                    # Every installed operator plugin is a valid choice.
                    "operator": {"enum": sorted(sensing.load())},
                    "T": POSITIVE_INT,
                    "gamma": {"type": "number", "minimum": 0, "maximum": 1},
                    "beta": {"type": "number", "minimum": 0},
                    "epochs": {"type": "integer", "minimum": 0},
                    "batch": POSITIVE_INT,
                    "lr_recon": {"type": "number", "exclusiveMinimum": 0},
                    "lr_policy": {"type": "number", "exclusiveMinimum": 0},
                    "lr_value": {"type": "number", "exclusiveMinimum": 0},
                    "reward_mode": {"enum": list(environment.REWARD_MODES)},
                    "algorithm": {"enum": list(trainer.ALGORITHMS)},
                    "seed": {"type": "integer"},
                    "ppo_clip": {"type": "number", "exclusiveMinimum": 0},
                    "ppo_epochs": POSITIVE_INT,
                    "normalize_advantages": {"type": "boolean"},
                    "pretrain_epochs": {"type": ["integer", "null"], "minimum": 0},
                    "stop_prior_gradient": {"type": "boolean"},
                    "checkpoint_every": POSITIVE_INT,
                    "dtype": {"enum": list(trainer.DTYPES)},
                },
                "required": ["strategy", "operator", "T"],
                "additionalProperties": False,
            },
            "model": {
                "type": "object",
                "properties": {
                    "hidden": POSITIVE_INT,
                    "latent": POSITIVE_INT,
                    "gru_layers": POSITIVE_INT,
                    "decoder_channels": {
                        "type": "array", "items": POSITIVE_INT, "minItems": 1,
                    },
                    "policy_hidden": POSITIVE_INT,
                    "value_hidden": POSITIVE_INT,
                },
                "additionalProperties": False,
            },
            "ista": {
                "type": "object",
                "properties": {
                    "lambda": {"type": "number", "exclusiveMinimum": 0},
                    "measurements": {
                        "type": "array", "items": {"type": "integer", "minimum": 0},
                    },
                    "max_iters": POSITIVE_INT,
                    "tol": {"type": "number", "minimum": 0},
                    "step": {
                        "oneOf": [{"const": "auto"}, {"type": "number", "exclusiveMinimum": 0}]
                    },
                },
                "additionalProperties": False,
            },
        },
        "required": ["data"],
        "additionalProperties": False,
    }


def _describe(error):
    where = ".".join(str(p) for p in error.absolute_path) or "<config>"
    return f"{where}: {error.message}"


def validate(config, require=()):
    """Check the whole config and report every problem at once.

    ``require`` names sections the calling command can not do without.
    """
    if not isinstance(config, dict):
        raise ConfigError("The configuration must be a mapping of sections")
    validator = jsonschema.Draft7Validator(get_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: [str(p) for p in e.path])
    problems = [_describe(e) for e in errors]
    problems.extend(
        f"<config>: '{section}' is a required section"
        for section in require
        if section not in config
    )
    if problems:
        raise ConfigError("Invalid configuration:\n  " + "\n  ".join(problems))


def get_metrics_schema():
    number = {"type": "string", "pattern": NUMBER}
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "type": "object",
        "properties": {
            "version": {"const": str(METRICS_VERSION)},
            "run_id": {"type": "string", "pattern": r"^\S+$"},
            "epoch": {"type": "string", "pattern": r"^\d+$"},
            "split": {"enum": ["train", "val", "test"]},
            "strategy": {"enum": list(trainer.STRATEGIES)},
            "operator": {"type": "string", "minLength": 1},
            "T": {"type": "string", "pattern": r"^[1-9]\d*$"},
            "t": {"type": "string", "pattern": r"^([1-9]\d*|final)$"},
            "ssim_mean": number,
            "ssim_stderr": number,
            "ssim_worst": number,
            "mse_mean": number,
            "reward_sum_mean": number,
        },
        "required": METRICS_COLUMNS,
        "additionalProperties": False,
    }


def _typed(row):
    out = dict(row)
    for key in ("epoch", "T", "version"):
        out[key] = int(row[key])
    if row["t"] != "final":
        out["t"] = int(row["t"])
    for key in METRICS_COLUMNS[8:]:
        out[key] = float(row[key])
    return out


def validate_metrics(path):
    """Strictly parse a metrics CSV; returns rows with numeric fields converted."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_COLUMNS:
            raise SchemaError(
                f"{path}: header {reader.fieldnames} does not match metrics version "
                f"{METRICS_VERSION} columns {METRICS_COLUMNS}"
            )
        rows = list(reader)
    validator = jsonschema.Draft7Validator(get_metrics_schema())
    problems = [
        f"line {line}: {e.message}"
        for line, row in enumerate(rows, start=2)
        for e in validator.iter_errors(row)
    ]
    if problems:
        raise SchemaError(f"{path} is not a valid metrics file:\n  " + "\n  ".join(problems))
    return [_typed(row) for row in rows]


class HelpAction(argparse.Action):
    def __init__(self, option_strings, **kwargs):
        kwargs["nargs"] = 0
        super().__init__(option_strings, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        print(json.dumps(get_schema(), indent=2))
        parser.exit()
