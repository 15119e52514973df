"""Python front end for the pedetect C++ core."""

import json

from ._core import (
    ConfigError,
    DataError,
    GeometryError,
    TrainingDivergence,
    __version__,
    attention_map,
    auc,
    continuous_dice,
    delong_ci,
)
from . import _core

__all__ = [
    "ConfigError",
    "DataError",
    "GeometryError",
    "TrainingDivergence",
    "attention_map",
    "auc",
    "continuous_dice",
    "delong_ci",
    "desk_config",
    "evaluate",
    "gen",
    "run_scenario",
    "validate_config",
]


def evaluate(scores, labels):
    """AUC, DeLong interval, accuracy at 0.5 and ROC points as a dict."""
    return json.loads(_core._evaluate(scores, labels))


def desk_config():
    """The CPU-scale experiment configuration as a dict."""
    return json.loads(_core._desk_config())


def validate_config(config):
    """Return the config with defaults filled in; raises ConfigError."""
    return json.loads(_core._validate_config(json.dumps(config)))


def gen(config_path, seed=None, force=False, out=None):
    return json.loads(_core._gen(str(config_path), seed, force, None if out is None else str(out)))


def run_scenario(config_path, seed=None, resume=False, out=None):
    return json.loads(_core._run_scenario(str(config_path), seed, resume, None if out is None else str(out)))
