"""Uplift estimation for policy-valued treatments (Python front end to the C++ core)."""

import json

import numpy as np

from ._core import (
    MetricError,
    PolicySpec,
    ShapeError,
    SyntheticData,
    TrainingError,
    UnknownIdError,
    UnsupportedPolicyError,
    UpliftModel,
    ValidationError,
    __version__,
    auuc,
    mape,
    pehe,
    run_cli,
)
from . import _core

__all__ = [
    "MetricError",
    "PolicySpec",
    "ShapeError",
    "SyntheticData",
    "TrainingError",
    "UnknownIdError",
    "UnsupportedPolicyError",
    "UpliftModel",
    "ValidationError",
    "__version__",
    "auuc",
    "default_gen_config",
    "default_train_config",
    "generate",
    "mape",
    "pehe",
    "run_cli",
    "train",
]


def default_gen_config():
    return json.loads(_core._default_gen_config())


def default_train_config():
    return json.loads(_core._default_train_config())


def generate(**overrides):
    """Synthetic benchmark; keyword arguments override generator config keys."""
    return _core._generate(json.dumps(overrides))


def train(spec, x, t, y, model="poul", **config):
    """Fit a factorized model; returns (model, stage1_loss, stage2_loss).

    `model` is "poul" (cross-fitted when folds > 1) or "categorical".
    Keyword arguments override training config keys.
    """
    if model not in ("poul", "categorical"):
        raise ValueError(f"unknown model kind {model!r}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.int64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    return _core._train(model, x, t, y, spec, json.dumps(config))
