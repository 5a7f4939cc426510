"""Python access to the stainforge core: AF correction, gating, metrics and the pipeline."""

import json as _json

from . import _core
from ._core import (
    Error,
    UserError,
    af_subtract,
    auprc,
    bootstrap_auprc,
    denormalize_value,
    dilate_nuclei,
    f1,
    fit_gmm_1d,
    normalize,
    normalize_value,
    otsu_threshold,
    predict,
    psnr,
    random_baseline_f1,
    ssim,
    synth,
)

__all__ = [
    "Error", "UserError", "af_subtract", "auprc", "bootstrap_auprc", "denormalize_value",
    "dilate_nuclei", "evaluate", "f1", "fit_gmm_1d", "normalize", "normalize_value",
    "otsu_threshold", "predict", "preprocess", "psnr", "random_baseline_f1", "ssim",
    "synth", "train",
]


def _cfg(config):
    # dicts go through JSON; relative paths resolve against the cwd
    return config if isinstance(config, str) else _json.dumps(config)


def preprocess(config, seed=None, jobs=None):
    return _core.preprocess(_cfg(config), seed, jobs)


def train(config, seed=None, jobs=None):
    return _core.train(_cfg(config), seed, jobs)


def evaluate(config, seed=None, jobs=None):
    """Returns the metric report as a dict (same content as report.json)."""
    return _json.loads(_core.evaluate(_cfg(config), seed, jobs))
