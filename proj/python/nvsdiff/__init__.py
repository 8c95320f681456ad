"""Python bindings for the nvsdiff C++ core."""

import json as _json

import torch as _torch  # noqa: F401  loads the libtorch shared libraries

from ._core import (  # noqa: F401
    LoadError,
    Model,
    Schedule,
    ValidationError,
    cube_bounds,
    fit_scene,
    generate_dataset,
    load_scene,
    psnr,
    ssim,
)
from . import _core


def default_config():
    return _json.loads(_core._default_config())


def train(config, data, run_dir="", split="train"):
    """Train from a config dict (see default_config); returns the denoising loss per step."""
    return _core._train(_json.dumps(config), str(data), split, str(run_dir))


def model_config(model):
    return _json.loads(model._config_json())
