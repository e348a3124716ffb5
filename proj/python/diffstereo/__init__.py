"""Diffusion-bridge iterative stereo matching (C++ core)."""

import torch  # noqa: F401  loads libtorch before the extension

from ._core import (
    Config,
    ConfigError,
    FormatError,
    NumericalError,
    ShapeError,
    beta,
    evaluate,
    generate_pair,
    infer,
    metrics,
    read_pfm,
    schedule_presets,
    smish,
    train,
    write_pfm,
)

__all__ = [
    "Config",
    "ConfigError",
    "FormatError",
    "NumericalError",
    "ShapeError",
    "beta",
    "evaluate",
    "generate_pair",
    "infer",
    "metrics",
    "read_pfm",
    "schedule_presets",
    "smish",
    "train",
    "write_pfm",
]
