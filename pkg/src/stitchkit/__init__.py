"""Trajectory stitching for offline datasets, with BC policy extraction and toy-environment evaluation."""

__version__ = "0.1.0"

from stitchkit.data import Dataset, Trajectory, Transition, load_dataset, save_dataset  # noqa: E402
from stitchkit.stitch import StitchConfig, StitchModels, run_ts, stitch_trajectory  # noqa: E402

__all__ = [
    "Dataset",
    "Trajectory",
    "Transition",
    "load_dataset",
    "save_dataset",
    "StitchConfig",
    "StitchModels",
    "run_ts",
    "stitch_trajectory",
]
