"""Volumetric set-prediction detectors (DETR, Conditional DETR, DINO DETR) in numpy."""

from .config import RunConfig, build_run_config, load_config
from .evaluation import EvalCase, EvalResult, map_all
from .geometry import Box3D, GlobalBox, giou3d, iou3d
from .matching import MatchAssignment, build_cost_matrix, hungarian
from .models import ModelConfig, build_model, tiny_config
from .patches import MergeConfig, merge_predictions, sliding_infer, tile_volume
from .synth import SynthConfig, generate_dataset
from .training import Trainer

__version__ = "0.1.0"

__all__ = [
    "Box3D", "EvalCase", "EvalResult", "GlobalBox", "MatchAssignment", "MergeConfig", "ModelConfig",
    "RunConfig", "SynthConfig", "Trainer", "build_cost_matrix", "build_model", "build_run_config",
    "generate_dataset", "giou3d", "hungarian", "iou3d", "load_config", "map_all", "merge_predictions",
    "sliding_infer", "tile_volume", "tiny_config",
]
