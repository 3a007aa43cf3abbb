from .config import DATASET_PRESETS, VARIANTS, ModelConfig, preset_model, tiny_config
from .detectors import DETR, DINODETR, ConditionalDETR, Detector, ModelOutput, build_model

__all__ = ["DATASET_PRESETS", "VARIANTS", "ModelConfig", "preset_model", "tiny_config", "DETR",
           "DINODETR", "ConditionalDETR", "Detector", "ModelOutput", "build_model"]
