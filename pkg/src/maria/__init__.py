"""Missing-aware multimodal transformer for incomplete tabular data."""
from .data import FeatureSchema, Modality, MultimodalDataset, load_dataset, synthesize_dataset
from .masking import MissingnessPlan, build_mask, inject_mcar
from .model import EncoderConfig, LateFusion, Maria, NAIM, build_model
from .training import TrainConfig, train

__all__ = [
    "EncoderConfig", "FeatureSchema", "LateFusion", "Maria", "MissingnessPlan", "Modality",
    "MultimodalDataset", "NAIM", "TrainConfig", "build_mask", "build_model", "inject_mcar",
    "load_dataset", "synthesize_dataset", "train",
]
__version__ = "0.1.0"
