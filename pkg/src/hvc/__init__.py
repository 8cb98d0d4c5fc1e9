"""Dense visual correspondence from still images with a hybrid static-dynamic loss."""
from .estimator import HVCEncoder, LabelPropagator
from .exceptions import HVCError
from .trainer import HVCTrainer, TrainConfig

__all__ = ["HVCEncoder", "LabelPropagator", "HVCError", "HVCTrainer", "TrainConfig"]
__version__ = "0.1.0"
