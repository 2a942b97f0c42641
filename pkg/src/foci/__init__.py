"""Nuclear foci detection: Darknet-19 backbone with switchable atrous
convolution, a feature pyramid and a YOLOv2-style head, in plain numpy."""
from .backbone import NetworkConfig, desk_config, paper_config
from .config import PipelineConfig, default_config, load_config
from .evaluation import evaluate, nms
from .head import BBox, Detection
from .model import Detector, build_detector
from .train import TrainConfig, train_loop

__all__ = [
    "BBox", "Detection", "Detector", "NetworkConfig", "PipelineConfig", "TrainConfig",
    "build_detector", "default_config", "desk_config", "evaluate", "load_config", "nms",
    "paper_config", "train_loop",
]
__version__ = "0.1.0"
