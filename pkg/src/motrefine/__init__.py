"""Post-refinement of multi-object tracking results: a fusion decoder
over query pairs turns an original tracker's noisy detections plus two
consecutive frames into refined detections and backward motions."""

from .config import RefineConfig
from .geometry import CornerBox, EdgeBox, Motion

__all__ = ["RefineConfig", "CornerBox", "EdgeBox", "Motion"]
__version__ = "0.1.0"
