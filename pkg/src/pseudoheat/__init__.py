"""Point detection under domain shift via uncertainty-selected pseudo-heatmaps."""
from .heatmap import Point, PositionHeatmap, detect_peaks, encode_points, regenerate
from .metrics import MatchReport, match_detections

__version__ = "0.1.0"

__all__ = ["Point", "PositionHeatmap", "detect_peaks", "encode_points", "regenerate", "MatchReport",
           "match_detections", "__version__"]
