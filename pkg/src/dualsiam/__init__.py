"""Two-branch siamese single-object tracker and its training/evaluation harness.

The tracker blends two similarity branches: an appearance network trained
end-to-end on the matching task, and a frozen classification-pretrained
semantic network whose per-layer features pass through channel attention
and a 1x1 fusion before correlation.  Both branches score a search region
against the first-frame target; the weighted average of their response
maps locates the target.
"""

from .errors import ContractViolationError, DataFormatError, NumericError
from .geometry import BoundingBox, center_error, iou
from .profiles import DESK, PAPER, NetworkProfile, get_profile
from .tracking import TrackConfig, Tracker, TrackerModels

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ContractViolationError",
    "DataFormatError",
    "DESK",
    "NetworkProfile",
    "NumericError",
    "PAPER",
    "TrackConfig",
    "Tracker",
    "TrackerModels",
    "center_error",
    "get_profile",
    "iou",
    "__version__",
]
