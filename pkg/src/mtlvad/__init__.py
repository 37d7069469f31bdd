"""Two-branch teacher-student video anomaly detection.

The appearance-motion branch predicts the next frame's semantic segmentation
from two frames; the motion branch regresses masked optical-flow magnitude
from one frame, gated by attention over direction features and depth.
Anomaly scores are student/teacher discrepancies.
"""

__version__ = "0.1.0"
