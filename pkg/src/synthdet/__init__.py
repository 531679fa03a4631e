"""Pose-conditioned image synthesis coupled with self-labeled object detection."""

__version__ = "0.1.0"
