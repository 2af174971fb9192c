"""Desk-scale multiscale adaptive nighttime tracker."""

from .boxes import BoundingBox, cle, iou, siou_reference
from .config import ModelConfig
from .model import MATrack
from .pipeline import Tracker, TrainConfig, train

__all__ = [
    "BoundingBox",
    "MATrack",
    "ModelConfig",
    "Tracker",
    "TrainConfig",
    "cle",
    "iou",
    "siou_reference",
    "train",
]

__version__ = "0.1.0"
