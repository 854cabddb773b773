"""Two-branch knowledge distillation for open-vocabulary semantic segmentation
on event-camera data."""

__version__ = "0.1.0"

from .events import Event, EventStream, FrameSequence, VoxelGrid, read_events, simulate_events, voxelize, write_events
from .reconstruct import Reconstructor
from .backbones import ModelConfig
from .config import ExperimentConfig, load_config
from .evaluation import SegmentationMap, assemble_semantic, compute_metrics, evaluate, merge_classes

__all__ = [
    "Event", "EventStream", "FrameSequence", "VoxelGrid",
    "read_events", "write_events", "simulate_events", "voxelize",
    "Reconstructor", "ModelConfig", "ExperimentConfig", "load_config",
    "SegmentationMap", "assemble_semantic", "compute_metrics", "evaluate", "merge_classes",
]
