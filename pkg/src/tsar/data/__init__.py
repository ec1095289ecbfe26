from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datasets import (
    ImageDataset,
    load_image_folder,
    resize,
    save_image_folder,
    scarce_subset,
    synthetic_glyphs,
)
from .trace import DETAILS, PERCENTILES, RegulationTrace, TraceError, read_trace, write_trace

__all__ = [
    "CheckpointError",
    "DETAILS",
    "ImageDataset",
    "PERCENTILES",
    "RegulationTrace",
    "TraceError",
    "load_checkpoint",
    "load_image_folder",
    "read_trace",
    "resize",
    "save_checkpoint",
    "save_image_folder",
    "scarce_subset",
    "synthetic_glyphs",
    "write_trace",
]
