"""Offline extraction of per-layer final-token hidden states from a frozen
vision-language model, dumped as `.pgstack` files plus a manifest."""

from .extract import ExtractionError, ExtractionReport, extract, model_depth_and_width
from .frames import DecodeError, load_frames, uniform_indices
from .jobs import ExtractionItem, ExtractionJob, JobError, load_items

__all__ = [
    "DecodeError",
    "ExtractionError",
    "ExtractionItem",
    "ExtractionJob",
    "ExtractionReport",
    "JobError",
    "extract",
    "load_frames",
    "load_items",
    "model_depth_and_width",
    "uniform_indices",
]

__version__ = "0.1.0"
