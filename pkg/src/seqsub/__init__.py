"""Sequence-length compression toolkit: fixed- and variable-length
subsampling, boundary-guidance losses, a desk-scale distillation harness,
and MACs accounting."""

from .seqcore import (
    AlphaSequence,
    FrameSequence,
    GradCheckReport,
    Segmentation,
    SegmentWeights,
    grad_check,
    load_frames,
    load_segmentation,
    save_frames,
    save_segmentation,
)

__all__ = [
    "AlphaSequence",
    "FrameSequence",
    "GradCheckReport",
    "Segmentation",
    "SegmentWeights",
    "grad_check",
    "load_frames",
    "load_segmentation",
    "save_frames",
    "save_segmentation",
]

__version__ = "0.1.0"
