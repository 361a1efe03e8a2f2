"""Conditional label-diffusion toolkit for developmental-stage segmentation of
multi-focal time-lapse sequences."""

from edk.errors import ConfigError, FormatError, ProtocolError
from edk.stages import (
    SegmentList,
    StageSequence,
    StageVocabulary,
    boundary_targets,
    is_monotone,
    one_hot,
    segments_of,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "ProtocolError",
    "SegmentList",
    "StageSequence",
    "StageVocabulary",
    "boundary_targets",
    "is_monotone",
    "one_hot",
    "segments_of",
]

__version__ = "0.1.0"
