"""Cross-task training-target distillation for partially annotated data."""

from .geometry import Box, Component, ScoredBox, SemanticMask
from .mask_for_box import RefinedBox, RefinementParams, Origin, refine, refine_from_mask
from .box_for_mask import BoxFillSegmenter, GrabCutSegmenter, PseudoMaskPair, make_pseudo_pair
from .losses import combined_loss, triplet_object_loss
from .evaluation import evaluate, mean_ap, mean_iou, tide_breakdown

__all__ = [
    "Box",
    "Component",
    "ScoredBox",
    "SemanticMask",
    "RefinedBox",
    "RefinementParams",
    "Origin",
    "refine",
    "refine_from_mask",
    "BoxFillSegmenter",
    "GrabCutSegmenter",
    "PseudoMaskPair",
    "make_pseudo_pair",
    "combined_loss",
    "triplet_object_loss",
    "evaluate",
    "mean_ap",
    "mean_iou",
    "tide_breakdown",
]
__version__ = "0.1.0"
