from mmflow.evaluation.attention import AttnQuadrantStats, attn_quadrants, quadrant_masses
from mmflow.evaluation.export import decode_ppm, encode_ppm, export_frames
from mmflow.evaluation.metrics import (
    IOU_THRESHOLDS,
    DepthMetrics,
    SegMetrics,
    affine_align,
    average_precision,
    depth_metrics,
    greedy_matches,
    instances,
    iou_matrix,
    label_video,
    labels_from_palette,
    seg_metrics,
)

__all__ = [
    "AttnQuadrantStats", "DepthMetrics", "IOU_THRESHOLDS", "SegMetrics", "affine_align",
    "attn_quadrants", "average_precision", "decode_ppm", "depth_metrics", "encode_ppm",
    "export_frames", "greedy_matches", "instances", "iou_matrix", "label_video",
    "labels_from_palette", "quadrant_masses", "seg_metrics",
]
