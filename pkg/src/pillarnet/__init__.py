"""Pillar-based 3D object detection in NumPy."""
from .geom import Box3D, BoxBEV, iou_3d, iou_bev, od_iou_family
from .grid import GridSpec, SparseGrid2D
from .head import Detection, HeadOutput, decode, nms_rotated, rectify
from .network import ModelConfig, NeckKind, PillarNet, plan_encoder
from .pillars import PillarEncoderParams, PointCloud, pillarize

__all__ = [
    "Box3D", "BoxBEV", "iou_3d", "iou_bev", "od_iou_family",
    "GridSpec", "SparseGrid2D",
    "Detection", "HeadOutput", "decode", "nms_rotated", "rectify",
    "ModelConfig", "NeckKind", "PillarNet", "plan_encoder",
    "PillarEncoderParams", "PointCloud", "pillarize",
]
__version__ = "0.1.0"
