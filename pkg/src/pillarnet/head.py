"""Center-head outputs and post-processing: peak decode, IoU-aware score
rectification and rotated NMS."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from .geom import Box3D, iou_bev
from .grid import GridSpec

IOU_EPS = 1e-6
WAYMO_NMS_IOU = (0.8, 0.55, 0.55)
WAYMO_BETA = (0.68, 0.71, 0.65)
NUSCENES_BETA = 0.5


@dataclass(frozen=True, eq=False)
class HeadOutput:
    """Dense per-cell head maps, all (H, W, C).

    size holds (log w, log l, log h); rot holds (sin, cos), not necessarily
    unit norm.
    """

    heatmap: np.ndarray
    offset: np.ndarray
    z: np.ndarray
    size: np.ndarray
    rot: np.ndarray
    iou: np.ndarray

    def __post_init__(self):
        hw = None
        for name, c in (("heatmap", None), ("offset", 2), ("z", 1), ("size", 3), ("rot", 2),
                        ("iou", 1)):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 3 or (c is not None and a.shape[2] != c):
                raise ValueError(f"{name} has shape {a.shape}, expected (H, W, {c or 'classes'})")
            if hw is None:
                hw = a.shape[:2]
            elif a.shape[:2] != hw:
                raise ValueError(f"{name} spatial shape {a.shape[:2]} differs from {hw}")
            object.__setattr__(self, name, a)
        if self.heatmap.size and (self.heatmap.min() < 0 or self.heatmap.max() > 1):
            raise ValueError("heatmap values must lie in [0, 1]")

    @property
    def shape(self):
        return self.heatmap.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.heatmap.shape[2]

    @classmethod
    def zeros(cls, h: int, w: int, num_classes: int) -> "HeadOutput":
        z = lambda c: np.zeros((h, w, c))
        rot = z(2)
        rot[..., 1] = 1.0
        return cls(z(num_classes), z(2), z(1), z(3), rot, z(1))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    label: int
    score: float
    iou_pred: float = 1.0
    rectified_score: Optional[float] = None
    cell: Optional[tuple] = None

    @property
    def rank_score(self) -> float:
        return self.score if self.rectified_score is None else self.rectified_score

    def to_json(self, scene_id=None) -> dict:
        b = self.box
        return {"box": [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.theta], "label": self.label,
                "score": self.score, "rectified_score": self.rectified_score,
                "scene_id": scene_id}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        rs = d.get("rectified_score")
        return cls(Box3D.from_array(d["box"]), int(d["label"]), float(d["score"]),
                   rectified_score=None if rs is None else float(rs))


def cell_to_center(rows, cols, offset, spec: GridSpec, stride: int):
    """World (x, y) of a cell-relative centre; offsets are fractions of a cell."""
    sx, sy = spec.pillar
    x = (np.asarray(cols) + offset[..., 0]) * stride * sx + spec.x_range[0]
    y = (np.asarray(rows) + offset[..., 1]) * stride * sy + spec.y_range[0]
    return x, y


def boxes_at(out: HeadOutput, rows, cols, spec: GridSpec, stride: int = 8) -> np.ndarray:
    """Decode the regression maps at the given cells into (N, 7) box arrays."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    x, y = cell_to_center(rows, cols, out.offset[rows, cols], spec, stride)
    z = out.z[rows, cols, 0]
    size = np.exp(out.size[rows, cols])
    rot = out.rot[rows, cols]
    theta = np.arctan2(rot[:, 0], rot[:, 1])
    # size map order is (w, l, h); boxes are (cx, cy, cz, l, w, h, theta)
    return np.stack([x, y, z, size[:, 1], size[:, 0], size[:, 2], theta], axis=1)


def local_maxima(hm: np.ndarray) -> np.ndarray:
    """Mask of 3x3 local maxima of a 2D map.

    Equal-valued neighbours are resolved toward the smaller row-major index,
    so a plateau yields a single peak.
    """
    h, w = hm.shape
    pad = np.full((h + 2, w + 2), -np.inf)
    pad[1:-1, 1:-1] = hm
    keep = np.ones((h, w), bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            earlier = (dr, dc) < (0, 0)  # neighbour precedes the cell in row-major order
            keep &= (hm > nb) if earlier else (hm >= nb)
    return keep


def decode(out: HeadOutput, spec: GridSpec, stride: int = 8, k: int = 500) -> List[Detection]:
    """Top-k heatmap peaks as detections, ordered by (score desc, row, col, class)."""
    cand = []
    for c in range(out.num_classes):
        hm = out.heatmap[:, :, c]
        peaks = local_maxima(hm) & (hm > 0)
        r, q = np.nonzero(peaks)
        for rr, qq in zip(r, q):
            cand.append((-hm[rr, qq], int(rr), int(qq), c))
    cand.sort()
    cand = cand[:k]
    if not cand:
        return []
    rows = np.array([t[1] for t in cand])
    cols = np.array([t[2] for t in cand])
    boxes = boxes_at(out, rows, cols, spec, stride)
    ious = out.iou[rows, cols, 0]
    return [Detection(Box3D.from_array(b), label=t[3], score=float(-t[0]),
                      iou_pred=float(iou), cell=(t[1], t[2]))
            for t, b, iou in zip(cand, boxes, ious)]


def rectify(score, iou_pred, beta):
    """IoU-aware rectification ``S**(1 - beta) * W**beta`` with W = (iou_pred + 1) / 2."""
    s = np.asarray(score, dtype=np.float64)
    w = np.clip((np.clip(iou_pred, -1.0, 1.0) + 1.0) / 2.0, IOU_EPS, 1.0)
    beta = np.asarray(beta, dtype=np.float64)
    r = s ** (1.0 - beta) * w ** beta
    return float(r) if np.ndim(r) == 0 else r


def rectify_detections(dets: Sequence[Detection], beta: Union[float, Sequence[float]]
                       ) -> List[Detection]:
    """Attach rectified scores; ``beta`` may be a per-class sequence."""
    out = []
    for d in dets:
        b = beta if np.ndim(beta) == 0 else beta[d.label]
        out.append(replace(d, rectified_score=rectify(d.score, d.iou_pred, b)))
    return out


def encode_iou_target(w):
    return 2.0 * (np.asarray(w, dtype=np.float64) - 0.5) if np.ndim(w) else 2.0 * (w - 0.5)


def decode_iou_target(t):
    return np.asarray(t, dtype=np.float64) / 2.0 + 0.5 if np.ndim(t) else t / 2.0 + 0.5


def nms_rotated(dets: Sequence[Detection], mode: str = "class_agnostic",
                score_thresh: float = 0.1, iou_thresh: Union[float, Sequence[float]] = 0.2
                ) -> List[Detection]:
    """Greedy rotated NMS on BEV IoU.

    ``class_agnostic`` drops detections below ``score_thresh`` and suppresses
    across classes at overlap ``iou_thresh``. ``class_specific`` suppresses
    within each class, with ``iou_thresh`` either a scalar or per-class list.
    Boxes are ranked by rectified score when present; ties keep input order.
    """
    if mode not in ("class_agnostic", "class_specific"):
        raise ValueError(f"unknown NMS mode {mode!r}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].rank_score, i))
    kept: List[Detection] = []
    for i in order:
        d = dets[i]
        if d.rank_score < score_thresh:
            continue
        if mode == "class_agnostic":
            thr = float(iou_thresh)
            rivals = kept
        else:
            thr = float(iou_thresh) if np.ndim(iou_thresh) == 0 else float(iou_thresh[d.label])
            rivals = [k for k in kept if k.label == d.label]
        bev = d.box.bev
        if all(iou_bev(bev, k.box.bev) < thr for k in rivals):
            kept.append(d)
    return kept


def write_jsonl(path, dets: Iterable[Detection], scene_id=None) -> None:
    with open(path, "w") as f:
        for d in dets:
            f.write(json.dumps(d.to_json(scene_id)) + "\n")


def to_jsonl(dets: Iterable[Detection], scene_id=None) -> str:
    return "".join(json.dumps(d.to_json(scene_id)) + "\n" for d in dets)


def read_jsonl(path) -> List[Detection]:
    with open(path) as f:
        return [Detection.from_json(json.loads(line)) for line in f if line.strip()]
