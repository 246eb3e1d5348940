"""Training loss surface: focal heatmap loss, L1 regression terms, IoU-branch
loss and the orientation-decoupled IoU losses, with analytic gradients for
the box-regression outputs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .geom import Box3D, IOU_KINDS, iou_3d, od_iou_family
from .grid import GridSpec
from .head import HeadOutput, boxes_at, encode_iou_target

DEFAULT_LAMBDA = 0.25
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
PRED_EPS = 1e-6
MIN_RADIUS = 2


@dataclass(frozen=True, eq=False)
class TargetMaps:
    """Training targets on the stride-``stride`` head grid.

    Regression maps and ``boxes`` are only meaningful where ``mask`` is set.
    """

    heatmap: np.ndarray  # (H, W, classes)
    offset: np.ndarray   # (H, W, 2)
    z: np.ndarray        # (H, W, 1)
    size: np.ndarray     # (H, W, 3) log (w, l, h)
    rot: np.ndarray      # (H, W, 2) sin, cos
    boxes: np.ndarray    # (H, W, 7)
    mask: np.ndarray     # (H, W) bool
    spec: GridSpec
    stride: int = 8

    @property
    def cells(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.mask)

    @property
    def num_objects(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class LossReport:
    cls: float
    iou: float
    od_iou: float
    off: float
    z: float
    size: float
    ori: float
    total: float
    lam: float
    kind: str
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def terms(self) -> Dict[str, float]:
        return {"cls": self.cls, "iou": self.iou, "od_iou": self.od_iou, "off": self.off,
                "z": self.z, "size": self.size, "ori": self.ori, "total": self.total}


def combine(cls, iou, od_iou, off, z, size, ori, lam) -> float:
    return cls + iou + lam * (od_iou + off + z + size + ori)


# ---------------------------------------------------------------------------
# heatmap targets


def gaussian_radius(height: float, width: float, min_overlap: float = 0.1) -> float:
    """Largest centre displacement (in cells) keeping IoU >= min_overlap, CornerNet-style."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(hm: np.ndarray, row: int, col: int, radius: int) -> None:
    """Max-splat a Gaussian of the given radius; the centre cell becomes exactly 1."""
    d = 2 * radius + 1
    sigma = d / 6
    yy, xx = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(xx * xx + yy * yy) / (2 * sigma * sigma))
    g[g < np.finfo(g.dtype).eps * g.max()] = 0
    h, w = hm.shape
    top, bottom = min(row, radius), min(h - row, radius + 1)
    left, right = min(col, radius), min(w - col, radius + 1)
    region = hm[row - top:row + bottom, col - left:col + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)
    hm[row, col] = 1.0


# ---------------------------------------------------------------------------
# individual terms


def focal_heatmap(pred: np.ndarray, target: np.ndarray,
                  alpha: float = FOCAL_ALPHA, beta: float = FOCAL_BETA) -> float:
    """Penalty-reduced pixel-wise focal loss, normalised by the number of centres (min 1)."""
    p = np.clip(pred, PRED_EPS, 1 - PRED_EPS)
    pos = target == 1
    pos_loss = -(np.log(p) * (1 - p) ** alpha)[pos].sum()
    neg = ~pos
    neg_loss = -(np.log(1 - p) * p ** alpha * (1 - target) ** beta)[neg].sum()
    n = max(int(pos.sum()), 1)
    return float((pos_loss + neg_loss) / n)


def l1_term(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute error over all elements and its gradient ``sign / N``."""
    n = pred.size
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def l1_terms(out: HeadOutput, targets: TargetMaps):
    """(off, z, size, ori) L1 losses over positive cells, plus gradients per map."""
    r, c = targets.cells
    losses, grads = {}, {}
    for key, name in (("off", "offset"), ("z", "z"), ("size", "size"), ("ori", "rot")):
        v, g = l1_term(getattr(out, name)[r, c], getattr(targets, name)[r, c])
        losses[key] = v
        grads[name] = g
    return losses, grads


def iou_targets(boxes_pred: np.ndarray, boxes_gt: np.ndarray) -> np.ndarray:
    return np.array([encode_iou_target(iou_3d(Box3D.from_array(p), Box3D.from_array(g)))
                     for p, g in zip(boxes_pred, boxes_gt)])


def iou_pred_loss(pred_iou: np.ndarray, boxes_pred: np.ndarray, boxes_gt: np.ndarray,
                  mask: Optional[np.ndarray] = None, target: Optional[np.ndarray] = None
                  ) -> Tuple[float, np.ndarray]:
    """L1 between the IoU branch and the encoded 3D IoU of (pred, gt).

    The target is a constant: no gradient reaches the boxes.
    """
    pred_iou = np.asarray(pred_iou, dtype=np.float64).reshape(-1)
    if mask is not None:
        pred_iou, boxes_pred, boxes_gt = pred_iou[mask], boxes_pred[mask], boxes_gt[mask]
    if target is None:
        target = iou_targets(boxes_pred, boxes_gt)
    return l1_term(pred_iou, target)


def od_iou_loss(boxes_pred: np.ndarray, boxes_gt: np.ndarray, mask: Optional[np.ndarray] = None,
                kind: str = "DIoU") -> Tuple[float, np.ndarray]:
    """Mean of ``1 - value`` over pairs and its gradient w.r.t. pred boxes (N, 7)."""
    if kind.startswith("OD-"):
        kind = kind[3:]
    if kind not in IOU_KINDS:
        raise ValueError(f"unknown OD-IoU kind {kind!r}")
    if mask is not None:
        boxes_pred, boxes_gt = boxes_pred[mask], boxes_gt[mask]
    n = len(boxes_pred)
    grad = np.zeros((n, 7))
    if n == 0:
        return 0.0, grad
    total = 0.0
    for i, (p, g) in enumerate(zip(boxes_pred, boxes_gt)):
        v, gr = od_iou_family(Box3D.from_array(p), Box3D.from_array(g), kind)
        total += 1.0 - v
        grad[i] = -gr / n
    return total / n, grad


# ---------------------------------------------------------------------------
# total loss


def _box_to_map_grads(box_grad: np.ndarray, boxes: np.ndarray, spec: GridSpec, stride: int):
    """Chain (N, 7) box gradients back to offset / z / size maps."""
    sx, sy = spec.pillar
    g_off = np.stack([box_grad[:, 0] * stride * sx, box_grad[:, 1] * stride * sy], axis=1)
    g_z = box_grad[:, 2:3].copy()
    # size map is (log w, log l, log h); d exp(s) / ds = exp(s)
    g_size = np.stack([box_grad[:, 4] * boxes[:, 4], box_grad[:, 3] * boxes[:, 3],
                       box_grad[:, 5] * boxes[:, 5]], axis=1)
    return g_off, g_z, g_size


def total_loss(out: HeadOutput, targets: TargetMaps, lam: float = DEFAULT_LAMBDA,
               kind: str = "DIoU", iou_target: Optional[np.ndarray] = None) -> LossReport:
    """All loss terms and their weighted total.

    ``grads`` maps ``offset``/``z``/``size``/``rot``/``iou`` to the gradient
    of ``total`` at the positive cells (row-major order). ``iou_target`` can
    pin the IoU-branch targets, e.g. for finite-difference checks.
    """
    r, c = targets.cells
    cls = focal_heatmap(out.heatmap, targets.heatmap)
    l1, g_l1 = l1_terms(out, targets)
    boxes_pred = boxes_at(out, r, c, targets.spec, targets.stride)
    boxes_gt = targets.boxes[r, c]
    iou, g_iou = iou_pred_loss(out.iou[r, c, 0], boxes_pred, boxes_gt, target=iou_target)
    od, g_box = od_iou_loss(boxes_pred, boxes_gt, kind=kind)
    total = combine(cls, iou, od, l1["off"], l1["z"], l1["size"], l1["ori"], lam)

    g_off, g_z, g_size = _box_to_map_grads(g_box, boxes_pred, targets.spec, targets.stride)
    grads = {
        "offset": lam * (g_off + g_l1["offset"]),
        "z": lam * (g_z + g_l1["z"]),
        "size": lam * (g_size + g_l1["size"]),
        "rot": lam * g_l1["rot"],
        "iou": g_iou.reshape(-1, 1),
    }
    return LossReport(cls, iou, od, l1["off"], l1["z"], l1["size"], l1["ori"], total, lam, kind,
                      grads)


REGRESSION_MAPS = ("offset", "z", "size", "rot", "iou")


def with_cells(out: HeadOutput, rows, cols, values: Dict[str, np.ndarray]) -> HeadOutput:
    """Copy of ``out`` with regression maps overwritten at the given cells."""
    maps = {k: getattr(out, k).copy() for k in ("heatmap",) + REGRESSION_MAPS}
    for k, v in values.items():
        maps[k][rows, cols] = v
    return HeadOutput(**maps)


def gradient_check(out: HeadOutput, targets: TargetMaps, lam: float = DEFAULT_LAMBDA,
                   kind: str = "DIoU", h: float = 1e-5, floor: float = 1e-6
                   ) -> Dict[str, float]:
    """Max relative error per map between analytic and central-difference gradients.

    IoU-branch targets are frozen at their unperturbed values, matching the
    stop-gradient in :func:`total_loss`. Relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    r, c = targets.cells
    boxes_pred = boxes_at(out, r, c, targets.spec, targets.stride)
    frozen = iou_targets(boxes_pred, targets.boxes[r, c])
    rep = total_loss(out, targets, lam, kind, iou_target=frozen)
    errs = {}
    for name in REGRESSION_MAPS:
        base = getattr(out, name)[r, c].copy()
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sgn * h
                o2 = with_cells(out, r, c, {name: pert})
                vals.append(total_loss(o2, targets, lam, kind, iou_target=frozen).total)
            num[idx] = (vals[0] - vals[1]) / (2 * h)
        ana = rep.grads[name]
        den = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        errs[name] = float((np.abs(ana - num) / den).max()) if ana.size else 0.0
    return errs
