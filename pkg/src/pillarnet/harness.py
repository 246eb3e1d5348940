"""Synthetic scenes, sweep accumulation, augmentation, target assembly and the
end-to-end forward / benchmark drivers."""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .geom import Box3D, BoxBEV, intersect_area, iou_bev, near_kink, od_iou_family
from .grid import GridSpec
from .head import (Detection, HeadOutput, NUSCENES_BETA, boxes_at, decode, nms_rotated,
                   rectify_detections, to_jsonl)
from .losses import (MIN_RADIUS, TargetMaps, draw_gaussian, gaussian_radius, gradient_check,
                     iou_targets, total_loss, with_cells)
from .network import ModelConfig, PillarNet
from .pillars import PointCloud, pillarize

# (l, w, h) templates; the car is the canonical 3.9 x 1.6 x 1.5 box
CLASS_SIZES = {0: (3.9, 1.6, 1.5), 1: (0.8, 0.7, 1.75), 2: (1.8, 0.6, 1.7)}
CLASS_NAMES = ("car", "pedestrian", "cyclist")
GROUND_Z = -1.8
MIN_CENTER_GAP = 2.5


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    seed: int
    boxes: Tuple[Box3D, ...]
    labels: Tuple[int, ...]
    points: PointCloud
    spec: GridSpec

    def box_array(self) -> np.ndarray:
        return np.array([b.as_array() for b in self.boxes]).reshape(-1, 7)


def _ground(spec: GridSpec) -> float:
    z0, z1 = spec.z_range
    return GROUND_Z if z0 < GROUND_Z < z1 - 2.0 else z0 + 0.05 * (z1 - z0)


def points_in_box(xyz: np.ndarray, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside ``box`` (shrunk by ``margin``)."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = xyz[:, 0] - box.cx, xyz[:, 1] - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    dz = xyz[:, 2] - box.cz
    return ((np.abs(u) < 0.5 * box.l - margin) & (np.abs(v) < 0.5 * box.w - margin)
            & (np.abs(dz) < 0.5 * box.h - margin))


def _surface_points(box: Box3D, n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Points on the four sides and the top of a box, in world coordinates."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    a, b = rng.random(n) - 0.5, rng.random(n) - 0.5
    u = np.select([face == 0, face == 1, face == 2, face == 3], [a * l, a * l, 0.5 * l, -0.5 * l],
                  a * l)
    v = np.select([face == 0, face == 1, face == 2, face == 3], [0.5 * w, -0.5 * w, a * w, a * w],
                  b * w)
    z = np.where(face == 4, 0.5 * h, b * h)
    local = np.stack([u, v, z], axis=1) + rng.normal(0, noise, (n, 3))
    c, s = math.cos(box.theta), math.sin(box.theta)
    x = box.cx + c * local[:, 0] - s * local[:, 1]
    y = box.cy + s * local[:, 0] + c * local[:, 1]
    return np.stack([x, y, box.cz + local[:, 2]], axis=1)


def generate_scene(seed: int, spec: GridSpec, n_objects: int = 8, clutter_density: float = 0.02,
                   noise: float = 0.02, ground_density: float = 0.0, points_per_m2: float = 15.0
                   ) -> SyntheticScene:
    """Deterministic synthetic scene.

    Boxes are non-overlapping, at least ``MIN_CENTER_GAP`` apart and fully
    inside the x/y range. Clutter (``clutter_density`` points per m^2) is
    drawn from its own stream, so doubling the density keeps the original
    clutter points as a prefix.
    """
    rng = np.random.default_rng([seed, 0])
    (x0, x1), (y0, y1) = spec.x_range, spec.y_range
    ground = _ground(spec)
    boxes: List[Box3D] = []
    labels: List[int] = []
    for _ in range(n_objects):
        label = int(rng.integers(0, len(CLASS_SIZES)))
        tl, tw, th = CLASS_SIZES[label]
        jit = rng.uniform(0.9, 1.1, 3)
        l, w, h = tl * jit[0], tw * jit[1], th * jit[2]
        r = 0.5 * math.hypot(l, w)
        if x1 - x0 <= 2 * r or y1 - y0 <= 2 * r:
            continue
        for _attempt in range(200):
            cx = rng.uniform(x0 + r, x1 - r)
            cy = rng.uniform(y0 + r, y1 - r)
            theta = rng.uniform(-math.pi, math.pi)
            cand = Box3D(cx, cy, ground + 0.5 * h, l, w, h, theta)
            if all(math.hypot(cx - b.cx, cy - b.cy) >= MIN_CENTER_GAP
                   and intersect_area(cand.bev, b.bev) == 0.0 for b in boxes):
                boxes.append(cand)
                labels.append(label)
                break

    parts = []
    for b in boxes:
        area = 2 * (b.l + b.w) * b.h + b.l * b.w
        n = max(1, int(round(points_per_m2 * area)))
        xyz = _surface_points(b, n, noise, rng)
        parts.append(np.concatenate([xyz, rng.random((n, 1)), np.zeros((n, 1))], axis=1))

    area = (x1 - x0) * (y1 - y0)
    if ground_density > 0:
        g_rng = np.random.default_rng([seed, 2])
        n = int(round(ground_density * area))
        u = g_rng.random((n, 3))
        xyz = np.stack([x0 + u[:, 0] * (x1 - x0), y0 + u[:, 1] * (y1 - y0),
                        ground + g_rng.normal(0, noise, n)], axis=1)
        parts.append(np.concatenate([xyz, u[:, 2:3], np.zeros((n, 1))], axis=1))
    if clutter_density > 0:
        c_rng = np.random.default_rng([seed, 1])
        n = int(round(clutter_density * area))
        u = c_rng.random((n, 4))
        xyz = np.stack([x0 + u[:, 0] * (x1 - x0), y0 + u[:, 1] * (y1 - y0),
                        ground + u[:, 2] * 3.0], axis=1)
        parts.append(np.concatenate([xyz, u[:, 3:4], np.zeros((n, 1))], axis=1))
    pts = np.concatenate(parts) if parts else np.zeros((0, 5))
    return SyntheticScene(seed, tuple(boxes), tuple(labels), PointCloud(pts), spec)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class Pose2D:
    """Planar rigid transform ``p -> R(yaw) p + t``."""

    yaw: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def apply(self, xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x, y = xy[:, 0], xy[:, 1]
        return np.stack([c * x - s * y + self.tx, s * x + c * y + self.ty], axis=1)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """``self after other``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(self.yaw + other.yaw, c * other.tx - s * other.ty + self.tx,
                      s * other.tx + c * other.ty + self.ty)

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-self.yaw, -(c * self.tx + s * self.ty), -(-s * self.tx + c * self.ty))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Sweep:
    cloud: PointCloud
    dt: float          # seconds before the latest sweep
    pose: Pose2D       # sweep frame -> latest frame


def accumulate_sweeps(sweeps: Sequence[Sweep]) -> PointCloud:
    """Merge sweeps into the latest frame, writing each sweep's offset into dt."""
    dts = [s.dt for s in sweeps]
    if any(d < 0 for d in dts) or any(b < a for a, b in zip(dts, dts[1:])):
        raise ValueError(f"sweep offsets must be non-negative and ascending, got {dts}")
    parts = []
    for s in sweeps:
        p = s.cloud.points.copy()
        if s.pose != Pose2D():
            p[:, :2] = s.pose.apply(p[:, :2])
        p[:, 4] = s.dt
        parts.append(p)
    return PointCloud(np.concatenate(parts) if parts else np.zeros((0, 5)))


def simulate_sweeps(scene: SyntheticScene, n_sweeps: int = 10, interval: float = 0.05,
                    velocity: Tuple[float, float] = (8.0, 0.0), yaw_rate: float = 0.05,
                    keep: float = 0.6, seed: int = 0) -> List[Sweep]:
    """Split a static scene into sweeps seen from a moving ego, each in its own frame."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for k in range(n_sweeps):
        t = k * interval
        pose = Pose2D(-yaw_rate * t, -velocity[0] * t, -velocity[1] * t)
        sel = rng.random(len(scene.points)) < keep
        p = scene.points.points[sel].copy()
        p[:, :2] = pose.inverse().apply(p[:, :2])
        out.append(Sweep(PointCloud(p), t, pose))
    return out


# ---------------------------------------------------------------------------
# augmentation


def _transform_box(b: Box3D, op: str, arg) -> Box3D:
    if op == "flip_x":
        return b.replace(cy=-b.cy, theta=-b.theta)
    if op == "flip_y":
        return b.replace(cx=-b.cx, theta=math.pi - b.theta)
    if op == "rotate":
        c, s = math.cos(arg), math.sin(arg)
        return b.replace(cx=c * b.cx - s * b.cy, cy=s * b.cx + c * b.cy, theta=b.theta + arg)
    if op == "scale":
        return Box3D(b.cx * arg, b.cy * arg, b.cz * arg, b.l * arg, b.w * arg, b.h * arg, b.theta)
    if op == "translate":
        t = tuple(arg) + (0.0,) * (3 - len(arg))
        return b.replace(cx=b.cx + t[0], cy=b.cy + t[1], cz=b.cz + t[2])
    raise ValueError(f"unknown augmentation {op!r}")


def _transform_points(p: np.ndarray, op: str, arg) -> np.ndarray:
    p = p.copy()
    if op == "flip_x":
        p[:, 1] = -p[:, 1]
    elif op == "flip_y":
        p[:, 0] = -p[:, 0]
    elif op == "rotate":
        c, s = math.cos(arg), math.sin(arg)
        x, y = p[:, 0].copy(), p[:, 1].copy()
        p[:, 0], p[:, 1] = c * x - s * y, s * x + c * y
    elif op == "scale":
        p[:, :3] *= arg
    elif op == "translate":
        t = tuple(arg) + (0.0,) * (3 - len(arg))
        p[:, :3] += np.asarray(t)
    else:
        raise ValueError(f"unknown augmentation {op!r}")
    return p


def augment(scene: SyntheticScene, ops: Sequence) -> SyntheticScene:
    """Apply ops in order, e.g. ``[("flip_x",), ("rotate", 0.3), ("scale", 1.05)]``."""
    pts = scene.points.points
    boxes = list(scene.boxes)
    for entry in ops:
        op, arg = (entry, None) if isinstance(entry, str) else (entry[0], entry[1] if len(entry) > 1 else None)
        pts = _transform_points(pts, op, arg)
        boxes = [_transform_box(b, op, arg) for b in boxes]
    return replace(scene, boxes=tuple(boxes), points=PointCloud(pts))


def random_augment(scene: SyntheticScene, rng: np.random.Generator,
                   rot_range: float = math.pi / 4, scale_range=(0.9, 1.1),
                   translate_std: float = 0.5) -> Tuple[SyntheticScene, list]:
    ops: list = []
    if rng.random() < 0.5:
        ops.append(("flip_x",))
    if rng.random() < 0.5:
        ops.append(("flip_y",))
    ops.append(("rotate", float(rng.uniform(-rot_range, rot_range))))
    ops.append(("scale", float(rng.uniform(*scale_range))))
    ops.append(("translate", tuple(float(v) for v in rng.normal(0, translate_std, 3))))
    return augment(scene, ops), ops


# ---------------------------------------------------------------------------
# targets


def assemble_targets(scene: SyntheticScene, spec: Optional[GridSpec] = None, stride: int = 8,
                     num_classes: int = 3, min_overlap: float = 0.1) -> TargetMaps:
    """Heatmap splats and regression targets at each box's centre cell."""
    spec = spec or scene.spec
    h, w = spec.dims_at(stride)
    sx, sy = spec.pillar[0] * stride, spec.pillar[1] * stride
    hm = np.zeros((h, w, num_classes))
    offset = np.zeros((h, w, 2))
    z = np.zeros((h, w, 1))
    size = np.zeros((h, w, 3))
    rot = np.zeros((h, w, 2))
    boxes = np.zeros((h, w, 7))
    mask = np.zeros((h, w), bool)
    for b, label in zip(scene.boxes, scene.labels):
        fx = (b.cx - spec.x_range[0]) / sx
        fy = (b.cy - spec.y_range[0]) / sy
        col, row = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= row < h and 0 <= col < w) or label >= num_classes:
            continue
        radius = max(MIN_RADIUS, int(gaussian_radius(b.l / sx, b.w / sy, min_overlap)))
        draw_gaussian(hm[:, :, label], row, col, radius)
        if mask[row, col]:
            continue
        mask[row, col] = True
        offset[row, col] = (fx - col, fy - row)
        z[row, col] = b.cz
        size[row, col] = np.log([b.w, b.l, b.h])
        rot[row, col] = (math.sin(b.theta), math.cos(b.theta))
        boxes[row, col] = b.as_array()
    return TargetMaps(hm, offset, z, size, rot, boxes, mask, spec, stride)


def oracle_head_output(t: TargetMaps) -> HeadOutput:
    """Head maps a perfect network would emit for ``t`` (IoU branch = 1 at centres)."""
    iou = np.where(t.mask[..., None], 1.0, 0.0)
    return HeadOutput(t.heatmap.copy(), t.offset.copy(), t.z.copy(), t.size.copy(), t.rot.copy(),
                      iou)


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelineConfig:
    spec: GridSpec = field(default_factory=GridSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    weight_seed: int = 0
    k: int = 500
    beta: Union[float, Tuple[float, ...]] = NUSCENES_BETA
    nms_mode: str = "class_agnostic"
    score_thresh: float = 0.1
    nms_iou: Union[float, Tuple[float, ...]] = 0.2
    points_channels: int = 5

    def __post_init__(self):
        if abs(self.spec.pillar[0] - self.model.base_pillar) > 1e-12:
            raise ValueError(
                f"grid pillar {self.spec.pillar} must equal the model base pillar "
                f"{self.model.base_pillar}")

    def to_dict(self) -> dict:
        return {"grid": self.spec.to_dict(), "model": self.model.to_dict(),
                "weight_seed": self.weight_seed, "k": self.k, "beta": self.beta,
                "nms": {"mode": self.nms_mode, "score_thresh": self.score_thresh,
                        "iou_thresh": self.nms_iou},
                "points_channels": self.points_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        nms = d.get("nms", {})
        beta = d.get("beta", NUSCENES_BETA)
        iou = nms.get("iou_thresh", 0.2)
        return cls(spec=GridSpec.from_dict(d["grid"]) if "grid" in d else GridSpec(),
                   model=ModelConfig.from_dict(d.get("model", {})),
                   weight_seed=int(d.get("weight_seed", 0)), k=int(d.get("k", 500)),
                   beta=tuple(beta) if isinstance(beta, list) else beta,
                   nms_mode=nms.get("mode", "class_agnostic"),
                   score_thresh=float(nms.get("score_thresh", 0.1)),
                   nms_iou=tuple(iou) if isinstance(iou, list) else iou,
                   points_channels=int(d.get("points_channels", 5)))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class PipelineResult:
    detections: List[Detection]
    timings: Dict[str, float]
    active_sites: Dict[str, int]
    head: Optional[HeadOutput] = None


def postprocess(out: HeadOutput, cfg: PipelineConfig, stride: int = 8) -> List[Detection]:
    """decode -> rectify -> NMS."""
    dets = decode(out, cfg.spec, stride, cfg.k)
    dets = rectify_detections(dets, cfg.beta)
    return nms_rotated(dets, cfg.nms_mode, cfg.score_thresh, cfg.nms_iou)


def run_pipeline(source: Union[SyntheticScene, PointCloud], cfg: PipelineConfig,
                 model: Optional[PillarNet] = None) -> PipelineResult:
    """Pillarize, encode, fuse, predict and post-process one scene, timing each stage."""
    if model is None:
        model = PillarNet.random(cfg.model, cfg.weight_seed)
    pc = source.points if isinstance(source, SyntheticScene) else source
    t = {}
    stats: Dict[str, int] = {}
    t0 = time.perf_counter()
    grid = pillarize(pc, cfg.spec, model.pillar_params(), stride=model.input_stride)
    t1 = time.perf_counter()
    stats["pillars"] = len(grid)
    s8, d16 = model.encode(grid, stats)
    t2 = time.perf_counter()
    fused = model.neck(s8, d16)
    t3 = time.perf_counter()
    out = model.head(fused)
    t4 = time.perf_counter()
    dets = postprocess(out, cfg)
    t5 = time.perf_counter()
    t.update(pillarize=t1 - t0, encoder=t2 - t1, neck=t3 - t2, head=t4 - t3, post=t5 - t4)
    t["total"] = t5 - t0
    return PipelineResult(dets, {k: 1e3 * v for k, v in t.items()}, stats, out)


def forward_jsonl(source, cfg: PipelineConfig, model: Optional[PillarNet] = None,
                  scene_id=None) -> str:
    return to_jsonl(run_pipeline(source, cfg, model).detections, scene_id)


# ---------------------------------------------------------------------------
# loss check


def regression_near_kink(pred: HeadOutput, targets: TargetMaps, margin: float = 1e-3) -> bool:
    """True if any L1 or OD-IoU term sits within ``margin`` of a derivative kink."""
    r, c = targets.cells
    for name in ("offset", "z", "size", "rot"):
        if np.any(np.abs(getattr(pred, name)[r, c] - getattr(targets, name)[r, c]) < margin):
            return True
    boxes = boxes_at(pred, r, c, targets.spec, targets.stride)
    gt = targets.boxes[r, c]
    if np.any(np.abs(pred.iou[r, c, 0] - iou_targets(boxes, gt)) < margin):
        return True
    return any(near_kink(Box3D.from_array(p), Box3D.from_array(g), margin)
               for p, g in zip(boxes, gt))


def perturbed_prediction(targets: TargetMaps, rng: np.random.Generator,
                         sigma: float = 0.1) -> HeadOutput:
    """Oracle head maps with Gaussian noise on the regression outputs at centres."""
    out = oracle_head_output(targets)
    r, c = targets.cells
    noisy = {name: getattr(out, name)[r, c] + rng.normal(0, sigma, getattr(out, name)[r, c].shape)
             for name in ("offset", "z", "size", "rot")}
    noisy["iou"] = rng.uniform(-0.9, 0.9, (len(r), 1))
    return with_cells(out, r, c, noisy)


LOSSCHECK_SPEC = GridSpec((-9.6, 9.6), (-9.6, 9.6), (-5.0, 3.0), (0.075, 0.075))


def losscheck_report(seed: int, kind: str = "DIoU", lam: float = 0.25, tol: float = 1e-4,
                     n_objects: int = 3) -> dict:
    """Loss terms and finite-difference gradient errors on a small synthetic scene.

    Kink-adjacent draws are resampled.
    """
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        scene = generate_scene(int(rng.integers(1 << 31)), LOSSCHECK_SPEC, n_objects,
                               clutter_density=0.0)
        targets = assemble_targets(scene)
        pred = perturbed_prediction(targets, rng)
        if not regression_near_kink(pred, targets):
            break
    else:
        raise RuntimeError("could not draw a kink-free prediction")
    rep = total_loss(pred, targets, lam, kind)
    errs = gradient_check(pred, targets, lam, kind)
    return {"seed": seed, "kind": kind, "lambda": lam, "terms": rep.terms(),
            "grad_max_rel_err": errs, "tolerance": tol,
            "pass": all(e < tol for e in errs.values())}


# ---------------------------------------------------------------------------
# bench

BENCH_STAGES = ("pillarize", "encoder", "neck", "head", "post", "total")


def bench(config_grid: Sequence[dict], seed: int = 0, runs: int = 20, warmup: int = 3
          ) -> List[dict]:
    """Median per-stage timings and active-site counts for each config entry.

    Each entry holds ``name``, a pipeline config dict under ``pipeline`` and
    scene settings ``n_objects`` / ``clutter_density`` / ``ground_density``.
    """
    rows = []
    for entry in config_grid:
        cfg = PipelineConfig.from_dict(entry.get("pipeline", {}))
        scene = generate_scene(seed, cfg.spec, entry.get("n_objects", 8),
                               entry.get("clutter_density", 0.02),
                               ground_density=entry.get("ground_density", 0.0))
        model = PillarNet.random(cfg.model, cfg.weight_seed)
        samples = {k: [] for k in BENCH_STAGES}
        sites = None
        for i in range(warmup + runs):
            res = run_pipeline(scene, cfg, model)
            if sites is None:
                sites = res.active_sites
            elif sites != res.active_sites:
                raise RuntimeError("active-site counts changed between identical runs")
            if i >= warmup:
                for k in BENCH_STAGES:
                    samples[k].append(res.timings[k])
        row = {"config": entry.get("name", f"cfg{len(rows)}"),
               "pillar_size": cfg.model.pillar_size, "backbone": cfg.model.backbone,
               "neck": cfg.model.neck.variant, "clutter_density": entry.get("clutter_density", 0.02),
               "runs": runs}
        for k, v in sites.items():
            row[f"sites_{k}"] = v
        for k in BENCH_STAGES:
            row[f"{k}_ms"] = statistics.median(samples[k])
        rows.append(row)
    return rows


def write_csv(path, rows: Sequence[dict]) -> None:
    cols: List[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=cols)
        wr.writeheader()
        for r in rows:
            wr.writerow(r)


# ---------------------------------------------------------------------------
# orientation / IoU interplay curves

CURVE_BOX = (0.0, 0.0, 3.9, 1.6, 0.0)
# centre offset along x where IoU(theta) has an interior local maximum:
# IoU is 0 at theta = 0 and peaks near theta = 0.28 rad
CURVE_WITNESS_OFFSET = 3.9
CURVE_OFFSETS = (0.0, 1.0, 2.0, 3.0, CURVE_WITNESS_OFFSET)
CURVE_SCALES = (0.5, 0.75, 1.0, 1.5, 2.0)


def _od_loss_bev(pred: BoxBEV, gt: BoxBEV) -> float:
    p = Box3D(pred.cx, pred.cy, 0.0, pred.l, pred.w, 1.0, pred.theta)
    g = Box3D(gt.cx, gt.cy, 0.0, gt.l, gt.w, 1.0, gt.theta)
    return 1.0 - od_iou_family(p, g, "IoU")[0]


def interplay_curves(n_theta: int = 181, n_grid: int = 41) -> List[dict]:
    """IoU against rotation / centre / size for the canonical 3.9 x 1.6 box.

    Panels: A rotation sweep at several x offsets, B rotation sweep at several
    size scales, C centre grid at theta = pi/4, D size grid at theta = pi/4.
    Every row also carries the orientation-decoupled IoU loss.
    """
    gt = BoxBEV(*CURVE_BOX)
    rows = []

    def add(panel, p, **extra):
        rows.append({"panel": panel, "x": p.cx, "y": p.cy, "l": p.l, "w": p.w, "theta": p.theta,
                     "iou": iou_bev(p, gt), "od_iou_loss": _od_loss_bev(p, gt), **extra})

    thetas = np.linspace(0.0, math.pi, n_theta)
    for dx in CURVE_OFFSETS:
        for th in thetas:
            add("A", BoxBEV(dx, 0.0, gt.l, gt.w, float(th)))
    for sc in CURVE_SCALES:
        for th in thetas:
            add("B", BoxBEV(0.0, 0.0, gt.l * sc, gt.w * sc, float(th)))
    q = math.pi / 4
    for x in np.linspace(-3, 3, n_grid):
        for y in np.linspace(-3, 3, n_grid):
            add("C", BoxBEV(float(x), float(y), gt.l, gt.w, q))
    for l in np.linspace(0.5, 8, n_grid):
        for w in np.linspace(0.2, 4, n_grid):
            add("D", BoxBEV(0.0, 0.0, float(l), float(w), q))
    return rows


def interior_local_maxima(values: Sequence[float]) -> List[int]:
    v = list(values)
    return [i for i in range(1, len(v) - 1) if v[i] > v[i - 1] and v[i] >= v[i + 1]]
