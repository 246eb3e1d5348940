"""Point cloud to sparse pillar grid: quantisation, point augmentation and
max-pooled per-pillar features."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .grid import Coord, GridSpec, SparseGrid2D

AUG_CHANNELS = 10


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points as an (N, 5) array of x, y, z, intensity, dt."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 5))
        if pts.ndim != 2 or pts.shape[1] not in (4, 5):
            raise ValueError(f"points must be (N, 4) or (N, 5), got {pts.shape}")
        if pts.shape[1] == 4:
            pts = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 5)))

    def permuted(self, perm) -> "PointCloud":
        return PointCloud(self.points[np.asarray(perm)])


def load_points(path: str | os.PathLike, channels: int) -> PointCloud:
    """Read a little-endian float32 point file with an explicitly declared channel count."""
    if channels not in (4, 5):
        raise ValueError(f"channels must be 4 or 5, got {channels}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % channels:
        raise ValueError(
            f"{path}: {raw.size} floats is not divisible by the declared {channels} channels")
    return PointCloud(raw.reshape(-1, channels).astype(np.float64))


def save_points(path: str | os.PathLike, pc: PointCloud, channels: int = 5) -> None:
    if channels not in (4, 5):
        raise ValueError(f"channels must be 4 or 5, got {channels}")
    pc.points[:, :channels].astype("<f4").tofile(path)


@dataclass(frozen=True, eq=False)
class PillarEncoderParams:
    weight: np.ndarray  # (C_out, 10)
    bias: np.ndarray    # (C_out,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != AUG_CHANNELS:
            raise ValueError(f"weight must be (C_out, {AUG_CHANNELS}), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias must be ({w.shape[0]},), got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("encoder parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def random(cls, out_channels: int, rng: np.random.Generator) -> "PillarEncoderParams":
        w = rng.normal(0.0, 1.0 / np.sqrt(AUG_CHANNELS), (out_channels, AUG_CHANNELS))
        b = rng.normal(0.0, 0.01, out_channels)
        return cls(w, b)


def _cell_indices(pts: np.ndarray, spec: GridSpec, stride: int):
    """(in-range mask, row, col) for each point; rows index y, cols index x."""
    (x0, x1), (y0, y1), (z0, z1) = spec.x_range, spec.y_range, spec.z_range
    sx, sy = spec.pillar
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    keep = (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)
    col = np.floor((x - x0) / sx).astype(np.int64)
    row = np.floor((y - y0) / sy).astype(np.int64)
    h, w = spec.dims
    keep &= (row >= 0) & (row < h) & (col >= 0) & (col < w)
    return keep, row // stride, col // stride


def assign_pillars(pc: PointCloud, spec: GridSpec, stride: int = 1) -> Dict[Coord, List[int]]:
    """Map each occupied cell to the indices of its points.

    Cells come out in row-major order; point indices keep input order.
    ``stride`` groups ``stride x stride`` base cells into one pillar.
    """
    keep, row, col = _cell_indices(pc.points, spec, stride)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return {}
    _, w = spec.dims_at(stride)
    keys = row[idx] * w + col[idx]
    order = np.argsort(keys, kind="stable")
    idx, keys = idx[order], keys[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    out: Dict[Coord, List[int]] = {}
    for s, e in zip(starts, np.r_[starts[1:], len(idx)]):
        k = int(keys[s])
        out[(k // w, k % w)] = idx[s:e].tolist()
    return out


def _augment(pts: np.ndarray, starts: np.ndarray, coords: np.ndarray,
             spec: GridSpec, stride: int) -> np.ndarray:
    """Ten-channel augmentation for points grouped contiguously by pillar."""
    counts = np.diff(np.r_[starts, len(pts)])
    mean = np.add.reduceat(pts[:, :3], starts, axis=0) / counts[:, None]
    mean = np.repeat(mean, counts, axis=0)
    sx, sy = spec.pillar[0] * stride, spec.pillar[1] * stride
    cx = spec.x_range[0] + (coords[:, 1] + 0.5) * sx
    cy = spec.y_range[0] + (coords[:, 0] + 0.5) * sy
    centre = np.repeat(np.stack([cx, cy], axis=1), counts, axis=0)
    return np.concatenate([pts[:, :5], pts[:, :3] - mean, pts[:, :2] - centre], axis=1)


def augment_points(pc: PointCloud, assignment: Dict[Coord, List[int]], spec: GridSpec,
                   stride: int = 1) -> np.ndarray:
    """Per-point features (x, y, z, i, dt, offsets to pillar mean, offsets to pillar centre).

    Rows follow the assignment: pillars in dict order, points in list order.
    """
    if not assignment:
        return np.zeros((0, AUG_CHANNELS))
    coords = np.array(list(assignment.keys()), dtype=np.int64)
    lists = list(assignment.values())
    idx = np.concatenate([np.asarray(v, dtype=np.int64) for v in lists])
    starts = np.cumsum([0] + [len(v) for v in lists[:-1]])
    return _augment(pc.points[idx], starts, coords, spec, stride)


def pillarize(pc: PointCloud, spec: GridSpec, params: PillarEncoderParams, stride: int = 1,
              max_points_per_pillar: Optional[int] = None,
              max_pillars: Optional[int] = None) -> SparseGrid2D:
    """Encode a point cloud into a sparse pillar grid.

    Each point's augmented vector goes through ``relu(W @ aug + b)`` and the
    pillar feature is the elementwise max over its points. Points are put in
    a canonical order first, so the output is bitwise independent of input
    order. The caps are off by default; when set, the first points / pillars
    in canonical order are kept.
    """
    pts = pc.points
    keep, row, col = _cell_indices(pts, spec, stride)
    if not keep.any():
        return SparseGrid2D.empty(spec, stride, params.out_channels)
    pts, row, col = pts[keep], row[keep], col[keep]
    _, w = spec.dims_at(stride)
    keys = row * w + col
    # lexsort: last key is primary
    order = np.lexsort((pts[:, 4], pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], keys))
    pts, keys = pts[order], keys[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])

    if max_pillars is not None and len(starts) > max_pillars:
        end = starts[max_pillars]
        pts, keys, starts = pts[:end], keys[:end], starts[:max_pillars]
    if max_points_per_pillar is not None:
        rank = np.arange(len(pts)) - np.repeat(starts, np.diff(np.r_[starts, len(pts)]))
        sel = rank < max_points_per_pillar
        pts, keys = pts[sel], keys[sel]
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])

    ukeys = keys[starts]
    coords = np.stack([ukeys // w, ukeys % w], axis=1)
    aug = _augment(pts, starts, coords, spec, stride)
    act = np.maximum(aug @ params.weight.T + params.bias, 0.0)
    feats = np.maximum.reduceat(act, starts, axis=0)
    return SparseGrid2D(spec, stride, coords, feats)
