"""Grid specification and the sparse 2D feature grid shared by all stages."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

Coord = Tuple[int, int]


def _cells(lo: float, hi: float, size: float) -> int:
    # tolerate representation error so 108 / 0.075 gives 1440, not 1441
    n = (hi - lo) / size
    return int(math.ceil(n - 1e-9))


@dataclass(frozen=True)
class GridSpec:
    x_range: Tuple[float, float] = (-54.0, 54.0)
    y_range: Tuple[float, float] = (-54.0, 54.0)
    z_range: Tuple[float, float] = (-5.0, 3.0)
    pillar: Tuple[float, float] = (0.075, 0.075)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range", "pillar"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 2 or not all(math.isfinite(x) for x in v):
                raise ValueError(f"{name} must be two finite numbers, got {v}")
            object.__setattr__(self, name, v)
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must have max > min, got {(lo, hi)}")
        if min(self.pillar) <= 0:
            raise ValueError(f"pillar size must be positive, got {self.pillar}")
        if min(self.dims) < 1:
            raise ValueError("grid must have at least one cell per axis")

    @property
    def dims(self) -> Tuple[int, int]:
        """(rows, cols) of the base grid; rows index y, cols index x."""
        return (_cells(*self.y_range, self.pillar[1]), _cells(*self.x_range, self.pillar[0]))

    def dims_at(self, stride: int) -> Tuple[int, int]:
        h, w = self.dims
        return (-(-h // stride), -(-w // stride))

    @classmethod
    def nuscenes(cls) -> "GridSpec":
        return cls()

    @classmethod
    def waymo(cls) -> "GridSpec":
        return cls((-75.2, 75.2), (-75.2, 75.2), (-2.0, 4.0), (0.1, 0.1))

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "z_range": list(self.z_range), "pillar": list(self.pillar)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), tuple(d["z_range"]),
                   tuple(d["pillar"]))


@dataclass(frozen=True, eq=False)
class SparseGrid2D:
    """Active ``(row, col)`` sites with one feature row each.

    ``stride`` counts base-grid cells per site. ``coords`` is kept sorted
    row-major and duplicate free so iteration order is canonical.
    """

    spec: GridSpec
    stride: int
    coords: np.ndarray
    feats: np.ndarray
    _keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.feats)
        if feats.ndim != 2 or len(feats) != len(coords):
            raise ValueError(f"feats must be (N, C) with N={len(coords)}, got {feats.shape}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        h, w = self.shape
        if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= h or coords[:, 1].max() >= w):
            raise ValueError(f"coordinates out of bounds for grid {(h, w)}")
        keys = coords[:, 0] * w + coords[:, 1]
        if len(keys) > 1 and not np.all(np.diff(keys) > 0):
            raise ValueError("coordinates must be unique and row-major sorted; use from_unsorted")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)
        object.__setattr__(self, "_keys", keys)

    @classmethod
    def from_unsorted(cls, spec: GridSpec, stride: int, coords, feats) -> "SparseGrid2D":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(feats)
        _, w = spec.dims_at(stride)
        keys = coords[:, 0] * w + coords[:, 1]
        uniq, first = np.unique(keys, return_index=True)
        if len(uniq) != len(keys):
            raise ValueError("duplicate coordinates")
        return cls(spec, stride, coords[first], feats[first])

    @classmethod
    def empty(cls, spec: GridSpec, stride: int, channels: int, dtype=np.float64) -> "SparseGrid2D":
        return cls(spec, stride, np.zeros((0, 2), np.int64), np.zeros((0, channels), dtype))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.spec.dims_at(self.stride)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def __len__(self) -> int:
        return len(self.coords)

    def lookup(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Site index for each (row, col), or -1 where inactive / out of bounds."""
        h, w = self.shape
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        q = np.where(inside, rows * w + cols, -1)
        pos = np.searchsorted(self._keys, q)
        pos_c = np.minimum(pos, max(len(self._keys) - 1, 0))
        hit = inside & (len(self._keys) > 0)
        if len(self._keys):
            hit &= self._keys[pos_c] == q
        return np.where(hit, pos_c, -1)

    def to_dict(self) -> Dict[Coord, np.ndarray]:
        return {(int(r), int(c)): f for (r, c), f in zip(self.coords, self.feats)}

    def with_feats(self, feats: np.ndarray) -> "SparseGrid2D":
        return SparseGrid2D(self.spec, self.stride, self.coords, feats)

    def equals(self, other: "SparseGrid2D") -> bool:
        """Bitwise equality of coordinates and features."""
        return (self.stride == other.stride and self.spec == other.spec
                and np.array_equal(self.coords, other.coords)
                and self.feats.dtype == other.feats.dtype
                and self.feats.shape == other.feats.shape
                and self.feats.tobytes() == other.feats.tobytes())

    def to_json(self) -> dict:
        return {"spec": self.spec.to_dict(), "stride": self.stride,
                "channels": self.channels, "coords": self.coords.tolist(),
                "features": self.feats.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SparseGrid2D":
        spec = GridSpec.from_dict(d["spec"])
        coords = np.asarray(d["coords"], dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(d["features"], dtype=np.float64).reshape(len(coords), int(d["channels"]))
        return cls(spec, int(d["stride"]), coords, feats)
