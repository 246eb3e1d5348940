"""Sparse 2D convolution over :class:`SparseGrid2D`.

A convolution is driven by a rulebook: for every kernel tap, the list of
(input site, output site) pairs it connects. Submanifold convolutions keep the
active set; regular convolutions with stride 2 activate ``coord // 2`` of
every input site. Values at active outputs equal a zero-padded dense
cross-correlation evaluated at the same location, which is what
:func:`dense_conv` computes and what the tests compare against.
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .grid import GridSpec, SparseGrid2D

MODES = ("submanifold", "regular")


def default_workers() -> int:
    return max(1, int(os.environ.get("PILLARNET_THREADS", "1")))


@dataclass(frozen=True, eq=False)
class ConvKernel2D:
    weights: np.ndarray  # (K, K, C_in, C_out)
    bias: np.ndarray     # (C_out,)
    stride: int = 1
    mode: str = "submanifold"

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"weights must be (K, K, C_in, C_out) with odd K, got {w.shape}")
        if b.shape != (w.shape[3],):
            raise ValueError(f"bias must have shape ({w.shape[3]},), got {b.shape}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "submanifold" and self.stride != 1:
            raise ValueError("submanifold convolution requires stride 1")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("kernel weights must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[3]

    def offsets(self) -> List[Tuple[int, int]]:
        p = self.k // 2
        return [(dr, dc) for dr in range(-p, p + 1) for dc in range(-p, p + 1)]

    @classmethod
    def identity(cls, channels: int, k: int = 3, dtype=np.float64) -> "ConvKernel2D":
        w = np.zeros((k, k, channels, channels), dtype)
        w[k // 2, k // 2] = np.eye(channels, dtype=dtype)
        return cls(w, np.zeros(channels, dtype))


@dataclass(frozen=True, eq=False)
class Rulebook:
    """Gather/scatter pairs per kernel tap plus the output active set.

    ``in_idx[t]`` and ``out_idx[t]`` hold the pairs of tap ``t`` (taps in
    row-major kernel order), sorted by output site.
    """

    offsets: List[Tuple[int, int]]
    in_idx: List[np.ndarray]
    out_idx: List[np.ndarray]
    out_coords: np.ndarray
    out_stride: int

    @property
    def n_pairs(self) -> int:
        return int(sum(len(a) for a in self.in_idx))

    def pairs(self) -> Iterator[Tuple[int, int, int]]:
        """(output site, tap, input site) triples, output-major then tap order."""
        triples = [(int(o), t, int(i))
                   for t, (ii, oo) in enumerate(zip(self.in_idx, self.out_idx))
                   for i, o in zip(ii, oo)]
        return iter(sorted(triples))


def output_coords(grid: SparseGrid2D, kernel: ConvKernel2D) -> np.ndarray:
    if kernel.mode == "submanifold":
        return grid.coords
    s = kernel.stride
    if s == 1:
        # stride-1 regular conv dilates the active set by the kernel footprint
        cand = np.concatenate([grid.coords + np.array(o) for o in kernel.offsets()])
        h, w = grid.shape
        ok = (cand[:, 0] >= 0) & (cand[:, 0] < h) & (cand[:, 1] >= 0) & (cand[:, 1] < w)
        cand = cand[ok]
    else:
        cand = grid.coords // s
    if len(cand) == 0:
        return np.zeros((0, 2), np.int64)
    _, w = grid.spec.dims_at(grid.stride * s)
    keys = np.unique(cand[:, 0] * w + cand[:, 1])
    return np.stack([keys // w, keys % w], axis=1)


def build_rulebook(grid: SparseGrid2D, kernel: ConvKernel2D) -> Rulebook:
    out_coords = output_coords(grid, kernel)
    s = kernel.stride
    in_idx, out_idx = [], []
    o_rows, o_cols = out_coords[:, 0] * s, out_coords[:, 1] * s
    all_out = np.arange(len(out_coords))
    for dr, dc in kernel.offsets():
        hit = grid.lookup(o_rows + dr, o_cols + dc)
        m = hit >= 0
        in_idx.append(hit[m])
        out_idx.append(all_out[m])
    return Rulebook(kernel.offsets(), in_idx, out_idx, out_coords, grid.stride * s)


def sparse_conv(grid: SparseGrid2D, kernel: ConvKernel2D, rulebook: Optional[Rulebook] = None,
                workers: Optional[int] = None) -> SparseGrid2D:
    """Apply ``kernel`` to ``grid`` at the rulebook's output sites.

    Per-tap products ``feats @ W[tap]`` run on ``workers`` threads; they are
    then scatter-added in fixed tap order, so the result does not depend on
    the worker count.
    """
    if grid.channels != kernel.c_in:
        raise ValueError(f"grid has {grid.channels} channels, kernel expects {kernel.c_in}")
    rb = rulebook if rulebook is not None else build_rulebook(grid, kernel)
    dtype = np.result_type(grid.feats.dtype, kernel.weights.dtype)
    out = np.broadcast_to(kernel.bias.astype(dtype), (len(rb.out_coords), kernel.c_out)).copy()
    if len(grid) == 0 or len(rb.out_coords) == 0:
        return SparseGrid2D(grid.spec, rb.out_stride, rb.out_coords, out)
    k = kernel.k
    p = k // 2
    feats = grid.feats.astype(dtype, copy=False)
    taps = [t for t in range(len(rb.offsets)) if len(rb.in_idx[t])]

    def product(t):
        dr, dc = rb.offsets[t]
        w = kernel.weights[dr + p, dc + p].astype(dtype, copy=False)
        return feats[rb.in_idx[t]] @ w

    n = workers if workers is not None else default_workers()
    if n > 1 and len(taps) > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            prods = list(ex.map(product, taps))
    else:
        prods = [product(t) for t in taps]
    for t, prod in zip(taps, prods):
        out[rb.out_idx[t]] += prod
    return SparseGrid2D(grid.spec, rb.out_stride, rb.out_coords, out)


def affine_act(grid: SparseGrid2D, scale: np.ndarray, shift: np.ndarray) -> SparseGrid2D:
    """Per-channel ``max(scale * x + shift, 0)`` on active sites only."""
    scale = np.asarray(scale)
    shift = np.asarray(shift)
    if scale.shape != (grid.channels,) or shift.shape != (grid.channels,):
        raise ValueError(f"scale/shift must have shape ({grid.channels},)")
    return grid.with_feats(np.maximum(grid.feats * scale + shift, 0.0))


@dataclass(frozen=True, eq=False)
class DenseMap2D:
    data: np.ndarray  # (H, W, C)
    stride: int
    spec: GridSpec

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError(f"dense map must be (H, W, C), got {d.shape}")
        if d.shape[:2] != self.spec.dims_at(self.stride):
            raise ValueError(
                f"map shape {d.shape[:2]} inconsistent with grid dims "
                f"{self.spec.dims_at(self.stride)} at stride {self.stride}")
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def densify(grid: SparseGrid2D) -> DenseMap2D:
    h, w = grid.shape
    data = np.zeros((h, w, grid.channels), grid.feats.dtype)
    data[grid.coords[:, 0], grid.coords[:, 1]] = grid.feats
    return DenseMap2D(data, grid.stride, grid.spec)


def sparsify(dense: DenseMap2D) -> SparseGrid2D:
    """Sites whose feature vector has any nonzero entry."""
    rows, cols = np.nonzero(np.any(dense.data != 0, axis=2))
    coords = np.stack([rows, cols], axis=1)
    return SparseGrid2D(dense.spec, dense.stride, coords, dense.data[rows, cols])


def dense_conv(dense: DenseMap2D, kernel: ConvKernel2D) -> DenseMap2D:
    """Zero-padded cross-correlation with 'same' padding and stride 1 or 2.

    The kernel's ``mode`` is ignored.
    """
    if dense.channels != kernel.c_in:
        raise ValueError(f"map has {dense.channels} channels, kernel expects {kernel.c_in}")
    k, s = kernel.k, kernel.stride
    p = k // 2
    h, w = dense.shape
    ho, wo = -(-h // s), -(-w // s)
    dtype = np.result_type(dense.data.dtype, kernel.weights.dtype)
    x = np.zeros((h + 2 * p + s, w + 2 * p + s, kernel.c_in), dtype)
    x[p:p + h, p:p + w] = dense.data
    out = np.broadcast_to(kernel.bias.astype(dtype), (ho * wo, kernel.c_out)).copy()
    for kr in range(k):
        for kc in range(k):
            patch = x[kr:kr + s * ho:s, kc:kc + s * wo:s]
            out += patch.reshape(ho * wo, kernel.c_in) @ kernel.weights[kr, kc].astype(dtype, copy=False)
    return DenseMap2D(out.reshape(ho, wo, kernel.c_out), dense.stride * s, dense.spec)


def dense_affine_act(dense: DenseMap2D, scale: np.ndarray, shift: np.ndarray) -> DenseMap2D:
    return DenseMap2D(np.maximum(dense.data * scale + shift, 0.0), dense.stride, dense.spec)


# ---------------------------------------------------------------------------
# weight container: b"PNWT" | u32 version | u64 manifest bytes | manifest json | blob

_MAGIC = b"PNWT"
_VERSION = 1


def save_weights(path: str | os.PathLike, tensors: Dict[str, np.ndarray]) -> None:
    manifest = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        manifest[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset,
                          "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({"tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(head)))
        f.write(head)
        for c in chunks:
            f.write(c)


def load_weights(path: str | os.PathLike) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a weight container")
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    start = 4 + struct.calcsize("<IQ")
    manifest = json.loads(data[start:start + n].decode())["tensors"]
    blob = memoryview(data)[start + n:]
    out = {}
    for name, m in manifest.items():
        if m["dtype"] != "float32":
            raise ValueError(f"{name}: unsupported dtype {m['dtype']}")
        count = int(np.prod(m["shape"], dtype=np.int64))
        if m["nbytes"] != 4 * count or m["offset"] + m["nbytes"] > len(blob):
            raise ValueError(f"{name}: manifest entry inconsistent with data")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=m["offset"])
        out[name] = arr.reshape(m["shape"]).copy()
    return out
