"""PillarNet graph: sparse encoder stages, dense stage 5, neck variants and the
center-head convolutions.

All layers are described once by :func:`layer_specs`; weight initialisation,
``describe`` and the forward pass read from the same list, so a weight
container is checked against it by name and shape.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .grid import SparseGrid2D
from .head import HeadOutput
from .pillars import AUG_CHANNELS
from .sparse2d import (ConvKernel2D, DenseMap2D, affine_act, dense_affine_act, dense_conv,
                       densify, sparse_conv)

BASE_PILLAR = 0.075
BACKBONES = ("vgg", "r18", "r34")
NECKS = ("v1", "v2", "v3")
STRIDES = (1, 2, 4, 8, 16)

# desk-scale channel widths per stride (stage 5 is the dense stride-16 stage)
STAGE_CHANNELS = {1: 32, 2: 64, 4: 128, 8: 256, 16: 256}
NECK_CHANNELS = 128
PILLAR_CHANNELS = 32

# post-entry units per stage: plain convs for vgg, residual blocks otherwise
BLOCK_COUNTS = {
    "vgg": {1: 1, 2: 1, 4: 1, 8: 1, 16: 1},
    "r18": {1: 2, 2: 2, 4: 2, 8: 2, 16: 2},
    "r34": {1: 2, 2: 2, 4: 3, 8: 3, 16: 3},
}


class ConfigError(ValueError):
    pass


class WeightShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NeckKind:
    variant: str = "v3"
    group_convs: int = 2
    sparse_spatial: bool = False  # neckv2-D: submanifold convs on the stride-8 branch

    def __post_init__(self):
        if self.variant not in NECKS:
            raise ConfigError(f"neck variant must be one of {NECKS}, got {self.variant!r}")
        if self.group_convs < 1:
            raise ConfigError("group_convs must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "r18"
    neck: NeckKind = field(default_factory=NeckKind)
    pillar_size: float = BASE_PILLAR
    base_pillar: float = BASE_PILLAR
    head_channels: int = 64
    num_classes: int = 3
    # width overrides; None keeps the declared constants
    channels: Optional[Dict[int, int]] = None
    neck_channels: Optional[int] = None
    pillar_channels: Optional[int] = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if isinstance(self.neck, dict):
            object.__setattr__(self, "neck", NeckKind(**self.neck))
        if self.channels is not None:
            object.__setattr__(self, "channels", {int(k): int(v) for k, v in self.channels.items()})
        self.input_stride  # validates pillar size

    @property
    def input_stride(self) -> int:
        ratio = self.pillar_size / self.base_pillar
        r = int(round(ratio))
        if r not in (1, 2, 4, 8) or abs(ratio - r) > 1e-6:
            raise ConfigError(
                f"pillar_size {self.pillar_size} must be 1, 2, 4 or 8 times {self.base_pillar}")
        return r

    def stage_channels(self, stride: int) -> int:
        ch = dict(STAGE_CHANNELS)
        if self.channels:
            ch.update(self.channels)
        return ch[stride]

    @property
    def neck_width(self) -> int:
        return self.neck_channels or NECK_CHANNELS

    @property
    def pfn_width(self) -> int:
        return self.pillar_channels or PILLAR_CHANNELS

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.channels is not None:
            d["channels"] = {str(k): v for k, v in self.channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "neck" in d and isinstance(d["neck"], dict):
            d["neck"] = NeckKind(**d["neck"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Stage:
    stride: int
    block: str  # "vgg" or "basic-residual"
    count: int
    channels: int
    dense: bool


@dataclass(frozen=True)
class StagePlan:
    stages: Tuple[Stage, ...]
    sparse_upto: int = 8
    dense_from: int = 16

    def __post_init__(self):
        strides = [s.stride for s in self.stages]
        if any(b != 2 * a for a, b in zip(strides, strides[1:])):
            raise ConfigError(f"stage strides must double, got {strides}")
        if not self.stages or not self.stages[-1].dense or self.stages[-1].stride != self.dense_from:
            raise ConfigError("the last stage must be the dense stride-16 stage")
        if sum(1 for s in self.stages if s.dense) != 1:
            raise ConfigError("exactly one dense stage expected")

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(s.stride for s in self.stages)

    @property
    def label(self) -> str:
        return "(" + " ".join(f"{s}x" for s in self.strides) + ")"


def plan_encoder(cfg: ModelConfig) -> StagePlan:
    """Stages kept for ``cfg.pillar_size``: coarser pillars drop leading stages."""
    first = cfg.input_stride
    block = "vgg" if cfg.backbone == "vgg" else "basic-residual"
    stages = tuple(
        Stage(s, block, BLOCK_COUNTS[cfg.backbone][s], cfg.stage_channels(s), s == 16)
        for s in STRIDES if s >= first)
    return StagePlan(stages)


# ---------------------------------------------------------------------------
# layer table


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str        # "sparse" | "dense" | "linear"
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    mode: str = "submanifold"
    affine: bool = True

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.kind == "linear":
            return {"weight": (self.c_out, self.c_in), "bias": (self.c_out,)}
        s = {"weight": (self.k, self.k, self.c_in, self.c_out), "bias": (self.c_out,)}
        if self.affine:
            s.update(scale=(self.c_out,), shift=(self.c_out,))
        return s

    @property
    def n_params(self) -> int:
        return int(sum(math.prod(v) for v in self.shapes.values()))


def _stage_layers(cfg: ModelConfig, plan: StagePlan) -> List[LayerSpec]:
    layers = []
    c_prev = cfg.pfn_width
    for i, st in enumerate(plan.stages):
        pre = f"enc.s{st.stride}"
        kind = "dense" if st.dense else "sparse"
        if st.dense:
            layers.append(LayerSpec(f"{pre}.entry", "dense", c_prev, st.channels, 3, 2, "regular"))
        elif i == 0:
            layers.append(LayerSpec(f"{pre}.entry", "sparse", c_prev, st.channels))
        else:
            layers.append(LayerSpec(f"{pre}.entry", "sparse", c_prev, st.channels, 3, 2, "regular"))
        for j in range(st.count):
            if st.block == "vgg":
                layers.append(LayerSpec(f"{pre}.conv{j}", kind, st.channels, st.channels))
            else:
                layers.append(LayerSpec(f"{pre}.block{j}.conv_a", kind, st.channels, st.channels))
                layers.append(LayerSpec(f"{pre}.block{j}.conv_b", kind, st.channels, st.channels))
        c_prev = st.channels
    return layers


def _neck_layers(cfg: ModelConfig) -> List[LayerSpec]:
    nk = cfg.neck
    c8, c16, cn = cfg.stage_channels(8), cfg.stage_channels(16), cfg.neck_width
    layers = []
    if nk.variant == "v1":
        layers.append(LayerSpec("neck.spatial0", "dense", c8, cn))
        layers.append(LayerSpec("neck.up_proj", "dense", c16, cn, k=1))
        return layers
    if nk.variant == "v3":
        for j in range(nk.group_convs):
            layers.append(LayerSpec(f"neck.enrich{j}", "dense", c16, c16))
    sp_kind = "sparse" if nk.sparse_spatial else "dense"
    for j in range(nk.group_convs):
        layers.append(LayerSpec(f"neck.spatial{j}", sp_kind, c8 if j == 0 else cn, cn))
    layers.append(LayerSpec("neck.up_proj", "dense", c16, cn, k=1))
    for j in range(nk.group_convs):
        layers.append(LayerSpec(f"neck.semantic{j}", "dense", cn, cn))
    for j in range(nk.group_convs):
        layers.append(LayerSpec(f"neck.fuse{j}", "dense", 2 * cn, 2 * cn))
    if nk.variant == "v3":
        for j in range(nk.group_convs):
            layers.append(LayerSpec(f"neck.fuse2_{j}", "dense", 2 * cn, 2 * cn))
    return layers


HEAD_TASKS = (("offset", 2), ("z", 1), ("size", 3), ("rot", 2), ("iou", 1))


def _head_layers(cfg: ModelConfig) -> List[LayerSpec]:
    cin = 2 * cfg.neck_width
    layers = [LayerSpec("head.shared", "dense", cin, cfg.head_channels)]
    layers.append(LayerSpec("head.heatmap", "dense", cfg.head_channels, cfg.num_classes,
                            k=1, affine=False))
    for name, c in HEAD_TASKS:
        layers.append(LayerSpec(f"head.{name}", "dense", cfg.head_channels, c, k=1, affine=False))
    return layers


def layer_specs(cfg: ModelConfig) -> List[LayerSpec]:
    plan = plan_encoder(cfg)
    pfn = LayerSpec("pfn", "linear", AUG_CHANNELS, cfg.pfn_width)
    return [pfn] + _stage_layers(cfg, plan) + _neck_layers(cfg) + _head_layers(cfg)


def parameter_count(cfg: ModelConfig) -> int:
    return sum(l.n_params for l in layer_specs(cfg))


def describe(cfg: ModelConfig) -> List[dict]:
    rows = []
    for l in layer_specs(cfg):
        rows.append({"name": l.name, "kind": l.kind, "k": l.k, "stride": l.stride,
                     "mode": l.mode if l.kind == "sparse" else "-",
                     "c_in": l.c_in, "c_out": l.c_out,
                     "shapes": {k: list(v) for k, v in l.shapes.items()},
                     "params": l.n_params})
    return rows


def init_weights(cfg: ModelConfig, seed: int = 0) -> Dict[str, np.ndarray]:
    """Seeded random float32 weights for every layer of ``cfg``."""
    rng = np.random.default_rng(seed)
    out = {}
    for l in layer_specs(cfg):
        fan_in = l.c_in * (l.k * l.k if l.kind != "linear" else 1)
        shp = l.shapes
        out[f"{l.name}.weight"] = rng.normal(0, math.sqrt(2.0 / fan_in), shp["weight"])
        out[f"{l.name}.bias"] = np.zeros(shp["bias"])
        if l.affine and l.kind != "linear":
            out[f"{l.name}.scale"] = rng.uniform(0.8, 1.2, shp["scale"])
            out[f"{l.name}.shift"] = rng.normal(0, 0.05, shp["shift"])
    out["head.heatmap.bias"][:] = -2.19
    return {k: v.astype(np.float32) for k, v in out.items()}


def check_weights(cfg: ModelConfig, weights: Dict[str, np.ndarray]) -> None:
    for l in layer_specs(cfg):
        for part, shape in l.shapes.items():
            key = f"{l.name}.{part}"
            if key not in weights:
                raise WeightShapeError(f"missing tensor {key}")
            if tuple(weights[key].shape) != tuple(shape):
                raise WeightShapeError(
                    f"{key}: expected shape {tuple(shape)}, got {tuple(weights[key].shape)}")


# ---------------------------------------------------------------------------
# forward


class _Layers:
    """Name-indexed kernels built lazily from a weight dict."""

    def __init__(self, cfg: ModelConfig, weights: Dict[str, np.ndarray]):
        self.specs = {l.name: l for l in layer_specs(cfg)}
        self.w = weights

    def _get(self, key, shape):
        if key not in self.w:
            raise WeightShapeError(f"missing tensor {key}")
        arr = self.w[key]
        if tuple(arr.shape) != tuple(shape):
            raise WeightShapeError(f"{key}: expected shape {tuple(shape)}, got {tuple(arr.shape)}")
        return arr

    def kernel(self, name: str) -> ConvKernel2D:
        l = self.specs[name]
        sh = l.shapes
        mode = l.mode if l.kind == "sparse" else ("regular" if l.stride == 2 else "submanifold")
        return ConvKernel2D(self._get(f"{name}.weight", sh["weight"]),
                            self._get(f"{name}.bias", sh["bias"]), l.stride, mode)

    def affine(self, name: str):
        sh = self.specs[name].shapes
        return self._get(f"{name}.scale", sh["scale"]), self._get(f"{name}.shift", sh["shift"])


def _sparse_unit(x: SparseGrid2D, L: _Layers, name: str, relu: bool = True) -> SparseGrid2D:
    y = sparse_conv(x, L.kernel(name))
    scale, shift = L.affine(name)
    if relu:
        return affine_act(y, scale, shift)
    return y.with_feats(y.feats * scale + shift)


def _dense_unit(x: DenseMap2D, L: _Layers, name: str, relu: bool = True) -> DenseMap2D:
    y = dense_conv(x, L.kernel(name))
    scale, shift = L.affine(name)
    if relu:
        return dense_affine_act(y, scale, shift)
    return DenseMap2D(y.data * scale + shift, y.stride, y.spec)


def _run_stage(x, st: Stage, L: _Layers, dense: bool):
    unit = _dense_unit if dense else _sparse_unit
    pre = f"enc.s{st.stride}"
    x = unit(x, L, f"{pre}.entry")
    for j in range(st.count):
        if st.block == "vgg":
            x = unit(x, L, f"{pre}.conv{j}")
        else:
            y = unit(x, L, f"{pre}.block{j}.conv_a")
            y = unit(y, L, f"{pre}.block{j}.conv_b", relu=False)
            if dense:
                x = DenseMap2D(np.maximum(y.data + x.data, 0.0), y.stride, y.spec)
            else:
                x = x.with_feats(np.maximum(y.feats + x.feats, 0.0))
    return x


def run_encoder(grid: SparseGrid2D, plan: StagePlan, weights: Dict[str, np.ndarray],
                cfg: Optional[ModelConfig] = None,
                stats: Optional[Dict[str, int]] = None) -> Tuple[SparseGrid2D, DenseMap2D]:
    """Sparse stages up to stride 8, then the dense stride-16 stage.

    ``stats`` (if given) receives the active-site count after every sparse
    stage, keyed ``"s<stride>"``.
    """
    if cfg is None:
        cfg = _infer_cfg(plan)
    first = plan.stages[0].stride
    if grid.stride != first:
        raise ConfigError(f"input grid stride {grid.stride} does not match first stage {first}x")
    L = _Layers(cfg, weights)
    x = grid.with_feats(grid.feats.astype(np.float32))
    for st in plan.stages[:-1]:
        x = _run_stage(x, st, L, dense=False)
        if stats is not None:
            stats[f"s{st.stride}"] = len(x)
    sparse8 = x
    dense16 = _run_stage(densify(sparse8), plan.stages[-1], L, dense=True)
    return sparse8, dense16


def _infer_cfg(plan: StagePlan) -> ModelConfig:
    st = plan.stages[0]
    backbone = "vgg" if st.block == "vgg" else ("r34" if plan.stages[-1].count == 3 else "r18")
    return ModelConfig(backbone=backbone, pillar_size=BASE_PILLAR * st.stride)


def upsample2(x: DenseMap2D, target_hw: Tuple[int, int]) -> DenseMap2D:
    """Nearest-neighbour x2, cropped to the stride/2 grid size."""
    d = x.data.repeat(2, axis=0).repeat(2, axis=1)[:target_hw[0], :target_hw[1]]
    return DenseMap2D(d, x.stride // 2, x.spec)


def _concat(a: DenseMap2D, b: DenseMap2D) -> DenseMap2D:
    return DenseMap2D(np.concatenate([a.data, b.data], axis=2), a.stride, a.spec)


def run_neck(sparse8: SparseGrid2D, dense16: DenseMap2D, kind: NeckKind,
             weights: Dict[str, np.ndarray], cfg: Optional[ModelConfig] = None) -> DenseMap2D:
    if cfg is None:
        cfg = ModelConfig(neck=kind)
    if cfg.neck != kind:
        raise ConfigError("neck kind differs from the model config")
    if sparse8.stride != 8 or dense16.stride != 16:
        raise ValueError(f"expected strides 8/16, got {sparse8.stride}/{dense16.stride}")
    L = _Layers(cfg, weights)
    hw8 = sparse8.shape

    if kind.variant == "v1":
        spatial = _dense_unit(densify(sparse8), L, "neck.spatial0")
        up = upsample2(_dense_unit(dense16, L, "neck.up_proj"), hw8)
        return _concat(spatial, up)

    sem = dense16
    if kind.variant == "v3":
        for j in range(kind.group_convs):
            sem = _dense_unit(sem, L, f"neck.enrich{j}")
    if kind.sparse_spatial:
        sp = sparse8
        for j in range(kind.group_convs):
            sp = _sparse_unit(sp, L, f"neck.spatial{j}")
        spatial = densify(sp)
    else:
        spatial = densify(sparse8)
        for j in range(kind.group_convs):
            spatial = _dense_unit(spatial, L, f"neck.spatial{j}")
    up = upsample2(_dense_unit(sem, L, "neck.up_proj"), hw8)
    for j in range(kind.group_convs):
        up = _dense_unit(up, L, f"neck.semantic{j}")
    x = _concat(spatial, up)
    for j in range(kind.group_convs):
        x = _dense_unit(x, L, f"neck.fuse{j}")
    if kind.variant == "v3":
        for j in range(kind.group_convs):
            x = _dense_unit(x, L, f"neck.fuse2_{j}")
    return x


def run_head(fused: DenseMap2D, weights: Dict[str, np.ndarray], cfg: ModelConfig) -> HeadOutput:
    L = _Layers(cfg, weights)
    x = _dense_unit(fused, L, "head.shared")

    def task(name):
        return dense_conv(x, L.kernel(f"head.{name}")).data.astype(np.float64)

    logits = task("heatmap")
    return HeadOutput(
        heatmap=1.0 / (1.0 + np.exp(-logits)),
        offset=task("offset"),
        z=task("z"),
        size=task("size"),
        rot=task("rot"),
        iou=np.clip(task("iou"), -1.0, 1.0),
    )


class PillarNet:
    """A configured model with fixed weights; forward passes do not mutate it."""

    def __init__(self, cfg: ModelConfig, weights: Dict[str, np.ndarray]):
        check_weights(cfg, weights)
        self.cfg = cfg
        self.plan = plan_encoder(cfg)
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}

    @classmethod
    def random(cls, cfg: ModelConfig, seed: int = 0) -> "PillarNet":
        return cls(cfg, init_weights(cfg, seed))

    @property
    def input_stride(self) -> int:
        return self.cfg.input_stride

    def pillar_params(self):
        from .pillars import PillarEncoderParams
        return PillarEncoderParams(self.weights["pfn.weight"], self.weights["pfn.bias"])

    def encode(self, grid: SparseGrid2D, stats=None):
        return run_encoder(grid, self.plan, self.weights, self.cfg, stats)

    def neck(self, sparse8, dense16) -> DenseMap2D:
        return run_neck(sparse8, dense16, self.cfg.neck, self.weights, self.cfg)

    def head(self, fused: DenseMap2D) -> HeadOutput:
        return run_head(fused, self.weights, self.cfg)

    def forward(self, grid: SparseGrid2D, stats=None) -> HeadOutput:
        s8, d16 = self.encode(grid, stats)
        return self.head(self.neck(s8, d16))

    def describe(self) -> List[dict]:
        return describe(self.cfg)

    @property
    def n_params(self) -> int:
        return parameter_count(self.cfg)
