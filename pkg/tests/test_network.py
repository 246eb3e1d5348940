import itertools
import json

import numpy as np
import pytest

from pillarnet.grid import SparseGrid2D
from pillarnet.harness import generate_scene
from pillarnet.network import (ConfigError, ModelConfig, NeckKind, PillarNet, WeightShapeError,
                               describe, init_weights, layer_specs, parameter_count, plan_encoder,
                               run_neck)
from pillarnet.pillars import pillarize

from conftest import NARROW, SMALL_SPEC

PILLARS = (0.075, 0.15, 0.3, 0.6)


def _cfg(**kw):
    return ModelConfig(**{**NARROW, **kw})


class TestPlan:
    @pytest.mark.parametrize("pillar,label", [(0.075, "(1x 2x 4x 8x 16x)"),
                                              (0.15, "(2x 4x 8x 16x)"),
                                              (0.3, "(4x 8x 16x)"),
                                              (0.6, "(8x 16x)")])
    def test_stage_tuples(self, pillar, label):
        plan = plan_encoder(ModelConfig(pillar_size=pillar))
        assert plan.label == label
        assert plan.stages[-1].dense and plan.stages[-1].stride == 16
        assert all(not s.dense for s in plan.stages[:-1])

    @pytest.mark.parametrize("pillar", [0.1, 0.45, 1.2, 0.0375])
    def test_unsupported_pillar(self, pillar):
        with pytest.raises(ConfigError):
            ModelConfig(pillar_size=pillar)

    def test_bad_backbone_and_neck(self):
        with pytest.raises(ConfigError):
            ModelConfig(backbone="r50")
        with pytest.raises(ConfigError):
            NeckKind(variant="v4")

    def test_block_counts(self):
        r34 = plan_encoder(ModelConfig(backbone="r34"))
        assert [s.count for s in r34.stages] == [2, 2, 3, 3, 3]
        vgg = plan_encoder(ModelConfig(backbone="vgg"))
        assert {s.block for s in vgg.stages} == {"vgg"}


class TestLayers:
    def test_parameter_ordering(self):
        counts = [parameter_count(ModelConfig(backbone=b)) for b in ("vgg", "r18", "r34")]
        assert counts[0] < counts[1] < counts[2]

    def test_describe_covers_weights(self):
        cfg = ModelConfig()
        rows = describe(cfg)
        assert sum(r["params"] for r in rows) == parameter_count(cfg)
        w = init_weights(cfg, 0)
        assert sum(v.size for v in w.values()) == parameter_count(cfg)
        assert all(v.dtype == np.float32 for v in w.values())
        assert len({r["name"] for r in rows}) == len(rows)

    def test_stride_two_entries(self):
        specs = {l.name: l for l in layer_specs(ModelConfig())}
        assert specs["enc.s1.entry"].stride == 1
        for s in (2, 4, 8):
            l = specs[f"enc.s{s}.entry"]
            assert (l.kind, l.stride, l.mode) == ("sparse", 2, "regular")
        assert specs["enc.s16.entry"].kind == "dense"

    def test_weights_seeded(self):
        a, b = init_weights(_cfg(), 3), init_weights(_cfg(), 3)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = init_weights(_cfg(), 4)
        assert not np.array_equal(a["pfn.weight"], c["pfn.weight"])

    def test_shape_mismatch(self):
        cfg = _cfg()
        w = init_weights(cfg, 0)
        w["enc.s2.entry.weight"] = np.zeros((3, 3, 8, 9), np.float32)
        with pytest.raises(WeightShapeError, match="enc.s2.entry.weight"):
            PillarNet(cfg, w)
        del w["enc.s2.entry.weight"]
        with pytest.raises(WeightShapeError, match="missing"):
            PillarNet(cfg, w)

    def test_config_json_round_trip(self):
        cfg = _cfg(backbone="r34", neck=NeckKind("v2", 3, True), pillar_size=0.3)
        assert ModelConfig.from_json(cfg.to_json()) == cfg
        assert ModelConfig.from_dict(json.loads(ModelConfig().to_json())) == ModelConfig()


class TestEncoder:
    def test_stride_mismatch(self):
        cfg = _cfg(pillar_size=0.15)
        net = PillarNet.random(cfg)
        g = SparseGrid2D.empty(SMALL_SPEC, 1, 8)
        with pytest.raises(ConfigError):
            net.encode(g)

    def test_empty_grid(self):
        cfg = _cfg()
        net = PillarNet.random(cfg, 1)
        s8, d16 = net.encode(SparseGrid2D.empty(SMALL_SPEC, 1, 8))
        assert len(s8) == 0 and s8.stride == 8
        assert d16.shape == SMALL_SPEC.dims_at(16)
        # zero input: the entry conv emits its bias everywhere; the four convs after
        # it only see zero padding within 4 cells of the border
        inner = d16.data[4:-4, 4:-4]
        np.testing.assert_array_equal(inner, np.broadcast_to(inner[0, 0], inner.shape))

    def test_single_pillar_receptive_cone(self):
        cfg = _cfg()
        net = PillarNet.random(cfg, 2)
        g = SparseGrid2D(SMALL_SPEC, 1, np.array([[0, 0]]), np.ones((1, 8)))
        stats = {}
        s8, d16 = net.encode(g, stats)
        np.testing.assert_array_equal(s8.coords, [[0, 0]])
        assert stats == {"s1": 1, "s2": 1, "s4": 1, "s8": 1}
        _, base = net.encode(SparseGrid2D.empty(SMALL_SPEC, 1, 8))
        diff = np.any(d16.data != base.data, axis=2)
        # stride-2 entry touches (0, 0) only, then four 3x3 convs widen by 4 cells
        rows, cols = np.nonzero(diff)
        assert diff[0, 0]
        assert rows.max() <= 4 and cols.max() <= 4

    def test_active_sets_follow_stride(self, rng):
        cfg = _cfg()
        net = PillarNet.random(cfg, 0)
        scene = generate_scene(5, SMALL_SPEC, 6, 0.02)
        grid = pillarize(scene.points, SMALL_SPEC, net.pillar_params())
        stats = {}
        s8, _ = net.encode(grid, stats)
        for s in (2, 4, 8):
            assert stats[f"s{s}"] == len(np.unique(grid.coords // s, axis=0))
        np.testing.assert_array_equal(s8.coords, np.unique(grid.coords // 8, axis=0))
        assert stats["s1"] == len(grid)
        assert stats["s1"] >= stats["s2"] >= stats["s4"] >= stats["s8"]


class TestNeck:
    def _inputs(self, cfg, seed=0):
        net = PillarNet.random(cfg, seed)
        scene = generate_scene(seed, SMALL_SPEC, 5, 0.02)
        grid = pillarize(scene.points, SMALL_SPEC, net.pillar_params(), stride=cfg.input_stride)
        return net.encode(grid)

    @pytest.mark.parametrize("variant", ["v1", "v2", "v3"])
    def test_output_shape(self, variant):
        cfg = _cfg(neck=NeckKind(variant))
        s8, d16 = self._inputs(cfg)
        fused = PillarNet.random(cfg).neck(s8, d16)
        assert fused.shape == SMALL_SPEC.dims_at(8) and fused.stride == 8
        assert fused.channels == 2 * cfg.neck_width

    def test_v2_with_identity_groups_equals_v1(self):
        v1 = _cfg(neck=NeckKind("v1"))
        v2 = _cfg(neck=NeckKind("v2", group_convs=2))
        s8, d16 = self._inputs(v1)
        w1 = init_weights(v1, 7)
        w2 = init_weights(v2, 8)
        for part in ("weight", "bias", "scale", "shift"):
            w2[f"neck.spatial0.{part}"] = w1[f"neck.spatial0.{part}"]
            w2[f"neck.up_proj.{part}"] = w1[f"neck.up_proj.{part}"]
        for name in ("neck.spatial1", "neck.semantic0", "neck.semantic1", "neck.fuse0", "neck.fuse1"):
            c = w2[f"{name}.bias"].shape[0]
            k = np.zeros((3, 3, c, c), np.float32)
            k[1, 1] = np.eye(c)
            w2.update({f"{name}.weight": k, f"{name}.bias": np.zeros(c, np.float32),
                       f"{name}.scale": np.ones(c, np.float32),
                       f"{name}.shift": np.zeros(c, np.float32)})
        a = run_neck(s8, d16, v1.neck, w1, v1)
        b = run_neck(s8, d16, v2.neck, w2, v2)
        np.testing.assert_array_equal(a.data, b.data)

    def test_sparse_spatial_variant_shape(self):
        cfg = _cfg(neck=NeckKind("v2", sparse_spatial=True))
        s8, d16 = self._inputs(cfg)
        fused = PillarNet.random(cfg).neck(s8, d16)
        assert fused.shape == SMALL_SPEC.dims_at(8)

    def test_kind_must_match_config(self):
        cfg = _cfg()
        s8, d16 = self._inputs(cfg)
        with pytest.raises(ConfigError):
            run_neck(s8, d16, NeckKind("v1"), init_weights(cfg), cfg)


class TestForward:
    def test_fusion_size_invariant_to_pillar(self):
        scene = generate_scene(3, SMALL_SPEC, 6, 0.02)
        shapes = set()
        for p in PILLARS:
            cfg = _cfg(pillar_size=p)
            net = PillarNet.random(cfg, 0)
            grid = pillarize(scene.points, SMALL_SPEC, net.pillar_params(), stride=net.input_stride)
            s8, d16 = net.encode(grid)
            shapes.add(net.neck(s8, d16).shape)
        assert shapes == {(40, 40)}

    def test_36_configurations(self):
        scene = generate_scene(11, SMALL_SPEC, 4, 0.01)
        for backbone, variant, p in itertools.product(("vgg", "r18", "r34"), ("v1", "v2", "v3"),
                                                      PILLARS):
            cfg = _cfg(backbone=backbone, neck=NeckKind(variant), pillar_size=p)
            net = PillarNet.random(cfg, 0)
            grid = pillarize(scene.points, SMALL_SPEC, net.pillar_params(), stride=net.input_stride)
            a = net.forward(grid)
            b = net.forward(grid)
            assert a.heatmap.shape == (40, 40, 3), (backbone, variant, p)
            for name in ("heatmap", "offset", "z", "size", "rot", "iou"):
                np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
            assert np.all((a.heatmap >= 0) & (a.heatmap <= 1))
            assert np.all(np.abs(a.iou) <= 1)

    def test_forward_does_not_mutate_weights(self):
        net = PillarNet.random(_cfg(), 0)
        before = {k: v.copy() for k, v in net.weights.items()}
        scene = generate_scene(0, SMALL_SPEC, 3, 0.01)
        net.forward(pillarize(scene.points, SMALL_SPEC, net.pillar_params()))
        assert all(np.array_equal(before[k], net.weights[k]) for k in before)
