import numpy as np
import pytest

from geofm import tensor as T
from geofm.checkpoint import save_checkpoint
from geofm.errors import CheckpointError, ConfigError, ShapeError
from geofm.gradcheck import grad_check
from geofm.pyramid import FPN, FeaturePyramid, SingleScalePyramidGenerator, load_pretrained_pyramid
from geofm.rng import Rng
from geofm.tensor import Tensor

from conftest import assert_close


def backbone_maps(rng, h=16, widths=(32, 64, 128, 256)):
    return {
        4: Tensor(rng.child("m4").normal((widths[0], h, h))),
        8: Tensor(rng.child("m8").normal((widths[1], h // 2, h // 2))),
        16: Tensor(rng.child("m16").normal((widths[2], h // 4, h // 4))),
        32: Tensor(rng.child("m32").normal((widths[3], h // 8, h // 8))),
    }


# ----------------------------------------------------------------------- FPN
def test_fpn_uniform_output_channels():
    rng = Rng(0)
    fpn = FPN({4: 32, 8: 64, 16: 128, 32: 256}, 64, rng.child("fpn"))
    pyr = fpn(backbone_maps(rng.child("maps")))
    for s in (4, 8, 16, 32):
        assert pyr.levels[s].shape[0] == 64
    assert pyr.levels[4].shape == (64, 16, 16)
    assert pyr.levels[32].shape == (64, 2, 2)


def test_fpn_constant_inputs_constant_outputs():
    rng = Rng(1)
    fpn = FPN({4: 8, 8: 8, 16: 8, 32: 8}, 8, rng.child("fpn"))
    maps = {
        s: Tensor(np.full((8, 32 // s, 32 // s), 2.5, dtype=np.float32))
        for s in (4, 8, 16, 32)
    }
    pyr = fpn(maps)
    # interior of a smoothing conv over a constant field is constant
    interior = pyr.levels[4].data[:, 1:-1, 1:-1]
    assert_close(interior.std(axis=(1, 2)), np.zeros(8), tol=1e-5)


def test_fpn_inconsistent_sizes_rejected():
    rng = Rng(2)
    fpn = FPN({4: 8, 8: 8, 16: 8, 32: 8}, 8, rng.child("fpn"))
    maps = backbone_maps(rng.child("maps"), h=16, widths=(8, 8, 8, 8))
    maps[8] = Tensor(rng.normal((8, 5, 5)))
    with pytest.raises(ShapeError):
        fpn(maps)


def test_fpn_top_down_path_isolation():
    rng = Rng(3)
    fpn = FPN({4: 8, 8: 8, 16: 8, 32: 8}, 8, rng.child("fpn"))
    maps = backbone_maps(rng.child("maps"), h=16, widths=(8, 8, 8, 8))
    base = fpn(maps)
    # zeroing the stride-32 input changes the stride-4 output via top-down
    maps_zero32 = dict(maps)
    maps_zero32[32] = Tensor(np.zeros_like(maps[32].data))
    changed = fpn(maps_zero32)
    assert not np.allclose(changed.levels[4].data, base.levels[4].data)
    # with the stride-32 lateral zeroed the top-down contribution vanishes
    fpn.laterals[3].kernel.data[...] = 0.0
    fpn.laterals[3].bias.data[...] = 0.0
    a = fpn(maps)
    b = fpn(maps_zero32)
    for s in (4, 8, 16):
        assert_close(a.levels[s].data, b.levels[s].data, tol=0)


# ------------------------------------------------------------------ generator
def test_generator_from_stride16_source():
    rng = Rng(4)
    gen = SingleScalePyramidGenerator(24, 16, rng.child("gen"), source_stride=16)
    pyr = gen(Tensor(rng.normal((24, 4, 4))))
    assert pyr.levels[4].shape == (16, 16, 16)
    assert pyr.levels[8].shape == (16, 8, 8)
    assert pyr.levels[16].shape == (16, 4, 4)
    assert pyr.levels[32].shape == (16, 2, 2)


def test_generator_from_stride4_source():
    rng = Rng(5)
    gen = SingleScalePyramidGenerator(24, 16, rng.child("gen"), source_stride=4)
    pyr = gen(Tensor(rng.normal((24, 16, 16))))
    for s in (4, 8, 16, 32):
        assert pyr.levels[s].shape == (16, 64 // s, 64 // s)


def test_generator_zero_input_bias_outputs():
    rng = Rng(6)
    gen = SingleScalePyramidGenerator(8, 8, rng.child("gen"), source_stride=16)
    for conv in gen.outputs:
        conv.bias.data[...] = rng.normal((8,))
    pyr = gen(Tensor(np.zeros((8, 4, 4), dtype=np.float32)))
    for i, s in enumerate((4, 8, 16, 32)):
        expect = gen.outputs[i].bias.data[:, None, None]
        assert_close(pyr.levels[s].data, np.broadcast_to(expect, pyr.levels[s].shape), tol=1e-6)


def test_generator_wrong_source_stride_rejected():
    gen = SingleScalePyramidGenerator(8, 8, Rng(7), source_stride=16)
    with pytest.raises(ConfigError):
        gen(Tensor(np.zeros((8, 4, 4), dtype=np.float32)), source_stride=4)


def test_pyramid_validation_catches_nonuniform_channels():
    levels = {s: Tensor(np.zeros((8 if s != 8 else 4, 32 // s, 32 // s), dtype=np.float32))
              for s in (4, 8, 16, 32)}
    with pytest.raises(ShapeError):
        FeaturePyramid(levels).validate()


# --------------------------------------------------------------- checkpointing
def test_generator_checkpoint_round_trip(tmp_path):
    rng = Rng(8)
    gen = SingleScalePyramidGenerator(8, 8, rng.child("gen"), source_stride=16)
    x = Tensor(rng.normal((8, 4, 4)))
    before = {s: m.data.copy() for s, m in gen(x).levels.items()}
    save_checkpoint(tmp_path / "ck", gen.named_parameters())

    fresh = SingleScalePyramidGenerator(8, 8, Rng(99).child("other"), source_stride=16)
    report = load_pretrained_pyramid(fresh, tmp_path / "ck", strict=True)
    assert not report["missing"] and not report["skipped"]
    after = fresh(x).levels
    for s in (4, 8, 16, 32):
        assert np.array_equal(before[s], after[s].data)


def test_generator_empty_checkpoint_strict_lists_missing(tmp_path):
    save_checkpoint(tmp_path / "ck", {})
    gen = SingleScalePyramidGenerator(8, 8, Rng(9), source_stride=16)
    with pytest.raises(CheckpointError, match="missing"):
        load_pretrained_pyramid(gen, tmp_path / "ck", strict=True)


def test_generator_partial_checkpoint_lenient_reports_counts(tmp_path):
    rng = Rng(10)
    gen = SingleScalePyramidGenerator(8, 8, rng.child("gen"), source_stride=16)
    params = gen.named_parameters()
    some = dict(list(params.items())[:3])
    save_checkpoint(tmp_path / "ck", some)
    fresh = SingleScalePyramidGenerator(8, 8, Rng(11).child("f"), source_stride=16)
    report = load_pretrained_pyramid(fresh, tmp_path / "ck", strict=False)
    assert len(report["loaded"]) == 3
    assert len(report["missing"]) == len(params) - 3


# ----------------------------------------------------------------- grad checks
def test_fpn_differentiable_end_to_end():
    rng = Rng(12)
    fpn = FPN({4: 4, 8: 4, 16: 4, 32: 4}, 4, rng.child("fpn")).to_dtype(np.float64)
    maps = {s: Tensor(rng.child(f"x{s}").normal((4, 32 // s, 32 // s), dtype=np.float64))
            for s in (4, 8, 16, 32)}

    def f(ps):
        fpn.laterals[0].kernel = ps[0]
        fpn.outputs[3].kernel = ps[1]
        pyr = fpn(maps)
        return sum(((m ** 2.0).sum() for m in pyr.levels.values()), T.zeros(()))

    err = grad_check(f, [fpn.laterals[0].kernel, fpn.outputs[3].kernel],
                     h=1e-3, max_coords=6, coord_strategy="largest")
    assert err < 1e-3


def test_generator_differentiable_end_to_end():
    rng = Rng(13)
    gen = SingleScalePyramidGenerator(6, 4, rng.child("gen"), source_stride=16).to_dtype(np.float64)
    x = Tensor(rng.normal((6, 4, 4), dtype=np.float64))

    def f(ps):
        gen.deconvs[4][0].kernel = ps[0]
        gen.projections[0].kernel = ps[1]
        pyr = gen(x)
        return sum(((m ** 2.0).sum() for m in pyr.levels.values()), T.zeros(()))

    err = grad_check(f, [gen.deconvs[4][0].kernel, gen.projections[0].kernel],
                     h=1e-3, max_coords=6, coord_strategy="largest")
    assert err < 1e-3
