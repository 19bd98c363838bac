import numpy as np
import pytest

from opaqpipe.mrm import MrmNet
from opaqpipe.opacifier import OpacifierModel
from opaqpipe.patches import CropBox, crop_box, extract, mask_bbox, restore
from opaqpipe.pipeline import (Models, PipelineCfg, composite, instance_masks, instance_noise,
                               run_pipeline, run_pipeline_batch, solid_color_baseline, solid_fill)
from opaqpipe.scenegen import make_scene
from opaqpipe.schedule import build_schedule
from opaqpipe.toydepth import DepthNet, predict_depth
from opaqpipe.unipc import SolverConfig


def perturbed_depthnet(seed=0):
    net = DepthNet(seed=seed, base=8, groups=4)
    rng = np.random.default_rng(seed)
    net.head.weight.data = rng.normal(0, 0.05, net.head.weight.shape).astype(np.float32)
    return net


def saturated_mrm():
    """Refined mask ~1 everywhere, so every instance pastes its whole crop."""
    net = MrmNet()
    for p in net.parameters():
        p.data[...] = 0
    net.head.bias.data[...] = 10.0
    return net


@pytest.fixture(scope="module")
def models():
    table = build_schedule()
    return Models(perturbed_depthnet(), OpacifierModel(seed=0, base=8, latent_size=8), MrmNet(),
                  table)


CFG = PipelineCfg(solver=SolverConfig(steps=2), patch_size=16)


def two_blob_mask(h=32, w=32, gap=2):
    m = np.zeros((h, w))
    m[8:16, 6:14] = 1
    m[8:16, 14 + gap:22 + gap] = 1
    return m


def test_crop_box_centered_and_clamped():
    box = crop_box((10, 10, 20, 18), 64, 64, 1.25)
    assert box.side == 13 and box.top == 8 and box.left == 8
    edge = crop_box((0, 0, 10, 10), 64, 64)
    assert edge.top == 0 and edge.left == 0
    assert crop_box((0, 0, 64, 64), 64, 64).side == 64
    assert mask_bbox(np.zeros((3, 3))) is None


def test_restore_round_trip():
    img = np.full((3, 20, 20), 0.25)
    box = CropBox(2, 3, 10)
    patch = extract(img, box, 16)
    np.testing.assert_allclose(restore(patch, box), 0.25)


def test_instance_masks_raster_order():
    masks = instance_masks(two_blob_mask())
    assert len(masks) == 2
    assert masks[0][8, 6] == 1 and masks[1][8, 16] == 1


def test_instance_noise_keyed():
    a = instance_noise(0, 5, 1, 16)
    assert a.shape == (3, 8, 8)
    np.testing.assert_array_equal(a, instance_noise(0, 5, 1, 16))
    assert not np.array_equal(a, instance_noise(0, 5, 2, 16))
    assert not np.array_equal(a, instance_noise(0, 6, 1, 16))


def test_passthrough(models):
    scene = make_scene(0, "test", 0)
    res = run_pipeline(scene.I_tr, scene.union_mask, models, PipelineCfg(mode="passthrough"))
    assert res.I_blend.tobytes() == scene.I_tr.tobytes()
    np.testing.assert_array_equal(res.depth, predict_depth(scene.I_tr, models.depth))
    assert res.blend_mask.sum() == 0


def test_outside_blend_mask_untouched(models):
    for i in range(3):
        scene = make_scene(0, "test", i)
        res = run_pipeline(scene.I_tr, scene.union_mask, models, CFG, key=i)
        outside = res.blend_mask == 0
        assert res.I_blend[:, outside].tobytes() == scene.I_tr[:, outside].tobytes()
        assert res.depth.shape == (64, 64) and np.all(res.depth > 0)
        assert len(res.instances) == len(scene.masks)
        assert sum(r.pasted for r in res.instances) == res.blend_mask.sum()


def test_batching_does_not_change_results(models):
    scenes = [make_scene(0, "test", i) for i in range(3)]
    imgs = np.stack([s.I_tr for s in scenes])
    masks = np.stack([s.union_mask for s in scenes])
    together = run_pipeline_batch(imgs, masks, models, CFG, keys=[0, 1, 2])
    alone = run_pipeline(imgs[2], masks[2], models, CFG, key=2)
    np.testing.assert_allclose(together[2].I_blend, alone.I_blend, atol=1e-5)


def test_empty_mask_is_identity(models):
    img = make_scene(0, "test", 0).I_tr
    res = run_pipeline(img, np.zeros((64, 64)), models, CFG)
    assert res.I_blend.tobytes() == img.tobytes() and res.instances == []


def test_missing_checkpoint_lists_stage():
    m = Models(perturbed_depthnet())
    with pytest.raises(ValueError, match="opacifier, mrm, table"):
        m.require("opacify")
    m.require("passthrough")
    with pytest.raises(ValueError, match="depth"):
        Models(None).require("solid-color")


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineCfg(mode="inpaint")
    with pytest.raises(ValueError):
        PipelineCfg(patch_size=15)
    with pytest.raises(ValueError):
        PipelineCfg(margin=0.9)


def test_composite_never_reverts():
    img = np.zeros((3, 12, 12))
    first = (CropBox(0, 0, 8), np.full((3, 8, 8), 0.3), np.ones((8, 8)))
    second = (CropBox(4, 4, 8), np.full((3, 8, 8), 0.7), np.ones((8, 8)))
    out, union, counts = composite(img, [first, second])
    assert np.all(out[:, 0:8, 0:8] == 0.3)
    assert np.all(out[:, 8:12, 8:12] == 0.7)
    assert counts == [64, 64 - 16]
    assert union.sum() == 64 + 48
    # a second instance with an empty refined mask writes nothing
    out2, _, counts2 = composite(img, [first, (CropBox(4, 4, 8), np.ones((3, 8, 8)), np.zeros((8, 8)))])
    assert counts2[1] == 0 and np.all(out2[:, 0:8, 0:8] == 0.3)


def test_overlapping_instances_keep_first_paste():
    table = build_schedule()
    models = Models(perturbed_depthnet(), OpacifierModel(seed=1, base=8, latent_size=8),
                    saturated_mrm(), table)
    img = np.random.default_rng(0).random((3, 32, 32))
    res = run_pipeline(img, two_blob_mask(gap=1), models, CFG)
    first, second = res.instances
    ys1, xs1 = first.box.slices()
    ys2, xs2 = second.box.slices()
    overlap = np.zeros((32, 32), bool)
    overlap[ys1, xs1] = True
    only = np.zeros((32, 32), bool)
    only[ys2, xs2] = True
    overlap &= only
    assert overlap.sum() > 0
    pred1 = np.zeros_like(img)
    pred1[:, ys1, xs1] = restore(first.I_pred, first.box)
    np.testing.assert_array_equal(res.I_blend[:, overlap], pred1[:, overlap])


def test_solid_fill_and_baseline(models):
    img = np.random.default_rng(1).random((3, 16, 16))
    m = np.zeros((16, 16))
    m[4:8, 4:8] = 1
    red = solid_fill(img, m, (1.0, 0.0, 0.0))
    assert np.all(red[0, 4:8, 4:8] == 1) and np.all(red[1:, 4:8, 4:8] == 0)
    assert red[:, m == 0].tobytes() == img[:, m == 0].tobytes()
    direct = predict_depth(img, models.depth)
    np.testing.assert_array_equal(solid_color_baseline(img, np.zeros((16, 16)), models.depth), direct)
    out = solid_color_baseline(img, m, models.depth)
    cands = np.stack([predict_depth(solid_fill(img, m, c), models.depth)
                      for c in ((1, 0, 0), (0, 1, 0), (0, 0, 1))])
    assert np.all(np.any(cands == out[None], axis=0))
