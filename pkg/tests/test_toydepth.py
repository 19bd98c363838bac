import math

import numpy as np
import pytest

from opaqpipe.scenegen import generate_dataset, make_scene
from opaqpipe.tensorgrad import Tensor, grad_check
from opaqpipe.tensorgrad import functional as F
from opaqpipe.toydepth import (DepthNet, DepthTrainCfg, coord_channels, depth_training_set,
                               load_depthnet, predict_depth, train_depthnet)


def test_coord_channels():
    c = coord_channels(2, 3, 5)
    assert c.shape == (2, 2, 3, 5)
    np.testing.assert_array_equal(c[0, 0, :, 0], [-1, 0, 1])
    np.testing.assert_array_equal(c[1, 1, 0], np.linspace(-1, 1, 5))


def test_initial_prediction_is_constant():
    net = DepthNet()
    out = predict_depth(np.random.default_rng(0).random((3, 16, 16)), net)
    assert out.shape == (16, 16)
    np.testing.assert_allclose(out, 2000.0, rtol=1e-5)


def test_prediction_positive_for_random_inputs():
    net = DepthNet(seed=1)
    rng = np.random.default_rng(1)
    for p in net.parameters():
        p.data = p.data + rng.normal(0, 0.2, p.shape).astype(p.dtype)
    out = predict_depth(rng.random((5, 3, 12, 20)) * 4 - 2, net, batch=2)
    assert out.shape == (5, 12, 20)
    assert np.all(out > 0) and np.all(np.isfinite(out))


def test_gradcheck_depthnet():
    net = DepthNet(seed=2, base=8, groups=4).astype(np.float64)
    net.head.weight.data = np.random.default_rng(2).normal(0, 0.1, net.head.weight.shape)
    img = np.random.default_rng(3).random((2, 3, 8, 8))
    target = np.log(np.random.default_rng(4).uniform(1000, 3000, (2, 1, 8, 8)))

    def loss():
        return F.absolute(net(Tensor(img)) - Tensor(target)).mean()

    assert grad_check(loss, net.trainable_parameters(), max_entries=4, seed=3) < 1e-4


def test_training_set_excludes_transparent():
    opaque = generate_dataset(2, 0, "train")
    empty = [make_scene(1, "train", 0, n_objects=0)]
    imgs, targets = depth_training_set(opaque, empty)
    assert imgs.shape == (3, 3, 64, 64) and targets.shape == (3, 1, 64, 64)
    np.testing.assert_array_equal(imgs[0], opaque[0].I_op)
    np.testing.assert_allclose(targets[2, 0], np.log(empty[0].depth))
    with pytest.raises(ValueError, match="object-free"):
        depth_training_set(opaque, opaque[:1])


def test_training_deterministic_and_checkpoint(tmp_path):
    opaque = generate_dataset(2, 0, "train")
    empty = [make_scene(1, "train", 0, n_objects=0)]
    cfg = DepthTrainCfg(iterations=5, batch_size=2, warmup=2)
    net, rows = train_depthnet(opaque, empty, cfg, tmp_path / "a.csv", tmp_path / "a.npz")
    train_depthnet(opaque, empty, cfg, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().startswith("iteration,lr,loss\n")
    assert rows[-1]["loss"] < math.inf
    back = load_depthnet(tmp_path / "a.npz")
    np.testing.assert_array_equal(predict_depth(opaque[0].I_tr, back),
                                  predict_depth(opaque[0].I_tr, net))
