import numpy as np
import pytest
from numpy.testing import assert_allclose

from dfcompress import autograd as ag
from dfcompress.autograd import Tensor
from dfcompress.networks import (attention_map, build_generator, build_student, build_teacher, clone,
                                 forward, load_arch, predict_proba, scaled_bn_forward)


def conventional_bn(x, gamma, beta, eps):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return gamma.reshape(1, -1, 1, 1) * (x - mu) / np.sqrt(var + eps) + beta.reshape(1, -1, 1, 1)


def test_zero_scale_gives_zero_output(rng):
    x = Tensor(rng.normal(size=(4, 3, 5, 5)) * 7)
    y = scaled_bn_forward(x, Tensor(np.zeros(3)), Tensor(rng.normal(size=3)), 1e-5, "train")
    assert np.all(y.data == 0.0)


def test_unit_scale_standardizes(rng):
    x = Tensor(rng.normal(2.0, 3.0, size=(256, 3, 4, 4)))
    y = scaled_bn_forward(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-12, "train").data
    assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_matches_conventional_bn(rng):
    x = rng.normal(size=(8, 4, 3, 3))
    gamma = rng.uniform(0.5, 2.0, size=4) * rng.choice([-1, 1], size=4)
    beta = rng.normal(size=4)
    y = scaled_bn_forward(Tensor(x), Tensor(gamma), Tensor(beta / gamma), 1e-5, "train").data
    assert np.max(np.abs(y - conventional_bn(x, gamma, beta, 1e-5))) < 1e-10


def test_running_stats_momentum(rng):
    x = rng.normal(1.0, 2.0, size=(16, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    scaled_bn_forward(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5, "train", (rm, rv), 0.9)
    assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_eval_mode_uses_running_stats(rng):
    x = rng.normal(size=(3, 2, 2, 2))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    y = scaled_bn_forward(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12, "eval", (rm, rv)).data
    assert_allclose(y, (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1)))


def test_batch_of_one_rejected_in_train_mode():
    with pytest.raises(ValueError, match="batch"):
        scaled_bn_forward(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5, "train")


def test_scale_length_mismatch_rejected():
    with pytest.raises(ValueError, match="channels"):
        scaled_bn_forward(Tensor(np.ones((2, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5, "train")


def test_attention_map_is_channel_mean_of_squares(rng):
    f = rng.normal(size=(2, 5, 4, 4))
    assert_allclose(attention_map(Tensor(f)).data, (f ** 2).mean(axis=1))
    with pytest.raises(ValueError):
        attention_map(Tensor(np.ones((2, 3))))


def test_parameter_counts():
    # hand count for the toy configs: convs + shortcut + BN (s, b per group) + dense
    assert build_teacher(seed=0).param_count() == 10882
    assert build_student(seed=0).param_count() == 2822


def test_first_conv_and_final_dense_not_quantizable():
    net = build_teacher(seed=0)
    first_conv = next(layer for layer in net.layers if layer.kind == "conv2d")
    last_dense = [layer for layer in net.layers if layer.kind == "dense"][-1]
    assert not first_conv.quantizable and not last_dense.quantizable
    q = set(net.quantizable_ids())
    assert "stem.w" not in q and "fc.w" not in q
    assert all(net.params[pid].ndim == 4 for pid in q)


def test_every_param_owned_by_one_layer():
    net = build_teacher(seed=0)
    owners = {}
    for layer in net.layers:
        d = layer.dims
        ids = list(d.get("weight_ids", ()))
        if layer.kind == "dense":
            ids.append(d["bias"])
        for pid in ids:
            assert pid not in owners
            owners[pid] = layer.name
    group_params = {pid for g in net.scale_groups.values() for pid in (g.s_id, g.b_id)}
    assert set(owners) | group_params == set(net.params)
    assert not set(owners) & group_params


def test_scale_groups_consistent():
    net = build_teacher(seed=0)
    for gid, g in net.scale_groups.items():
        c = net.group_channels(gid)
        assert net.shift(gid).size == c
        for member in g.members:
            assert net.bn_stats[member][0].size == c
        assert g.gamma_l(0.3) == pytest.approx(0.3 / g.width)
    assert net.scale_groups["stream0"].width == 8
    assert net.scale_groups["stream1"].width == 4
    # the residual stream of a stage is normalised by every block reading it
    assert {"s0b0.bn1", "s0b1.bn1", "s1b0.bn1"} <= set(net.scale_groups["stream0"].members)
    assert {"s1b1.bn1", "head.bn"} <= set(net.scale_groups["stream1"].members)


def test_attention_taps_are_feature_maps(rng):
    net = build_teacher(seed=0)
    out, maps = forward(net, rng.normal(size=(3, 1, 8, 8)), collect_attention=True)
    assert out.shape == (3, 10)
    assert len(maps) == len(net.attention_taps) == 2
    assert [m.shape for m in maps] == [(3, 8, 8), (3, 4, 4)]


def test_generator_output_matches_teacher_input(rng):
    g = build_generator(seed=0)
    x, _ = forward(g, rng.normal(size=(5, 100)), mode="train")
    assert x.shape == (5,) + tuple(load_arch()["input_shape"])


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(ValueError, match="input shape"):
        forward(build_student(seed=0), np.zeros((2, 1, 4, 4)))


def test_predict_proba_rows_sum_to_one(rng):
    p = predict_proba(build_student(seed=3), rng.normal(size=(6, 1, 8, 8)))
    assert_allclose(p.sum(axis=1), 1.0)


def test_clone_is_independent():
    net = build_student(seed=0)
    other = clone(net)
    other.params["fc.w"].data[...] = 0.0
    other.bn_stats["head.bn"][0][...] = 5.0
    assert np.any(net.params["fc.w"].data != 0.0)
    assert np.all(net.bn_stats["head.bn"][0] == 0.0)


def test_same_seed_same_network():
    a, b = build_teacher(seed=11), build_teacher(seed=11)
    for pid in a.params:
        assert a.params[pid].data.tobytes() == b.params[pid].data.tobytes()


def test_network_gradient_reaches_every_param(rng):
    net = build_student(seed=0)
    net.set_requires_grad(True)
    out, maps = forward(net, rng.normal(size=(4, 1, 8, 8)), collect_attention=True, mode="train")
    ag.backward(ag.add(ag.sum(ag.mul(out, out)), ag.sum(maps[0])))
    for pid, p in net.params.items():
        assert p.grad is not None and p.grad.shape == p.shape, pid
