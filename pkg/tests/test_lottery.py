import numpy as np
import pytest
from numpy.testing import assert_array_equal

from dfcompress import optim
from dfcompress.lottery import (LotteryStop, TicketMask, evaluate_ticket, full_mask, lottery_search,
                                paired_comparison, prune_global, rewind, train_in_setting)
from dfcompress.networks import build_student
from dfcompress.trainer import TrainProtocol


def test_zero_rounds_is_full_mask():
    ticket, net = lottery_search(n_rounds=0)
    assert ticket.density() == 1.0 and ticket.history == [1.0]
    for pid, t in net.params.items():
        assert_array_equal(t.data, ticket.init[pid])


def test_prune_global_drops_smallest_fraction():
    net = build_student(seed=0)
    masks = full_mask(net)
    for _ in range(3):
        masks = prune_global(net, masks, 0.2)
    ticket = TicketMask(masks, {}, 0.2)
    # each round rounds to the nearest weight, so allow one weight per round of slack
    assert abs(ticket.kept() - 0.8 ** 3 * ticket.total()) <= 3
    kept = np.concatenate([np.abs(net.params[p].data[m > 0]) for p, m in masks.items()])
    dropped = np.concatenate([np.abs(net.params[p].data[m == 0]) for p, m in masks.items()])
    assert dropped.max() <= kept.min()


def test_prune_global_stops_before_emptying_a_layer():
    net = build_student(seed=0)
    masks = full_mask(net)
    pid = next(iter(masks))
    net.params[pid].data[...] = 1e-9
    with pytest.raises(LotteryStop, match=pid):
        prune_global(net, masks, 0.5)


def test_rewind_applies_mask_and_resets_stats():
    net = build_student(seed=0)
    init = {pid: t.data.copy() for pid, t in net.params.items()}
    masks = prune_global(net, full_mask(net), 0.5)
    for pid in net.params:
        net.params[pid].data = net.params[pid].data + 1.0
    net.bn_stats["head.bn"][0][...] = 3.0
    rewind(net, TicketMask(masks, init, 0.5))
    for pid, t in net.params.items():
        assert_array_equal(t.data, init[pid] * masks[pid] if pid in masks else init[pid])
    assert np.all(net.bn_stats["head.bn"][0] == 0.0)


def test_search_density_and_masks_hold_every_step(monkeypatch):
    calls = []
    real_step = optim.Adam.step

    def checked(self, net, sign=1.0, masks=None):
        real_step(self, net, sign, masks)
        if masks:
            calls.append(1)
            for pid, m in masks.items():
                assert np.all(net.params[pid].data[m == 0] == 0.0)

    monkeypatch.setattr(optim.Adam, "step", checked)
    ticket, net = lottery_search(p=0.2, n_rounds=3, K=5)
    assert ticket.rounds == 3 and len(ticket.history) == 4
    for layer, density in ticket.layer_density().items():
        assert 0.0 < density <= 1.0, layer
    assert abs(ticket.kept() - 0.512 * ticket.total()) <= 3
    assert len(calls) == 15  # every step of every round runs under the mask


def test_data_free_training_respects_mask(teacher, monkeypatch):
    net = build_student(seed=0)
    masks = prune_global(net, full_mask(net), 0.3)
    for pid, m in masks.items():
        net.params[pid].data = net.params[pid].data * m
    proto = TrainProtocol(batch=8, student_steps_per_round=2, probe_size=20)
    out = train_in_setting(net, "data_free", 2, 0, masks, teacher, proto)
    for pid, m in masks.items():
        assert np.all(out.params[pid].data[m == 0] == 0.0)


def test_control_arm_has_same_density_but_different_init(teacher):
    ticket, _ = lottery_search(n_rounds=1, K=5)
    proto = TrainProtocol(batch=8, student_steps_per_round=1, probe_size=50)
    res = paired_comparison(ticket, seeds=(0, 1), K=1, teacher=teacher, protocol=proto, probe_size=50)
    assert res["density"] == ticket.density()
    assert len(res["rows"]) == 2
    assert res["mean_diff"] == pytest.approx(np.mean([r["ticket"] - r["random"] for r in res["rows"]]))
    a = evaluate_ticket(ticket, "supervised", seed=0, K=1, probe_size=50)
    assert a == evaluate_ticket(ticket, "supervised", seed=0, K=1, probe_size=50)


def test_search_validates_fraction():
    with pytest.raises(ValueError):
        lottery_search(p=1.0)
    with pytest.raises(ValueError, match="setting"):
        train_in_setting(build_student(seed=0), "transfer", 1, 0, None)
