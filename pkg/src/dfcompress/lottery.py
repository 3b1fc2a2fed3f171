"""Iterative magnitude pruning with rewinding to the original initialization."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import data
from .networks import build_student
from .trainer import (STREAM_CONTROL_INIT, STREAM_STUDENT_INIT, STREAM_SUPERVISED_DATA, TrainProtocol,
                      accuracy, agreement, probe, rng_for, supervised_train, train_data_free)

SETTINGS = ("supervised", "data_free")


class LotteryStop(RuntimeError):
    """Raised when the next pruning round would remove every weight of some layer."""


@dataclass
class TicketMask:
    masks: dict                 # conv weight id -> 0/1 float array
    init: dict                  # every parameter id -> initial value
    p: float
    rounds: int = 0
    width: str = "half"
    init_seed: int = 0
    history: list = field(default_factory=list)
    stopped: str | None = None

    def kept(self):
        return int(sum(m.sum() for m in self.masks.values()))

    def total(self):
        return int(sum(m.size for m in self.masks.values()))

    def density(self):
        return self.kept() / self.total()

    def layer_density(self):
        return {pid: float(m.mean()) for pid, m in self.masks.items()}


def full_mask(net):
    return {pid: np.ones_like(net.params[pid].data) for pid in net.conv_weight_ids()}


def prune_global(net, masks, p):
    """Drop the fraction ``p`` of surviving conv weights with the smallest |w|, ranked across layers.

    Ties break by (layer order, flat index) so the result is deterministic.
    """
    ids = list(masks)
    alive = [(pid, np.flatnonzero(masks[pid].ravel())) for pid in ids]
    mags = np.concatenate([np.abs(net.params[pid].data.ravel()[idx]) for pid, idx in alive])
    n_drop = int(round(p * mags.size))
    order = np.argsort(mags, kind="stable")[:n_drop]
    new = {pid: m.copy() for pid, m in masks.items()}
    offsets = np.cumsum([0] + [idx.size for _, idx in alive])
    for j, (pid, idx) in enumerate(alive):
        sel = order[(order >= offsets[j]) & (order < offsets[j + 1])] - offsets[j]
        if sel.size == idx.size:
            raise LotteryStop(f"pruning would empty {pid}")
        flat = new[pid].ravel()
        flat[idx[sel]] = 0.0
        new[pid] = flat.reshape(masks[pid].shape)
    return new


def rewind(net, ticket, init=None):
    """Set parameters to m * theta0 (conv weights) and theta0 (everything else); reset BN stats."""
    init = ticket.init if init is None else init
    for pid, p in net.params.items():
        value = init[pid].copy()
        if pid in ticket.masks:
            value = value * ticket.masks[pid]
        p.data = value
    for m, (rm, rv) in net.bn_stats.items():
        net.bn_stats[m] = (np.zeros_like(rm), np.ones_like(rv))
    return net


def _student(seed, width, stream):
    return build_student(seed=int(rng_for(seed, stream).integers(2**31)), width=width)


def train_in_setting(net, setting, K, seed, masks, teacher=None, protocol=None, lr=2e-3):
    """K supervised Adam steps, or K adversarial rounds against ``teacher``. Returns the trained net."""
    if setting == "supervised":
        data_seed = int(rng_for(seed, STREAM_SUPERVISED_DATA).integers(2**31))
        supervised_train(net, K, seed, lr=lr, masks=masks, data_seed=data_seed)
        return net
    if setting == "data_free":
        if teacher is None:
            raise ValueError("data_free setting needs a teacher")
        proto = replace(protocol or TrainProtocol(), mode="plain", rounds=K, seed=seed,
                        warm_up_rounds=0, eval_every=0)
        return train_data_free(teacher, proto, student=net, masks=masks).student
    raise ValueError(f"setting must be one of {SETTINGS}")


def lottery_search(setting="supervised", p=0.2, n_rounds=3, K=200, seed=0, teacher=None,
                   protocol=None, width="half"):
    """Train, prune, rewind for ``n_rounds`` rounds; returns the ticket rewound to m * theta0."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    net = _student(seed, width, STREAM_STUDENT_INIT)
    init = {pid: t.data.copy() for pid, t in net.params.items()}
    ticket = TicketMask(full_mask(net), init, p, 0, width, seed)
    ticket.history.append(ticket.density())
    for _ in range(n_rounds):
        rewind(net, ticket)
        train_in_setting(net, setting, K, seed, ticket.masks, teacher, protocol)
        try:
            ticket.masks = prune_global(net, ticket.masks, p)
        except LotteryStop as stop:
            ticket.stopped = str(stop)
            break
        ticket.rounds += 1
        ticket.history.append(ticket.density())
    rewind(net, ticket)
    return ticket, net


def evaluate_ticket(ticket, setting="data_free", seed=0, K=100, teacher=None, protocol=None,
                    control=False, probe_size=1000):
    """Train the masked network in ``setting`` and score it.

    The control arm keeps the mask but draws a fresh initialization from a
    separate seed stream; everything else is seeded identically.
    """
    net = _student(ticket.init_seed, ticket.width, STREAM_STUDENT_INIT)
    init = ticket.init
    if control:
        fresh = _student(seed, ticket.width, STREAM_CONTROL_INIT)
        init = {pid: t.data.copy() for pid, t in fresh.params.items()}
    rewind(net, ticket, init)
    net = train_in_setting(net, setting, K, seed, ticket.masks, teacher, protocol)
    if setting == "supervised":
        x, y = data.probe_set(seed, probe_size)
        return accuracy(net, x, y)
    proto = replace(protocol or TrainProtocol(), seed=seed, probe_size=probe_size)
    return agreement(net, teacher, probe(proto), proto.student_bn_mode)


def paired_comparison(ticket, seeds=(0, 1, 2, 3, 4), setting="data_free", K=100, teacher=None,
                      protocol=None, probe_size=1000):
    """Ticket vs random-reinit arms over paired seeds; returns per-seed scores and the mean difference."""
    rows = []
    for s in seeds:
        t = evaluate_ticket(ticket, setting, s, K, teacher, protocol, False, probe_size)
        r = evaluate_ticket(ticket, setting, s, K, teacher, protocol, True, probe_size)
        rows.append({"seed": int(s), "ticket": t, "random": r, "diff": t - r})
    diffs = np.array([r["diff"] for r in rows])
    return {"rows": rows, "mean_diff": float(diffs.mean()),
            "std_diff": float(diffs.std(ddof=1)) if len(diffs) > 1 else 0.0,
            "density": ticket.density()}
