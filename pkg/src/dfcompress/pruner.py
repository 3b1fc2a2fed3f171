"""Filter pruning on shared BN scaling factors and structural compaction."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .networks import clone, forward


@dataclass
class PruneDecision:
    masks: dict
    threshold: float
    before: dict = field(default_factory=dict)
    after: dict = field(default_factory=dict)

    def kept(self, gid):
        return int(self.masks[gid].sum())

    def keep_set(self):
        return {(gid, int(i)) for gid, m in self.masks.items() for i in np.flatnonzero(m)}


def prunable_groups(net):
    """Scale groups whose channels can be removed (classifier groups)."""
    return [gid for gid in net.scale_groups if not gid.startswith("g.")]


def threshold_prune(net, t_s):
    """Keep channel i of a group iff |s_i| >= t_s; an emptied group keeps its argmax |s|."""
    if t_s <= 0:
        raise ValueError("threshold must be positive")
    masks = {}
    for gid in prunable_groups(net):
        s = np.abs(net.scale(gid).data)
        keep = s >= t_s
        if not keep.any():
            keep[int(np.argmax(s))] = True
        masks[gid] = keep
    decision = PruneDecision(masks, t_s)
    p, m = count_params_flops(net)
    decision.before = {"params": p, "flops": 2 * m}
    return decision


def keep_all(net):
    return PruneDecision({gid: np.ones(net.group_channels(gid), dtype=bool)
                          for gid in prunable_groups(net)}, 0.0)


def zero_scales(net, decision):
    """Dense copy with the scale of every pruned channel set to exactly 0."""
    dense = clone(net)
    for gid, mask in decision.masks.items():
        dense.scale(gid).data[~mask] = 0.0
    return dense


def _member_group(net):
    return {m: gid for gid, g in net.scale_groups.items() for m in g.members}


def compact_network(net, decision):
    """Physically remove pruned channels from every tensor indexed by a pruned group."""
    missing = set(prunable_groups(net)) - set(decision.masks)
    if missing:
        raise ValueError(f"decision does not cover groups {sorted(missing)}")
    out = clone(net)
    idx = {gid: np.flatnonzero(m) for gid, m in decision.masks.items()}
    for gid, m in decision.masks.items():
        if m.size != net.group_channels(gid):
            raise ValueError(f"mask for {gid} has {m.size} entries, group has {net.group_channels(gid)}")
    for pid, p in out.params.items():
        data = p.data
        for axis, tag in enumerate(out.param_axes[pid]):
            if tag in idx:
                data = np.take(data, idx[tag], axis=axis)
        p.data = np.ascontiguousarray(data)
    owner = _member_group(out)
    for member, (rm, rv) in list(out.bn_stats.items()):
        gid = owner[member]
        if gid in idx:
            out.bn_stats[member] = (rm[idx[gid]].copy(), rv[idx[gid]].copy())
    _check_alignment(out)
    p, m = count_params_flops(out)
    decision.after = {"params": p, "flops": 2 * m}
    return out


def _check_alignment(net):
    sizes = {gid: net.group_channels(gid) for gid in net.scale_groups}
    for pid, axes in net.param_axes.items():
        for axis, tag in enumerate(axes):
            if tag is not None and net.params[pid].shape[axis] != sizes[tag]:
                raise AssertionError(f"{pid} axis {axis} misaligned with group {tag}")
    owner = _member_group(net)
    for member, (rm, _) in net.bn_stats.items():
        if rm.size != sizes[owner[member]]:
            raise AssertionError(f"running stats of {member} misaligned")


def zero_then_compare(net, decision, probe=None, seed=0, n=32):
    """Max |logit| difference between the s-zeroed dense net and the compacted net."""
    if probe is None:
        probe = np.random.default_rng(seed).standard_normal((n,) + tuple(net.input_shape))
    dense = zero_scales(net, decision)
    small = compact_network(net, decision)
    with ag.no_grad():
        a, _ = forward(dense, probe, mode="eval")
        b, _ = forward(small, probe, mode="eval")
    return float(np.max(np.abs(a.data - b.data)))


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def conv_cost(cin, cout, k, out_h, out_w, bias=False):
    """(params, MACs) of a k x k convolution."""
    params = cin * cout * k * k + (cout if bias else 0)
    return params, cin * cout * k * k * out_h * out_w


def dense_cost(fin, fout, bias=True):
    return fin * fout + (fout if bias else 0), fin * fout


def count_params_flops(net):
    """(trainable scalar count, multiply-accumulate count).

    MACs cover conv and dense layers only; BN, activations and pooling are
    excluded. FLOPs are reported elsewhere as 2 * MACs.
    """
    params = net.param_count()
    P = net.params
    shape = tuple(net.input_shape)
    macs = 0
    for layer in net.layers:
        d = layer.dims
        if layer.kind == "conv2d":
            w = P[d["weight"]].shape
            h = (shape[1] + 2 * d["pad"] - w[2]) // d["stride"] + 1
            macs += conv_cost(w[1], w[0], w[2], h, h)[1]
            shape = (w[0], h, h)
        elif layer.kind == "residual_block":
            w1, w2 = P[d["conv1"]].shape, P[d["conv2"]].shape
            h = (shape[1] + 2 - 3) // d["stride"] + 1
            macs += conv_cost(w1[1], w1[0], 3, h, h)[1] + conv_cost(w2[1], w2[0], 3, h, h)[1]
            if d["shortcut"] is not None:
                ws = P[d["shortcut"]].shape
                macs += conv_cost(ws[1], ws[0], 1, h, h)[1]
            shape = (w2[0], h, h)
        elif layer.kind == "dense":
            w = P[d["weight"]].shape
            macs += dense_cost(w[0], w[1])[1]
            shape = (w[1],)
        elif layer.kind == "pool":
            shape = (shape[0],)
        elif layer.kind == "upsample":
            shape = (shape[0], shape[1] * 2, shape[2] * 2)
        elif layer.kind == "reshape":
            shape = tuple(d["shape"])
    return params, macs


def prune_report(net, decision):
    """One JSON record: per-group kept/total and params/FLOPs before and after."""
    if not decision.after:
        compact_network(net, decision)
    if not decision.before:
        p, m = count_params_flops(net)
        decision.before = {"params": p, "flops": 2 * m}
    rec = {
        "threshold": decision.threshold,
        "groups": {gid: {"kept": decision.kept(gid), "total": int(m.size)}
                   for gid, m in decision.masks.items()},
        "before": decision.before,
        "after": decision.after,
    }
    return json.dumps(rec, sort_keys=True)
