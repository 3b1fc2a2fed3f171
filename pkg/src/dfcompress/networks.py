"""Toy teacher/student residual CNNs and the synthetic-input generator.

A :class:`NetworkGraph` is an ordered list of :class:`LayerSpec` records
interpreted by :func:`forward`. Parameters live in a flat registry; every
parameter axis that indexes channels is tagged with the scale group owning
that channel space, which is what lets the pruner slice a network apart.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ACTIVATIONS = {"relu": ag.relu, "gelu": ag.gelu}


def load_arch(name="toy_arch_v1.json"):
    text = resources.files("dfcompress").joinpath("configs").joinpath(name).read_text()
    return json.loads(text)


@dataclass
class LayerSpec:
    kind: str
    dims: dict = field(default_factory=dict)
    quantizable: bool = False
    scale_group_id: str | None = None
    name: str = ""


@dataclass
class ScaleGroup:
    gid: str
    width: int
    members: list = field(default_factory=list)

    @property
    def s_id(self):
        return f"{self.gid}.s"

    @property
    def b_id(self):
        return f"{self.gid}.b"

    def gamma_l(self, gamma):
        return gamma / self.width


@dataclass
class NetworkGraph:
    layers: list
    params: dict
    param_axes: dict
    scale_groups: dict
    bn_stats: dict
    attention_taps: list
    input_shape: tuple
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    kind: str = "classifier"

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def scale(self, gid):
        return self.params[self.scale_groups[gid].s_id]

    def shift(self, gid):
        return self.params[self.scale_groups[gid].b_id]

    def group_channels(self, gid):
        return self.scale(gid).size

    def copy(self):
        return clone(self)

    def set_requires_grad(self, flag):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def conv_weight_ids(self):
        return [pid for pid, p in self.params.items() if p.ndim == 4]

    def quantizable_ids(self):
        ids = []
        for layer in self.layers:
            if layer.quantizable:
                ids.extend(layer.dims.get("weight_ids", ()))
        return ids


def clone(net):
    params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in net.params.items()}
    return NetworkGraph(
        layers=copy.deepcopy(net.layers),
        params=params,
        param_axes=dict(net.param_axes),
        scale_groups=copy.deepcopy(net.scale_groups),
        bn_stats={k: (m.copy(), v.copy()) for k, (m, v) in net.bn_stats.items()},
        attention_taps=list(net.attention_taps),
        input_shape=tuple(net.input_shape),
        bn_eps=net.bn_eps,
        bn_momentum=net.bn_momentum,
        kind=net.kind,
    )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, rng, scale_init):
        self.rng = rng
        self.scale_init = scale_init
        self.params = {}
        self.axes = {}
        self.groups = {}
        self.stats = {}

    def he(self, pid, shape, fan_in, axes):
        std = np.sqrt(2.0 / fan_in)
        self.params[pid] = Tensor(self.rng.standard_normal(shape) * std, requires_grad=True)
        self.axes[pid] = axes

    def zeros(self, pid, shape, axes):
        self.params[pid] = Tensor(np.zeros(shape), requires_grad=True)
        self.axes[pid] = axes

    def group(self, gid, channels, width):
        if gid in self.groups:
            if self.params[self.groups[gid].s_id].size != channels:
                raise ValueError(f"scale group {gid}: channel mismatch")
            return gid
        g = ScaleGroup(gid, width)
        self.groups[gid] = g
        self.params[g.s_id] = Tensor(np.full(channels, self.scale_init), requires_grad=True)
        self.params[g.b_id] = Tensor(np.zeros(channels), requires_grad=True)
        self.axes[g.s_id] = (gid,)
        self.axes[g.b_id] = (gid,)
        return gid

    def bn(self, member, gid):
        self.groups[gid].members.append(member)
        c = self.params[self.groups[gid].s_id].size
        self.stats[member] = (np.zeros(c), np.ones(c))
        return member


def build_classifier(channels, blocks_per_stage, input_shape, num_classes, seed,
                     activation="relu", bn_eps=1e-5, bn_momentum=0.9, scale_init=0.5):
    """Pre-activation residual CNN: stem conv, residual stages, BN-act, pool, dense.

    Stage ``i`` halves spatial size when ``i > 0``. Residual streams of a stage
    share one scale group (``stream{i}``); each block's inner BN has its own.
    """
    channels = [int(c) for c in channels]
    if not channels or min(channels) < 1 or blocks_per_stage < 1:
        raise ValueError(f"invalid classifier config: channels={channels}, blocks={blocks_per_stage}")
    cin, h, w = (int(v) for v in input_shape)
    if w % (2 ** (len(channels) - 1)):
        raise ValueError(f"input width {w} not divisible for {len(channels)} stages")
    b = _Builder(np.random.default_rng(seed), scale_init)
    layers = []

    b.he("stem.w", (channels[0], cin, 3, 3), cin * 9, ("stream0", None, None, None))
    b.group("stream0", channels[0], w)
    layers.append(LayerSpec("conv2d", {"weight": "stem.w", "stride": 1, "pad": 1,
                                       "weight_ids": ["stem.w"]}, quantizable=False, name="stem"))
    taps = []
    width = w
    prev = "stream0"
    for si, c in enumerate(channels):
        gid = f"stream{si}"
        for bi in range(blocks_per_stage):
            name = f"s{si}b{bi}"
            stride = 2 if (si > 0 and bi == 0) else 1
            out_width = width // stride
            b.group(gid, c, out_width)
            cin_block = b.params[b.groups[prev].s_id].size
            inner = b.group(f"{name}.inner", c, out_width)
            dims = {
                "bn1": b.bn(f"{name}.bn1", prev),
                "conv1": f"{name}.conv1.w",
                "bn2": b.bn(f"{name}.bn2", inner),
                "conv2": f"{name}.conv2.w",
                "stride": stride,
                "shortcut": None,
            }
            b.he(dims["conv1"], (c, cin_block, 3, 3), cin_block * 9, (inner, prev, None, None))
            b.he(dims["conv2"], (c, c, 3, 3), c * 9, (gid, inner, None, None))
            weight_ids = [dims["conv1"], dims["conv2"]]
            if prev != gid or stride != 1:
                dims["shortcut"] = f"{name}.short.w"
                b.he(dims["shortcut"], (c, cin_block, 1, 1), cin_block, (gid, prev, None, None))
                weight_ids.append(dims["shortcut"])
            dims["weight_ids"] = weight_ids
            dims["activation"] = activation
            layers.append(LayerSpec("residual_block", dims, quantizable=True,
                                    scale_group_id=prev, name=name))
            prev = gid
            width = out_width
        taps.append(len(layers) - 1)  # last block before down-sampling / pooling

    layers.append(LayerSpec("scaled_bn", {"member": b.bn("head.bn", prev)},
                            scale_group_id=prev, name="head.bn"))
    layers.append(LayerSpec("activation", {"fn": activation}, name="head.act"))
    layers.append(LayerSpec("pool", {}, name="pool"))
    cfin = channels[-1]
    b.he("fc.w", (cfin, num_classes), cfin, (prev, None))
    b.zeros("fc.b", (num_classes,), (None,))
    layers.append(LayerSpec("dense", {"weight": "fc.w", "bias": "fc.b", "weight_ids": ["fc.w"]},
                            quantizable=False, name="fc"))
    return NetworkGraph(layers, b.params, b.axes, b.groups, b.stats, taps,
                        tuple(int(v) for v in input_shape), bn_eps, bn_momentum)


def build_teacher(arch=None, seed=0):
    arch = arch or load_arch()
    t = arch["teacher"]
    return build_classifier(t["channels"], t["blocks_per_stage"], arch["input_shape"],
                            arch["num_classes"], seed, t.get("activation", "relu"),
                            arch.get("bn_eps", 1e-5), arch.get("bn_momentum", 0.9),
                            arch.get("scale_init", 0.5))


def build_student(arch=None, seed=0, width="half"):
    """``width='half'`` uses the student config, ``'full'`` the teacher's topology."""
    arch = arch or load_arch()
    s = arch["student"] if width == "half" else arch["teacher"]
    return build_classifier(s["channels"], s["blocks_per_stage"], arch["input_shape"],
                            arch["num_classes"], seed, s.get("activation", "relu"),
                            arch.get("bn_eps", 1e-5), arch.get("bn_momentum", 0.9),
                            arch.get("scale_init", 0.5))


def build_generator(arch=None, seed=0, z_dim=None):
    arch = arch or load_arch()
    g = arch["generator"]
    z_dim = int(z_dim or g["z_dim"])
    cout, h, w = (int(v) for v in arch["input_shape"])
    base = int(g["base_size"])
    chans = [int(c) for c in g["channels"]]
    if base * 2 ** len(chans) != h or h != w:
        raise ValueError(f"generator base {base} with {len(chans)} up-samplings cannot reach {h}x{w}")
    act = g.get("activation", "relu")
    b = _Builder(np.random.default_rng(seed), arch.get("scale_init", 0.5))
    layers = []
    c0 = chans[0]
    b.he("g.fc.w", (z_dim, c0 * base * base), z_dim, (None, None))
    b.zeros("g.fc.b", (c0 * base * base,), (None,))
    layers.append(LayerSpec("dense", {"weight": "g.fc.w", "bias": "g.fc.b"}, name="g.fc"))
    layers.append(LayerSpec("reshape", {"shape": (c0, base, base)}, name="g.reshape"))
    b.group("g.bn0", c0, base)
    layers.append(LayerSpec("scaled_bn", {"member": b.bn("g.bn0", "g.bn0")},
                            scale_group_id="g.bn0", name="g.bn0"))
    prev, size = c0, base
    for i, c in enumerate(chans):
        size *= 2
        layers.append(LayerSpec("upsample", {}, name=f"g.up{i}"))
        wid = f"g.conv{i}.w"
        b.he(wid, (c, prev, 3, 3), prev * 9, (None, None, None, None))
        layers.append(LayerSpec("conv2d", {"weight": wid, "stride": 1, "pad": 1}, name=f"g.conv{i}"))
        gid = f"g.bn{i + 1}"
        b.group(gid, c, size)
        layers.append(LayerSpec("scaled_bn", {"member": b.bn(gid, gid)}, scale_group_id=gid, name=gid))
        layers.append(LayerSpec("activation", {"fn": act}, name=f"g.act{i}"))
        prev = c
    b.he("g.out.w", (cout, prev, 3, 3), prev * 9, (None, None, None, None))
    layers.append(LayerSpec("conv2d", {"weight": "g.out.w", "stride": 1, "pad": 1}, name="g.out"))
    b.group("g.bnout", cout, size)
    layers.append(LayerSpec("scaled_bn", {"member": b.bn("g.bnout", "g.bnout")},
                            scale_group_id="g.bnout", name="g.bnout"))
    return NetworkGraph(layers, b.params, b.axes, b.groups, b.stats, [], (z_dim,),
                        arch.get("bn_eps", 1e-5), arch.get("bn_momentum", 0.9), kind="generator")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def scaled_bn_forward(x, s, b, eps, mode, running=None, momentum=0.9):
    """y = s * ((x - mu) / sqrt(var + eps) + b), per channel.

    ``running`` is a ``(mean, var)`` pair of arrays; train mode updates it in
    place with ``running = momentum * running + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ValueError("scaled_bn: eps must be positive")
    c = x.shape[1]
    if c != s.size:
        raise ValueError(f"scaled_bn: input has {c} channels, scale vector has {s.size}")
    shape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("scaled_bn: train mode needs a batch of at least 2")
        xhat, mu, v = ag.batch_norm(x, eps)
        if running is not None:
            rm, rv = running
            rm *= momentum
            rm += (1.0 - momentum) * mu
            rv *= momentum
            rv += (1.0 - momentum) * v
    elif mode == "eval":
        if running is None:
            raise ValueError("scaled_bn: eval mode needs running statistics")
        rm, rv = running
        xhat = ag.mul(ag.sub(x, rm.reshape(shape)), 1.0 / np.sqrt(rv.reshape(shape) + eps))
    else:
        raise ValueError(f"scaled_bn: unknown mode {mode!r}")
    return ag.mul(ag.reshape(s, shape), ag.add(xhat, ag.reshape(b, shape)))


def attention_map(feature):
    """Mean over channels of squared activations: (N, C, H, W) -> (N, H, W)."""
    feature = ag.as_tensor(feature)
    if feature.ndim != 4 or feature.shape[1] < 1:
        raise ValueError(f"attention_map: expected (N, C, H, W) with C >= 1, got {feature.shape}")
    return ag.mean(ag.mul(feature, feature), axis=1)


def _bn(net, x, member, gid, mode):
    return scaled_bn_forward(x, net.scale(gid), net.shift(gid), net.bn_eps, mode,
                             net.bn_stats[member], net.bn_momentum)


def forward(net, x, collect_attention=False, mode="eval"):
    """Run ``net`` on ``x``; returns ``(output, attention maps at the taps)``."""
    x = ag.as_tensor(x)
    expected = tuple(net.input_shape)
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"forward: input shape {x.shape[1:]} does not match network input {expected}")
    maps = []
    taps = set(net.attention_taps) if collect_attention else ()
    P = net.params
    for i, layer in enumerate(net.layers):
        d = layer.dims
        k = layer.kind
        if k == "conv2d":
            x = ag.conv2d(x, P[d["weight"]], d["stride"], d["pad"])
        elif k == "dense":
            x = ag.add(ag.matmul(x, P[d["weight"]]), P[d["bias"]])
        elif k == "scaled_bn":
            x = _bn(net, x, d["member"], layer.scale_group_id, mode)
        elif k == "activation":
            x = ACTIVATIONS[d["fn"]](x)
        elif k == "residual_block":
            x = _residual(net, x, layer, mode)
        elif k == "pool":
            x = ag.mean(x, axis=(2, 3))
        elif k == "upsample":
            x = ag.upsample2x(x)
        elif k == "reshape":
            x = ag.reshape(x, (x.shape[0],) + tuple(d["shape"]))
        else:
            raise ValueError(f"forward: unknown layer kind {k!r}")
        if i in taps:
            maps.append(attention_map(x))
    return x, maps


def _residual(net, x, layer, mode):
    d = layer.dims
    act = ACTIVATIONS[d["activation"]]
    P = net.params
    inner = net.param_axes[d["conv1"]][0]
    o = act(_bn(net, x, d["bn1"], layer.scale_group_id, mode))
    y = ag.conv2d(o, P[d["conv1"]], d["stride"], 1)
    y = act(_bn(net, y, d["bn2"], inner, mode))
    y = ag.conv2d(y, P[d["conv2"]], 1, 1)
    short = x if d["shortcut"] is None else ag.conv2d(o, P[d["shortcut"]], d["stride"], 0)
    return ag.add(y, short)


def predict_proba(net, x, mode="eval"):
    with ag.no_grad():
        logits, _ = forward(net, x, mode=mode)
        return ag.softmax(logits, axis=-1).data
