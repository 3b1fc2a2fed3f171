"""Versioned little-endian binary checkpoints.

Layout (all integers unsigned little-endian)::

    magic      4 bytes   b"DFCK" (full precision) or b"DFBQ" (packed binary)
    version    u32
    n_params   u32
    delta      f64       (0.0 for DFCK)
    topo_len   u32, topology JSON (layers, axes, taps, shapes)
    n_params x {id_len u16, id utf-8, encoding u8, ndim u8, shape u32*ndim, payload}
        encoding 0: raw f64 values, row-major
        encoding 1: one sign bit per value (1 = +delta), numpy packbits, little bit order
    n_groups   u32 x {gid, width u32, n_members u32, member ids}
    n_stats    u32 x {member id, length u32, running mean f64*, running var f64*}

Strings are ``u16`` length-prefixed UTF-8.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .autograd import Tensor
from .networks import LayerSpec, NetworkGraph, ScaleGroup

MAGIC_FULL = b"DFCK"
MAGIC_BINARY = b"DFBQ"
VERSION = 1


def _w_str(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _r_str(buf):
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def _topology(net):
    return {
        "layers": [
            {"kind": l.kind, "dims": l.dims, "quantizable": l.quantizable,
             "scale_group_id": l.scale_group_id, "name": l.name}
            for l in net.layers
        ],
        "param_axes": {k: list(v) for k, v in net.param_axes.items()},
        "attention_taps": list(net.attention_taps),
        "input_shape": list(net.input_shape),
        "bn_eps": net.bn_eps,
        "bn_momentum": net.bn_momentum,
        "kind": net.kind,
    }


def _f64(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dumps(net, binary_ids=(), delta=None):
    """Serialize ``net``. Ids in ``binary_ids`` are stored as packed signs of ``delta``."""
    binary_ids = set(binary_ids)
    if binary_ids and (delta is None or delta <= 0):
        raise ValueError("packed binary parameters need a positive delta")
    buf = io.BytesIO()
    buf.write(MAGIC_BINARY if binary_ids else MAGIC_FULL)
    buf.write(struct.pack("<II", VERSION, len(net.params)))
    buf.write(struct.pack("<d", float(delta) if binary_ids else 0.0))
    topo = json.dumps(_topology(net), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(topo)))
    buf.write(topo)
    for pid, p in net.params.items():
        _w_str(buf, pid)
        enc = 1 if pid in binary_ids else 0
        buf.write(struct.pack("<BB", enc, p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        if enc:
            vals = p.data.reshape(-1)
            if not np.all(np.abs(vals) == delta):
                raise ValueError(f"parameter {pid} is not two-valued at +/-{delta}")
            buf.write(np.packbits(vals > 0, bitorder="little").tobytes())
        else:
            buf.write(_f64(p.data))
    buf.write(struct.pack("<I", len(net.scale_groups)))
    for gid, g in net.scale_groups.items():
        _w_str(buf, gid)
        buf.write(struct.pack("<II", g.width, len(g.members)))
        for m in g.members:
            _w_str(buf, m)
    buf.write(struct.pack("<I", len(net.bn_stats)))
    for member, (rm, rv) in net.bn_stats.items():
        _w_str(buf, member)
        buf.write(struct.pack("<I", rm.size))
        buf.write(_f64(rm))
        buf.write(_f64(rv))
    return buf.getvalue()


def loads(blob):
    buf = io.BytesIO(blob)
    magic = buf.read(4)
    if magic not in (MAGIC_FULL, MAGIC_BINARY):
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    version, n_params = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (delta,) = struct.unpack("<d", buf.read(8))
    (tlen,) = struct.unpack("<I", buf.read(4))
    topo = json.loads(buf.read(tlen).decode("utf-8"))
    params = {}
    for _ in range(n_params):
        pid = _r_str(buf)
        enc, ndim = struct.unpack("<BB", buf.read(2))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        if enc == 1:
            nbytes = (n + 7) // 8
            bits = np.unpackbits(np.frombuffer(buf.read(nbytes), dtype=np.uint8),
                                 count=n, bitorder="little")
            data = np.where(bits == 1, delta, -delta)
        else:
            data = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
        params[pid] = Tensor(data.reshape(shape), requires_grad=True)
    groups = {}
    (ng,) = struct.unpack("<I", buf.read(4))
    for _ in range(ng):
        gid = _r_str(buf)
        width, nm = struct.unpack("<II", buf.read(8))
        groups[gid] = ScaleGroup(gid, width, [_r_str(buf) for _ in range(nm)])
    stats = {}
    (ns,) = struct.unpack("<I", buf.read(4))
    for _ in range(ns):
        member = _r_str(buf)
        (n,) = struct.unpack("<I", buf.read(4))
        rm = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
        rv = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
        stats[member] = (rm, rv)
    layers = []
    for l in topo["layers"]:
        dims = dict(l["dims"])
        if "shape" in dims:
            dims["shape"] = tuple(dims["shape"])
        layers.append(LayerSpec(l["kind"], dims, l["quantizable"], l["scale_group_id"], l["name"]))
    return NetworkGraph(
        layers=layers,
        params=params,
        param_axes={k: tuple(v) for k, v in topo["param_axes"].items()},
        scale_groups=groups,
        bn_stats=stats,
        attention_taps=list(topo["attention_taps"]),
        input_shape=tuple(topo["input_shape"]),
        bn_eps=topo["bn_eps"],
        bn_momentum=topo["bn_momentum"],
        kind=topo["kind"],
    )


def save(net, path, binary_ids=(), delta=None):
    with open(path, "wb") as f:
        f.write(dumps(net, binary_ids, delta))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
