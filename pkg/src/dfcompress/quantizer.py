"""Binary weight quantization with a clipped full-precision buffer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quantize_sign(buffer, delta):
    """delta * sign(buffer) with sign(0) = +1."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    buffer = np.asarray(buffer, dtype=np.float64)
    return np.where(buffer >= 0, delta, -delta)


def clip_project(buffer, delta):
    """Projection onto the box ||b||_inf <= delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return np.clip(np.asarray(buffer, dtype=np.float64), -delta, delta)


def grid_quantize(x, spacing):
    """Round each coordinate to the nearest multiple of ``spacing`` (0 = identity)."""
    x = np.asarray(x, dtype=np.float64)
    if spacing == 0:
        return x.copy()
    return spacing * np.round(x / spacing)


@dataclass
class QuantState:
    delta: float
    buffers: dict = field(default_factory=dict)

    @property
    def quantized_ids(self):
        return set(self.buffers)

    def check(self):
        for pid, b in self.buffers.items():
            if np.max(np.abs(b), initial=0.0) > self.delta:
                raise AssertionError(f"buffer {pid} leaves the [-delta, delta] box")

    def refresh(self, net):
        """Write delta * sign(buffer) into the network's live weights."""
        for pid, b in self.buffers.items():
            net.params[pid].data = quantize_sign(b, self.delta)


def prefix_slice(src, shape):
    """Leading slice of ``src`` along every axis to reach ``shape``."""
    if any(s > t for s, t in zip(shape, src.shape)) or len(shape) != src.ndim:
        raise ValueError(f"cannot map teacher shape {src.shape} onto {shape}")
    return src[tuple(slice(0, n) for n in shape)].copy()


def init_from_teacher(student, teacher, delta, width_map=True):
    """Copy teacher parameters into ``student`` and quantize its quantizable weights.

    With ``width_map`` a thinner student takes the leading channel slices of
    every teacher tensor. BN running statistics are copied the same way.
    Returns the :class:`QuantState` with ``buffers = clip(teacher, delta)``.
    """
    for pid, p in student.params.items():
        src = teacher.params[pid].data
        if src.shape != p.shape and not width_map:
            raise ValueError(f"shape mismatch for {pid}: {src.shape} vs {p.shape}")
        p.data = prefix_slice(src, p.shape) if src.shape != p.shape else src.copy()
    for member, (rm, rv) in student.bn_stats.items():
        trm, trv = teacher.bn_stats[member]
        rm[:] = trm[: rm.size]
        rv[:] = trv[: rv.size]
    state = QuantState(delta, {pid: clip_project(student.params[pid].data, delta)
                               for pid in student.quantizable_ids()})
    state.refresh(student)
    return state


def quantized_descent_step(net, quant, optimizer):
    """One buffer update: optimizer step on the buffers, project, re-binarize.

    ``net``'s parameters must hold gradients computed at delta * sign(buffer).
    Non-quantized parameters take a plain optimizer step. Optimizer moments
    for buffers are left unprojected.
    """
    for pid, b in quant.buffers.items():
        g = net.params[pid].grad
        if g is not None and g.shape != b.shape:
            raise ValueError(f"gradient shape {g.shape} does not match buffer {pid} {b.shape}")
    updates = {}
    for pid, p in net.params.items():
        if p.grad is None:
            continue
        if pid in quant.buffers:
            updates[pid] = (quant.buffers[pid], p.grad)
        else:
            updates[pid] = (p.data, p.grad)
    new = optimizer.step_arrays(updates)
    for pid, value in new.items():
        if pid in quant.buffers:
            quant.buffers[pid] = clip_project(value, quant.delta)
        else:
            net.params[pid].data = value
    quant.refresh(net)
    return quant
