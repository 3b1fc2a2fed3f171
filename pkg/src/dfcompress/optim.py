"""Adam and SGD over named numpy arrays."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step_arrays(self, updates, lr=None, sign=1.0):
        """Return new values for ``{name: (value, grad)}``; ``sign=-1`` ascends."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, (value, grad) in updates.items():
            g = sign * grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def step(self, net, sign=1.0, masks=None):
        """Update every parameter of ``net`` that holds a gradient."""
        updates = {pid: (p.data, p.grad) for pid, p in net.params.items() if p.grad is not None}
        for pid, value in self.step_arrays(updates, sign=sign).items():
            if masks and pid in masks:
                value = value * masks[pid]
            net.params[pid].data = value


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.buf = {}

    def step_arrays(self, updates, lr=None, sign=1.0):
        lr = self.lr if lr is None else lr
        out = {}
        for name, (value, grad) in updates.items():
            g = sign * grad
            if self.momentum:
                b = self.buf.get(name)
                b = g.copy() if b is None else self.momentum * b + g
                self.buf[name] = b
                g = b
            out[name] = value - lr * g
        return out

    def step(self, net, sign=1.0, masks=None):
        updates = {pid: (p.data, p.grad) for pid, p in net.params.items() if p.grad is not None}
        for pid, value in self.step_arrays(updates, sign=sign).items():
            if masks and pid in masks:
                value = value * masks[pid]
            net.params[pid].data = value
