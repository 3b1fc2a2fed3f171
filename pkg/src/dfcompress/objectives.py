"""Divergences, regularisers and the adversarial distillation loss."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .networks import forward

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    divergence: str = "KL"  # "KL" or "JS_symmetric"
    beta: float = 1.0
    gamma: float = 0.0
    lam: float = 0.0
    pruning_enabled: bool = False

    def __post_init__(self):
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"unknown divergence {self.divergence!r}; expected one of {sorted(DIVERGENCES)}")
        for name in ("beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _check_probs(p):
    d = p.data if isinstance(p, ag.Tensor) else np.asarray(p)
    if np.any(d < 0):
        raise ValueError("divergence inputs must be nonnegative")


def kl_rows(p, q):
    """Row-wise KL(p || q) over the last axis, both arguments floored at 1e-12.

    Entries with p == 0 contribute 0 exactly since p * log(floor) = 0.
    """
    p, q = ag.as_tensor(p), ag.as_tensor(q)
    _check_probs(p)
    _check_probs(q)
    lp = ag.log(ag.clip(p, PROB_FLOOR, None))
    lq = ag.log(ag.clip(q, PROB_FLOOR, None))
    return ag.sum(ag.mul(p, ag.sub(lp, lq)), axis=-1)


def kl_divergence(p, q):
    return ag.mean(kl_rows(p, q))


def js_symmetric(p, q):
    """Symmetrised KL, 0.5 KL(p||q) + 0.5 KL(q||p).

    Selected as "JS_symmetric" in configs; it is not the mixture-based
    Jensen-Shannon divergence.
    """
    return ag.mul(ag.add(kl_divergence(p, q), kl_divergence(q, p)), 0.5)


DIVERGENCES = {"KL": kl_divergence, "JS_symmetric": js_symmetric}


def _normalized(m):
    flat = ag.reshape(m, (m.shape[0], -1))
    sq = ag.sum(ag.mul(flat, flat), axis=1, keepdims=True)
    # a zero-norm map stays the zero vector instead of dividing by zero
    inv = ag.power(ag.add(sq, sq.data <= 0), -0.5)
    return ag.mul(flat, inv)


def attention_reg(student_maps, teacher_maps, beta):
    """beta * sum over taps of || f_s/||f_s|| - f_t/||f_t|| ||, averaged over the batch.

    Maps are (N, H, W) or (H, W); each sample's map is normalised separately.
    """
    if len(student_maps) != len(teacher_maps):
        raise ValueError(f"attention_reg: {len(student_maps)} student maps vs {len(teacher_maps)} teacher maps")
    total = ag.Tensor(0.0)
    for s, t in zip(student_maps, teacher_maps):
        s, t = ag.as_tensor(s), ag.as_tensor(t)
        if s.shape != t.shape:
            raise ValueError(f"attention_reg: map shapes {s.shape} and {t.shape} differ")
        if s.ndim == 2:
            s, t = ag.reshape(s, (1,) + s.shape), ag.reshape(t, (1,) + t.shape)
        us = _normalized(s)
        ut = _normalized(t)
        diff = ag.sub(us, ut)
        sq = ag.sum(ag.mul(diff, diff), axis=1)
        # sqrt is not differentiable at 0: identical maps give exactly zero with zero gradient
        pos = sq.data > 0
        dist = ag.mul(ag.power(ag.add(sq, ~pos), 0.5), pos)
        total = ag.add(total, ag.mean(dist))
    return ag.mul(total, float(beta))


def prune_reg(net, gamma, lam):
    """sum_groups gamma/w_l * ||s||_1 + lam * (||W||_F^2 + ||bias||^2).

    Each shared scale vector is penalised once per group. The weight-decay
    term covers conv/dense weights, dense biases and the BN shifts ``b``.
    """
    total = ag.Tensor(0.0)
    if gamma:
        for g in net.scale_groups.values():
            total = ag.add(total, ag.mul(ag.l1_norm(net.params[g.s_id]), g.gamma_l(gamma)))
    if lam:
        scale_ids = {g.s_id for g in net.scale_groups.values()}
        for pid, p in net.params.items():
            if pid in scale_ids:
                continue
            total = ag.add(total, ag.mul(ag.sq_frobenius(p), lam))
    return total


def prediction_entropy(probabilities):
    """Batch mean of -sum p log p (natural log)."""
    p = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(np.mean(-plogp.sum(axis=-1)))


@dataclass
class LossParts:
    total: ag.Tensor
    divergence: float
    attn_reg: float
    prune_reg: float
    teacher_probs: np.ndarray


def teacher_targets(teacher, x):
    """Frozen teacher probabilities and attention maps; no graph is recorded."""
    with ag.no_grad():
        logits, maps = forward(teacher, x, collect_attention=True, mode="eval")
        probs = ag.softmax(logits, axis=-1)
    return probs.data, [m.data for m in maps]


def total_loss(teacher, student, x, config, student_mode="train", targets=None,
               gamma=None, lam=None):
    """D(T(x) || S(x)) + R_a (+ R_p when pruning) for a synthetic batch ``x``.

    ``x`` may carry a graph back to the generator. The teacher is evaluated
    under ``no_grad`` against the input values only when ``targets`` is given;
    otherwise gradients flow through the teacher into ``x`` but never into
    the teacher's parameters (they are detached leaves).
    """
    div = DIVERGENCES[config.divergence]
    if targets is None:
        t_logits, t_maps = _frozen_forward(teacher, x)
        t_probs = ag.softmax(t_logits, axis=-1)
    else:
        t_probs, t_maps = ag.Tensor(targets[0]), [ag.Tensor(m) for m in targets[1]]
    s_logits, s_maps = forward(student, x, collect_attention=True, mode=student_mode)
    s_probs = ag.softmax(s_logits, axis=-1)
    d = div(t_probs, s_probs)
    total = d
    ra_val = 0.0
    if config.beta and s_maps:
        ra = attention_reg(s_maps, t_maps, config.beta)
        total = ag.add(total, ra)
        ra_val = ra.item()
    rp_val = 0.0
    if config.pruning_enabled:
        g = config.gamma if gamma is None else gamma
        lm = config.lam if lam is None else lam
        rp = prune_reg(student, g, lm)
        total = ag.add(total, rp)
        rp_val = rp.item()
    return LossParts(total, d.item(), ra_val, rp_val, np.asarray(t_probs.data))


def _frozen_forward(teacher, x):
    # detached leaves: the recorded graph reaches x but never the teacher's tensors
    frozen = replace(teacher, params={pid: ag.Tensor(p.data) for pid, p in teacher.params.items()})
    return forward(frozen, x, collect_attention=True, mode="eval")
