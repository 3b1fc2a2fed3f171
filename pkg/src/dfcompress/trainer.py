"""Teacher pretraining and the adversarial data-free distillation loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import data
from .networks import build_generator, build_student, build_teacher, clone, forward, predict_proba
from .objectives import LossConfig, prediction_entropy, teacher_targets, total_loss
from .optim import Adam
from .pruner import compact_network, count_params_flops, threshold_prune
from .quantizer import QuantState, init_from_teacher, quantize_sign, quantized_descent_step

MODES = ("plain", "quantize", "prune")

# named RNG streams; every random draw is keyed by (seed, stream)
STREAM_TEACHER_INIT = 0
STREAM_TEACHER_DATA = 1
STREAM_STUDENT_INIT = 2
STREAM_GENERATOR_INIT = 3
STREAM_LATENT = 4
STREAM_PROBE = 5
STREAM_CONTROL_INIT = 6
STREAM_SUPERVISED_DATA = 7


def rng_for(seed, stream):
    return np.random.default_rng([int(seed), int(stream)])


class TrainingError(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


@dataclass
class TrainProtocol:
    mode: str = "plain"
    rounds: int = 2000
    generator_steps_per_round: int = 1
    student_steps_per_round: int = 10
    batch: int = 64
    lr_student: float = 2e-3
    lr_generator: float = 1e-3
    z_dim: int = 100
    warm_up_rounds: int = 0
    divergence: str = "KL"
    beta: float = 1.0
    gamma: float = 0.0
    lam: float = 0.0
    delta: float = 0.1
    t_s: float = 0.1
    student_width: str = "half"
    student_bn_mode: str = "eval"
    fresh_z_per_step: bool = False
    eval_every: int = 100
    probe_size: int = 1000
    check_every_step: bool = False
    wall_clock: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("generator_steps_per_round", "student_steps_per_round", "batch", "z_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rounds < 0 or self.warm_up_rounds < 0 or self.warm_up_rounds > max(self.rounds, 0):
            raise ValueError("need 0 <= warm_up_rounds <= rounds")
        if self.student_width not in ("half", "full"):
            raise ValueError("student_width must be 'half' or 'full'")
        if self.student_bn_mode not in ("train", "eval"):
            raise ValueError("student_bn_mode must be 'train' or 'eval'")

    def loss_config(self):
        return LossConfig(self.divergence, self.beta, self.gamma, self.lam, self.mode == "prune")


def warmup_coefficients(round_index, protocol):
    """Linear ramp of (gamma, lam) from 0 at round 0 to the targets at warm_up_rounds."""
    w = protocol.warm_up_rounds
    frac = 1.0 if w == 0 else min(round_index, w) / w
    return protocol.gamma * frac, protocol.lam * frac


# ---------------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels):
    p = ag.softmax(logits, axis=-1)
    onehot = np.eye(logits.shape[-1])[labels]
    return ag.mul(ag.mean(ag.sum(ag.mul(ag.log(ag.clip(p, 1e-12, None)), onehot), axis=-1)), -1.0)


def accuracy(net, x, y, mode="eval"):
    return float(np.mean(predict_proba(net, x, mode).argmax(axis=1) == y))


def supervised_train(net, steps, seed, lr=2e-3, batch=64, optimizer=None, masks=None,
                     data_seed=None, start=0):
    """Cross-entropy training on the synthetic distribution; masked entries stay 0."""
    opt = optimizer or Adam(lr)
    data_seed = seed if data_seed is None else data_seed
    net.set_requires_grad(True)
    for step in range(steps):
        x, y = data.batch(data_seed, start + step * batch, batch)
        logits, _ = forward(net, x, mode="train")
        loss = cross_entropy(logits, y)
        net.zero_grad()
        ag.backward(loss)
        opt.step(net, masks=masks)
    return net


def pretrain_teacher(seed=0, steps=800, lr=2e-3, batch=64, arch=None, min_accuracy=0.95,
                     probe_size=2000):
    """Train the toy teacher on its synthetic distribution and freeze it."""
    teacher = build_teacher(arch, seed=int(rng_for(seed, STREAM_TEACHER_INIT).integers(2**31)))
    supervised_train(teacher, steps, seed, lr=lr, batch=batch,
                     data_seed=int(rng_for(seed, STREAM_TEACHER_DATA).integers(2**31)))
    xp, yp = data.probe_set(seed, probe_size)
    acc = accuracy(teacher, xp, yp)
    if acc < min_accuracy:
        raise TrainingError(f"teacher reached accuracy {acc:.4f} < {min_accuracy}", {"accuracy": acc})
    teacher.set_requires_grad(False)
    return teacher, acc


# ---------------------------------------------------------------------------
# data-free loop
# ---------------------------------------------------------------------------

@dataclass
class DataFreeState:
    teacher: object
    student: object
    generator: object
    protocol: TrainProtocol
    opt_student: Adam
    opt_generator: Adam
    z_rng: np.random.Generator
    quant: QuantState | None = None
    masks: dict | None = None
    round: int = 0


def init_state(teacher, protocol, student=None, masks=None):
    """Build student/generator/optimizers. Quantize and prune modes start from the teacher."""
    p = protocol
    if student is None:
        student = build_student(seed=int(rng_for(p.seed, STREAM_STUDENT_INIT).integers(2**31)),
                                width="full" if p.mode == "prune" else p.student_width)
    quant = None
    if p.mode == "quantize":
        quant = init_from_teacher(student, teacher, p.delta)
    elif p.mode == "prune":
        if student.param_count() != teacher.param_count():
            raise ValueError("prune mode starts from a full-width copy of the teacher")
        for pid, t in teacher.params.items():
            student.params[pid].data = t.data.copy()
        for m, (rm, rv) in teacher.bn_stats.items():
            student.bn_stats[m] = (rm.copy(), rv.copy())
    generator = build_generator(seed=int(rng_for(p.seed, STREAM_GENERATOR_INIT).integers(2**31)),
                                z_dim=p.z_dim)
    student.set_requires_grad(True)
    generator.set_requires_grad(True)
    if masks:
        for pid, m in masks.items():
            student.params[pid].data = student.params[pid].data * m
    return DataFreeState(teacher, student, generator, p, Adam(p.lr_student), Adam(p.lr_generator),
                         rng_for(p.seed, STREAM_LATENT), quant, masks)


def _latent(state):
    return state.z_rng.standard_normal((state.protocol.batch, state.protocol.z_dim))


def generator_step(state, z):
    """One ascent step of the generator on the distillation loss; returns the loss value."""
    p = state.protocol
    cfg = p.loss_config()
    cfg.pruning_enabled = False  # z-independent term carries no generator gradient
    state.student.set_requires_grad(False)
    state.generator.zero_grad()
    x, _ = forward(state.generator, z, mode="train")
    parts = total_loss(state.teacher, state.student, x, cfg, student_mode=p.student_bn_mode)
    if not math.isfinite(parts.total.item()):
        raise TrainingError("non-finite generator loss", {"round": state.round, "loss": parts.total.item()})
    ag.backward(parts.total)
    state.opt_generator.step(state.generator, sign=-1.0)
    state.student.set_requires_grad(True)
    return parts.total.item()


def synthesize(state, z):
    with ag.no_grad():
        x, _ = forward(state.generator, z, mode="train")
    return x.data


def student_step(state, x, targets, gamma, lam):
    p = state.protocol
    cfg = p.loss_config()
    state.student.zero_grad()
    parts = total_loss(state.teacher, state.student, x, cfg, student_mode=p.student_bn_mode,
                       targets=targets, gamma=gamma, lam=lam)
    if not math.isfinite(parts.total.item()):
        raise TrainingError("non-finite student loss", {"round": state.round, "loss": parts.total.item()})
    ag.backward(parts.total)
    if state.quant is not None:
        quantized_descent_step(state.student, state.quant, state.opt_student)
        if p.check_every_step:
            check_quant_invariants(state)
    else:
        state.opt_student.step(state.student, masks=state.masks)
    return parts


def check_quant_invariants(state):
    state.quant.check()
    d = state.quant.delta
    for pid in state.quant.buffers:
        w = state.student.params[pid].data
        if not np.all((w == d) | (w == -d)):
            raise AssertionError(f"live weights of {pid} are not two-valued")


def adversarial_round(state):
    """Generator ascent step(s) then student descent steps on the synthetic batch."""
    p = state.protocol
    gamma, lam = warmup_coefficients(state.round, p)
    for _ in range(p.generator_steps_per_round):
        z = _latent(state)
        gen_loss = generator_step(state, z)
    x = synthesize(state, z)
    targets = teacher_targets(state.teacher, x)
    for _ in range(p.student_steps_per_round):
        if p.fresh_z_per_step:
            x = synthesize(state, _latent(state))
            targets = teacher_targets(state.teacher, x)
        parts = student_step(state, x, targets, gamma, lam)
    state.round += 1
    return {
        "round": state.round,
        "loss": parts.total.item(),
        "generator_loss": gen_loss,
        "divergence": parts.divergence,
        "attn_reg": parts.attn_reg,
        "prune_reg": parts.prune_reg,
        "entropy": prediction_entropy(targets[0]),
        "gamma": gamma,
        "lam": lam,
    }


def agreement(student, teacher, x, mode="eval"):
    return float(np.mean(predict_proba(student, x, mode).argmax(1) == predict_proba(teacher, x).argmax(1)))


def probe(protocol):
    return data.probe_set(int(rng_for(protocol.seed, STREAM_PROBE).integers(2**31)), protocol.probe_size)[0]


METRIC_FIELDS = ("round", "loss", "divergence", "attn_reg", "prune_reg", "entropy",
                 "agreement", "params", "flops", "wall_ms")


@dataclass
class DataFreeResult:
    student: object
    generator: object
    metrics: list
    final: dict
    quant: QuantState | None = None
    decision: object = None
    dense_student: object = None
    binary_ids: list = field(default_factory=list)


def finalize(state):
    """Binarize (quantize mode) or threshold-prune and compact (prune mode)."""
    p = state.protocol
    if p.mode == "quantize":
        for pid, b in state.quant.buffers.items():
            state.student.params[pid].data = quantize_sign(b, p.delta)
        return state.student, None
    if p.mode == "prune":
        decision = threshold_prune(state.student, p.t_s)
        return compact_network(state.student, decision), decision
    return state.student, None


def train_data_free(teacher, protocol, sink=None, student=None, masks=None):
    """Run ``protocol.rounds`` adversarial rounds and finalize the student.

    ``sink`` receives every metrics record as it is produced, so a crash
    still leaves the partial series behind.
    """
    state = init_state(teacher, protocol, student=student, masks=masks)
    xprobe = probe(protocol)
    metrics = []
    params, macs = count_params_flops(state.student)
    t0 = time.perf_counter()
    try:
        for r in range(protocol.rounds):
            rec = adversarial_round(state)
            due = protocol.eval_every and (state.round % protocol.eval_every == 0 or state.round == protocol.rounds)
            out = {k: rec.get(k) for k in METRIC_FIELDS}
            out["agreement"] = agreement(state.student, teacher, xprobe, protocol.student_bn_mode) if due else None
            out["params"], out["flops"] = params, 2 * macs
            out["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3) if protocol.wall_clock else None
            metrics.append(out)
            if sink:
                sink(out)
    except TrainingError as err:
        err.record.setdefault("round", state.round)
        if sink:
            sink({k: err.record.get(k) for k in METRIC_FIELDS} | {"error": str(err)})
        raise
    final_net, decision = finalize(state)
    fp, fm = count_params_flops(final_net)
    final = {
        "agreement": agreement(final_net, teacher, xprobe, protocol.student_bn_mode),
        "params": fp,
        "flops": 2 * fm,
        "entropy": metrics[-1]["entropy"] if metrics else None,
        "rounds": protocol.rounds,
    }
    return DataFreeResult(final_net, state.generator, metrics, final, state.quant, decision,
                          dense_student=state.student if decision is not None else None,
                          binary_ids=sorted(state.quant.buffers) if state.quant else [])


def untrained_agreement(teacher, protocol):
    """Agreement of a freshly initialised student: the no-training baseline."""
    student = build_student(seed=int(rng_for(protocol.seed, STREAM_STUDENT_INIT).integers(2**31)),
                            width=protocol.student_width)
    return agreement(student, teacher, probe(protocol), protocol.student_bn_mode)


def protocol_dict(protocol):
    return asdict(protocol)
