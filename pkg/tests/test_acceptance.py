"""End-to-end acceptance checks; each test records one PASS/FAIL line in the terminal summary."""
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from dfcompress import checkpoint, optim
from dfcompress.cli import main
from dfcompress.lottery import lottery_search, paired_comparison
from dfcompress.networks import build_teacher, forward
from dfcompress.pruner import compact_network, threshold_prune, zero_then_compare
from dfcompress.theory import contraction_suite, gda_rate_check, pl_rate_check, quantization_error_violations
from dfcompress.trainer import TrainProtocol, train_data_free, untrained_agreement
from fd_cases import PRIMITIVES, composite_worst, primitive_worst

# frozen after one calibration run of the plain pipeline (2000 rounds: 0.958 vs 0.106 untrained)
MIN_AGREEMENT = 0.70
MIN_LIFT = 0.30
QUANT_GAP = 0.10
DELTAS = (0.02, 0.05, 0.1, 0.2)
SWEEP_ROUNDS = 500


def test_gradients_match_finite_differences(criterion):
    t0 = time.perf_counter()
    prim = {name: primitive_worst(name) for name in PRIMITIVES}
    comp = max(composite_worst(seed) for seed in range(100))
    elapsed = time.perf_counter() - t0
    worst = max(max(prim.values()), comp)
    ok = worst < 1e-4 and elapsed < 30
    criterion("1", "gradient correctness", ok,
              f"worst primitive {max(prim.values()):.2e}, composite {comp:.2e}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30


def test_quantization_error_bounded(criterion):
    t0 = time.perf_counter()
    bad = {(d, mode): quantization_error_violations(d, n=1000, mode=mode)
           for d in (1, 10, 100, 10_000) for mode in ("grid", "sign")}
    elapsed = time.perf_counter() - t0
    total = sum(bad.values())
    criterion("2", "quantization error bound", total == 0 and elapsed < 5,
              f"{total} violations over 8000 vectors, {elapsed:.1f}s")
    assert total == 0 and elapsed < 5


@pytest.fixture(scope="module")
def gda_runs():
    t0 = time.perf_counter()
    exact, quant = gda_rate_check(K=100_000)
    return exact, quant, time.perf_counter() - t0


def test_averaged_gap_rate(gda_runs, criterion):
    exact, _, elapsed = gda_runs
    fit = exact.fits["averaged_gap"]
    ok = abs(fit.rate + 0.5) <= 0.15 and elapsed < 60
    criterion("3a", "averaged duality gap exponent -0.5 +/- 0.15", ok,
              f"fitted {fit.rate:.3f} on window {fit.window}; per-iterate gap "
              f"{exact.fits['per_iterate_gap'].rate:.3f}; {elapsed:.1f}s")
    assert abs(fit.rate + 0.5) <= 0.15
    assert elapsed < 60


def test_quantized_gap_floor(gda_runs, criterion):
    _, quant, elapsed = gda_runs
    info = quant.info
    ok = quant.checks["floor_positive"] and quant.checks["floor_below_bound"] and elapsed < 60
    criterion("3b", "quantized gap floor under bound", ok,
              f"floor {info['floor']:.3g} <= bound {info['bound_at_K']:.3g} "
              f"(D_x {info['D_x']:.3f}, D_y {info['D_y']:.3f})")
    assert ok


def test_linear_convergence_under_pl(criterion):
    t0 = time.perf_counter()
    rep = pl_rate_check(K=500)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 10
    criterion("4", "linear convergence under two-sided PL", ok,
              f"max ratio {rep.info['max_ratio']:.5f} vs {rep.info['rate']:.5f}, {elapsed:.2f}s")
    assert ok


def test_contraction_factors_bound_steps(criterion):
    t0 = time.perf_counter()
    reps = contraction_suite(K=500)
    elapsed = time.perf_counter() - t0
    ok = len(reps) == 3 and all(r.passed for r in reps) and elapsed < 10
    detail = "; ".join(f"{r.name} {r.info['max_ratio']:.4f} <= {max(r.info['gamma1'], r.info['gamma2']):.4f}"
                       for r in reps)
    criterion("5", "per-step contraction", ok, detail)
    assert ok


@pytest.fixture(scope="module")
def delta_sweep(teacher):
    """Quantized runs over the delta grid and a full-precision run under the same budget."""
    base = TrainProtocol(rounds=SWEEP_ROUNDS, eval_every=100, check_every_step=True)
    quant = {}
    failure = None
    for d in DELTAS:
        try:
            quant[d] = train_data_free(teacher, replace(base, mode="quantize", delta=d))
        except AssertionError as err:
            failure = f"delta={d}: {err}"
            break
    full = train_data_free(teacher, replace(base, mode="plain"))
    return quant, full, failure


def test_quantizer_invariants_hold_during_training(delta_sweep, criterion):
    quant, _, failure = delta_sweep
    ok = failure is None and len(quant) == len(DELTAS)
    for d, res in quant.items():
        for pid in res.binary_ids:
            ok &= bool(np.all(np.abs(res.quant.buffers[pid]) <= d))
            ok &= set(np.unique(res.student.params[pid].data)) <= {-d, d}
    steps = SWEEP_ROUNDS * TrainProtocol().student_steps_per_round
    criterion("6", "quantizer box and binary weights after every step", ok,
              failure or f"{len(quant)} runs x {steps} checked steps")
    assert ok


def test_binary_student_close_to_full_precision(delta_sweep, criterion):
    quant, full, failure = delta_sweep
    assert failure is None
    scores = {d: r.final["agreement"] for d, r in quant.items()}
    best = max(scores, key=scores.get)
    fp = full.final["agreement"]
    ok = scores[best] >= fp - QUANT_GAP
    criterion("9", "binary vs full-precision agreement", ok,
              f"best delta {best}: {scores[best]:.3f} vs full precision {fp:.3f}; "
              + ", ".join(f"{d}: {s:.3f}" for d, s in scores.items()))
    assert ok


def test_compaction_matches_zeroed_network(teacher, criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    nested = True
    for i in range(20):
        net = teacher if i == 0 else build_teacher(seed=100 + i)
        if i:
            for gid in net.scale_groups:
                net.scale(gid).data = rng.uniform(-0.4, 0.4, net.group_channels(gid))
        worst = max(worst, zero_then_compare(net, threshold_prune(net, rng.uniform(0.01, 0.3)), seed=i))
        sets = [threshold_prune(net, t).keep_set() for t in (0.01, 0.05, 0.1, 0.2)]
        nested &= all(b <= a for a, b in zip(sets, sets[1:]))
    ok = worst <= 1e-9 and nested
    criterion("7", "pruning exact equivalence and nesting", ok, f"max |diff| {worst:.2e}, nested={nested}")
    assert ok


def test_plain_data_free_pipeline(teacher, criterion):
    t0 = time.perf_counter()
    proto = TrainProtocol(rounds=2000, eval_every=250)
    res = train_data_free(teacher, proto)
    base = untrained_agreement(teacher, proto)
    elapsed = time.perf_counter() - t0
    agree = res.final["agreement"]
    ok = teacher.accuracy >= 0.95 and agree >= MIN_AGREEMENT and agree - base >= MIN_LIFT and elapsed < 900
    criterion("8", "data-free distillation", ok,
              f"teacher {teacher.accuracy:.3f}, student {agree:.3f}, untrained {base:.3f}, {elapsed:.0f}s")
    assert ok


def test_lottery_mechanics(teacher, criterion, monkeypatch):
    violations = []
    real_step = optim.Adam.step

    def checked(self, net, sign=1.0, masks=None):
        real_step(self, net, sign, masks)
        for pid, m in (masks or {}).items():
            if np.any(net.params[pid].data[m == 0] != 0.0):
                violations.append(pid)

    monkeypatch.setattr(optim.Adam, "step", checked)
    ticket, _ = lottery_search("supervised", p=0.2, n_rounds=3, K=150, seed=0)
    expected = 0.8 ** 3 * ticket.total()
    density_ok = ticket.rounds == 3 and abs(ticket.kept() - expected) <= 3
    cmp = paired_comparison(ticket, seeds=range(5), setting="data_free", K=40, teacher=teacher,
                            protocol=TrainProtocol(), probe_size=1000)
    ok = density_ok and not violations and len(cmp["rows"]) == 5 and np.isfinite(cmp["mean_diff"])
    criterion("10", "lottery mechanics", ok,
              f"density {ticket.density():.4f} (target 0.512), masked-weight violations {len(violations)}, "
              f"ticket - random = {cmp['mean_diff']:+.3f} +/- {cmp['std_diff']:.3f} over 5 seeds")
    assert ok


def test_runs_and_checkpoints_are_reproducible(teacher, teacher_ckpt, tmp_path, rng, criterion):
    args = ["quantize", "--teacher", teacher_ckpt, "--rounds", "20", "--eval-every", "5", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    same_metrics = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    back = checkpoint.load(teacher_ckpt)
    bit_exact = all(back.params[p].data.tobytes() == t.data.tobytes() for p, t in teacher.params.items())
    bit_exact &= checkpoint.dumps(back) == checkpoint.dumps(teacher)

    small = compact_network(teacher, threshold_prune(teacher, 0.3))
    path = tmp_path / "small.ckpt"
    checkpoint.save(small, path)
    x = rng.normal(size=(16, 1, 8, 8))
    same_out = np.array_equal(forward(checkpoint.load(path), x)[0].data, forward(small, x)[0].data)
    ok = same_metrics and bit_exact and same_out
    criterion("11", "determinism and persistence", ok,
              f"metrics identical={same_metrics}, checkpoint bit-exact={bit_exact}, compacted outputs identical={same_out}")
    assert ok


def test_divergence_sweep_records_entropy(teacher_ckpt, tmp_path, criterion):
    out = tmp_path / "div"
    code = main(["sweep", "--param", "divergence", "--values", "KL,JS_symmetric", "--command", "plain",
                 "--teacher", teacher_ckpt, "--rounds", "100", "--eval-every", "50", "--out", str(out)])
    means = {}
    ok = code == 0
    for arm in ("KL", "JS_symmetric"):
        recs = [json.loads(l) for l in (out / "arms" / f"divergence_{arm}" / "metrics.jsonl").read_text().splitlines()]
        ent = [r["entropy"] for r in recs]
        ok &= len(ent) == 100 and [r["round"] for r in recs] == list(range(1, 101))
        ok &= all(np.isfinite(e) and 0.0 <= e <= np.log(10) + 1e-9 for e in ent)
        means[arm] = float(np.mean(ent))
    order = "KL > JS" if means["KL"] > means["JS_symmetric"] else "KL <= JS"
    criterion("12", "entropy recorded per round for KL and JS", ok,
              f"mean entropy KL {means['KL']:.3f}, JS {means['JS_symmetric']:.3f} ({order}, informational)")
    assert ok
