"""Command-line front end.

Exit codes: 0 ok, 1 configuration error, 2 runtime failure, 3 a verification check failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import checkpoint, config as cfgmod, theory
from .config import ConfigError
from .lottery import LotteryStop, lottery_search, paired_comparison
from .pruner import count_params_flops, prune_report
from .theory import TheoryError
from .trainer import TrainingError, pretrain_teacher, train_data_free, untrained_agreement

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

# CLI flag -> config key
FLAG_KEYS = {
    "seed": "seed", "delta": "delta", "lambda": "lam", "gamma": "gamma", "ts": "t_s",
    "divergence": "divergence", "rounds": "rounds", "warmup": "warm_up_rounds", "jobs": "jobs",
    "out": "out", "teacher": "teacher", "beta": "beta", "batch": "batch", "width": "student_width",
    "eval_every": "eval_every", "teacher_steps": "teacher_steps", "suite": "suite",
    "param": "sweep_param", "values": "sweep_values", "command": "sweep_command",
    "setting": "lottery_setting", "eval_setting": "lottery_eval_setting", "p": "lottery_p",
    "lottery_rounds": "lottery_rounds", "iterations": "lottery_iterations",
    "eval_iterations": "lottery_eval_iterations", "lottery_seeds": "lottery_seeds",
    "theory_iterations": "theory_iterations",
}


def _common(p):
    p.add_argument("--config", help="flat key=value or JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${cfgmod.OUT_ENV}/<command>)")
    p.add_argument("--jobs", type=int)


def _training(p):
    p.add_argument("--teacher", help="teacher checkpoint path")
    p.add_argument("--rounds", type=int)
    p.add_argument("--warmup", type=int, help="rounds of linear gamma/lambda warm-up")
    p.add_argument("--divergence", choices=["KL", "JS_symmetric"])
    p.add_argument("--delta", type=float)
    p.add_argument("--lambda", type=float, dest="lambda")
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--ts", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--width", choices=["half", "full"])
    p.add_argument("--eval-every", type=int, dest="eval_every")


def build_parser():
    parser = argparse.ArgumentParser(prog="dfcompress", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("pretrain", help="train the toy teacher")
    _common(p)
    p.add_argument("--teacher-steps", type=int, dest="teacher_steps")
    for name, text in (("quantize", "data-free binary student"), ("prune", "data-free filter pruning"),
                       ("plain", "data-free distillation without compression")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _training(p)
    p = sub.add_parser("lottery", help="ticket search and ticket-vs-random comparison")
    _common(p)
    _training(p)
    p.add_argument("--setting", choices=["supervised", "data_free"])
    p.add_argument("--eval-setting", choices=["supervised", "data_free"], dest="eval_setting")
    p.add_argument("--p", type=float, help="fraction of surviving conv weights pruned per round")
    p.add_argument("--lottery-rounds", type=int, dest="lottery_rounds")
    p.add_argument("--iterations", type=int, help="training iterations per search round")
    p.add_argument("--eval-iterations", type=int, dest="eval_iterations")
    p.add_argument("--lottery-seeds", type=int, dest="lottery_seeds")
    p = sub.add_parser("theory", help="rate checks on analytic saddle problems")
    _common(p)
    p.add_argument("--suite", choices=list(cfgmod.SUITES))
    p.add_argument("--theory-iterations", type=int, dest="theory_iterations")
    p = sub.add_parser("sweep", help="one run per value of a parameter")
    _common(p)
    _training(p)
    p.add_argument("--param", choices=sorted(cfgmod.SWEEP_PARAMS))
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--command", choices=["quantize", "prune", "plain"], help="what each arm runs")
    return parser


def resolve_config(args):
    base = cfgmod.load(args.config) if args.config else None
    overrides = {"command": args.cmd}
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val.strip()
    return cfgmod.from_mapping(overrides, base)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

class RunDir:
    """Everything a run writes goes through here, below one directory."""

    def __init__(self, root):
        self.root = os.path.abspath(root)
        os.makedirs(os.path.join(self.root, "checkpoints"), exist_ok=True)
        self._metrics = open(self.path("metrics.jsonl"), "w")

    def path(self, *parts):
        p = os.path.abspath(os.path.join(self.root, *parts))
        if os.path.commonpath([p, self.root]) != self.root:
            raise ValueError(f"{p} is outside the run directory")
        return p

    def metric(self, record):
        self._metrics.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
        self._metrics.flush()

    def text(self, name, content):
        with open(self.path(name), "w") as fh:
            fh.write(content)

    def table(self, name, rows, header):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)

    def close(self):
        self._metrics.close()


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _load_teacher(cfg):
    if not cfg.teacher:
        raise ConfigError("this command needs a teacher checkpoint (--teacher); create one with 'pretrain'")
    if not os.path.exists(cfg.teacher):
        raise ConfigError(f"teacher checkpoint not found: {cfg.teacher}")
    teacher = checkpoint.load(cfg.teacher)
    teacher.set_requires_grad(False)
    return teacher


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg, run):
    teacher, acc = pretrain_teacher(cfg.seed, steps=cfg.teacher_steps)
    checkpoint.save(teacher, run.path("checkpoints", "teacher.ckpt"))
    params, macs = count_params_flops(teacher)
    run.metric({"round": cfg.teacher_steps, "accuracy": acc, "params": params, "flops": 2 * macs})
    run.table("report.csv", [{"accuracy": acc, "params": params, "flops": 2 * macs}],
              ["accuracy", "params", "flops"])
    return EXIT_OK


def cmd_train(cfg, run, mode=None):
    teacher = _load_teacher(cfg)
    protocol = cfg.protocol(mode)
    result = train_data_free(teacher, protocol, sink=run.metric)
    name = f"student_{protocol.mode}.ckpt"
    if protocol.mode == "quantize":
        checkpoint.save(result.student, run.path("checkpoints", name), result.binary_ids, protocol.delta)
    else:
        checkpoint.save(result.student, run.path("checkpoints", name))
    if result.decision is not None:
        run.text("prune_report.json", prune_report(result.dense_student, result.decision) + "\n")
    row = {"mode": protocol.mode, **result.final,
           "baseline_agreement": untrained_agreement(teacher, protocol)}
    run.table("report.csv", [row], ["mode", "agreement", "baseline_agreement", "params", "flops",
                                    "entropy", "rounds"])
    return row


def cmd_lottery(cfg, run):
    needs_teacher = "data_free" in (cfg.lottery_setting, cfg.lottery_eval_setting)
    teacher = _load_teacher(cfg) if needs_teacher else None
    protocol = cfg.protocol("plain")
    ticket, _ = lottery_search(cfg.lottery_setting, cfg.lottery_p, cfg.lottery_rounds,
                               cfg.lottery_iterations, cfg.seed, teacher, protocol, cfg.student_width)
    for r, dens in enumerate(ticket.history):
        run.metric({"phase": "search", "round": r, "density": dens})
    if ticket.stopped:
        run.metric({"phase": "search", "stopped": ticket.stopped})
    np.savez(run.path("checkpoints", "ticket.npz"),
             **{f"mask/{k}": v for k, v in ticket.masks.items()},
             **{f"init/{k}": v for k, v in ticket.init.items()})
    seeds = [cfg.seed + i for i in range(cfg.lottery_seeds)]
    cmp = paired_comparison(ticket, seeds, cfg.lottery_eval_setting, cfg.lottery_eval_iterations,
                            teacher, protocol, cfg.probe_size)
    for row in cmp["rows"]:
        run.metric({"phase": "evaluate", **row})
    run.metric({"phase": "summary", "mean_diff": cmp["mean_diff"], "std_diff": cmp["std_diff"],
                "density": cmp["density"]})
    run.table("report.csv", cmp["rows"] + [{"seed": "mean", "diff": cmp["mean_diff"]}],
              ["seed", "ticket", "random", "diff"])
    return EXIT_OK


def theory_reports(suite, iterations):
    """(name, RateReport) pairs plus (name, passed, detail) rows for non-series checks."""
    reports, rows = [], []
    if suite in ("theorem1", "all"):
        exact, quant = theory.gda_rate_check(K=iterations)
        reports += [("gda_exact", exact), ("gda_quantized", quant)]
    if suite in ("theorem2", "all"):
        reports.append(("pl_gda", theory.pl_rate_check()))
    if suite in ("contraction", "all"):
        reports += [(f"contraction_{i}", r) for i, r in enumerate(theory.contraction_suite())]
    if suite in ("lemma1", "all"):
        for d in (1, 10, 100, 10_000):
            for mode in ("grid", "sign"):
                bad = theory.quantization_error_violations(d, mode=mode)
                rows.append((f"quant_error_{mode}_d{d}", bad == 0, f"violations={bad}"))
    if suite in ("pl_checks", "all"):
        for prob in (theory.pl_quadratic(), theory.pl_quadratic(2.0, 3.0, 1.0, d=3), theory.pl_nonconvex()):
            bad = theory.pl_violations(prob)
            rows.append((f"pl_spot_{prob.name}", bad == 0, f"violations={bad}"))
    return reports, rows


def cmd_theory(cfg, run):
    reports, rows = theory_reports(cfg.suite, cfg.theory_iterations)
    table = []
    for name, rep in reports:
        stride = max(1, len(rep.k) // 2000)
        run.text(f"{name}.csv", rep.to_csv(stride))
        for check, ok in rep.checks.items():
            table.append({"name": name, "check": check, "passed": ok, "detail": ""})
        for key, fit in rep.fits.items():
            table.append({"name": name, "check": f"fit_{key}", "passed": "", "detail": f"rate={fit.rate:.6g}"})
        run.metric({"name": name, "checks": rep.checks,
                    "info": {k: v for k, v in rep.info.items() if np.isscalar(v)}})
        print(rep.summary())
    for name, ok, detail in rows:
        table.append({"name": name, "check": "zero_violations", "passed": ok, "detail": detail})
        run.metric({"name": name, "checks": {"zero_violations": ok}, "detail": detail})
        print(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
    run.table("report.csv", table, ["name", "check", "passed", "detail"])
    failed = [r for r in table if r["passed"] is False]
    return EXIT_CHECK if failed else EXIT_OK


def _run_arm(arm_cfg):
    run = RunDir(arm_cfg.out)
    try:
        run.text("config.snapshot", cfgmod.dumps(arm_cfg))
        return {"status": "ok", **cmd_train(arm_cfg, run)}
    except (TrainingError, ConfigError, FloatingPointError, ValueError) as err:
        run.metric({"error": str(err)})
        return {"status": f"failed: {err}"}
    finally:
        run.close()


def cmd_sweep(cfg, run):
    _load_teacher(cfg)  # fail fast before spawning arms
    values = cfg.sweep_list()
    arms = []
    for v in values:
        tag = f"{cfg.sweep_param}_{v}"
        arms.append(replace(cfg.arm(v), out=run.path("arms", tag)))
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_arm, arms))
    else:
        results = [_run_arm(a) for a in arms]
    rows = []
    for v, res in zip(values, results):
        rows.append({"value": v, **{k: res.get(k) for k in ("params", "flops", "agreement", "entropy")},
                     "status": res["status"], "flag": ""})
        run.metric({"value": v, **res})
    if cfg.sweep_param == "lambda":
        ordered = sorted((r for r in rows if r["params"] is not None), key=lambda r: r["value"])
        for prev, cur in zip(ordered, ordered[1:]):
            if cur["params"] > prev["params"]:
                cur["flag"] = "params increased with lambda"
    run.table("report.csv", rows, ["value", "params", "flops", "agreement", "entropy", "status", "flag"])
    return EXIT_RUNTIME if any(r["status"] != "ok" for r in rows) else EXIT_OK


def run(cfg):
    """Execute one resolved config; returns an exit code."""
    out = cfg.resolved_out()
    rd = RunDir(out)
    try:
        rd.text("config.snapshot", cfgmod.dumps(cfg))
        if cfg.command == "pretrain":
            return cmd_pretrain(cfg, rd)
        if cfg.command in ("quantize", "prune", "plain"):
            cmd_train(cfg, rd)
            return EXIT_OK
        if cfg.command == "lottery":
            return cmd_lottery(cfg, rd)
        if cfg.command == "theory":
            return cmd_theory(cfg, rd)
        return cmd_sweep(cfg, rd)
    finally:
        rd.close()


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code = run(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, TheoryError, LotteryStop, FloatingPointError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"outputs in {cfg.resolved_out()}")
    return code


if __name__ == "__main__":
    sys.exit(main())
