"""Command-line entry point.

    feelsim run <config.ini> --out <dir> [--seed S] [--max-rounds R] [--jsonl]
    feelsim compare <config.ini> --out <dir> [--seed S] [--max-rounds R]
    feelsim verify <suite> [--seed S] [--trials T]

Exit codes: 0 success, 1 verification failure, 2 invalid configuration,
3 runtime contract violation. ``FEELSIM_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .core import ContractViolation
from .orchestrator import RoundReport, Simulation
from .verify import SUITES, run_suite

log = logging.getLogger("feelsim")

CSV_FIELDS = ("round", "loss", "accuracy", "n_scheduled", "u_round", "blocks_cum", "power_spent_max")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class MetricsWriter:
    """Append-only per-round metrics file.

    The first line is ``# config_sha256=<digest>``; CSV output follows with
    a header row, JSON-lines output with one object per round.
    """

    def __init__(self, path: Path, digest: str, jsonl: bool = False, extra: dict | None = None):
        self.path = Path(path)
        self.jsonl = jsonl
        self.extra = extra or {}
        self.last_round = {}
        self.fh = open(self.path, "w", newline="")
        self.fh.write(f"# config_sha256={digest}\n")
        self.writer = None
        if not jsonl:
            self.writer = csv.writer(self.fh, lineterminator="\n")
            self.writer.writerow([*self.extra, *CSV_FIELDS])

    def write(self, rep: RoundReport) -> None:
        key = tuple(self.extra.values())
        if rep.round <= self.last_round.get(key, 0):
            raise ContractViolation(f"round {rep.round} written out of order")
        self.last_round[key] = rep.round
        if self.jsonl:
            self.fh.write(json.dumps({**self.extra, **dataclasses.asdict(rep)}) + "\n")
        else:
            self.writer.writerow([*self.extra.values(), *(_cell(getattr(rep, f)) for f in CSV_FIELDS)])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _cell(v):
    return repr(float(v)) if isinstance(v, float) else v


def _write_manifest(path: Path, cfg: RunConfig, outputs: dict, started: str, finished=None, extra=None):
    manifest = {
        "version": __version__,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "started": started,
        "finished": finished,
        "outputs": outputs,
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def summarize(reports: list[RoundReport]) -> dict:
    last = reports[-1] if reports else None
    active = [r.n_scheduled for r in reports if not r.skipped]
    return {
        "rounds": len(reports),
        "skipped_rounds": sum(r.skipped for r in reports),
        "slots": last.slots_cum if last else 0,
        "blocks": last.blocks_cum if last else 0,
        "final_accuracy": last.accuracy if last else None,
        "final_loss": last.loss if last else None,
        "mean_scheduled": float(np.mean(active)) if active else 0.0,
    }


def accuracy_at_budget(reports: list[RoundReport], blocks: int) -> float | None:
    """Test accuracy of the last round that fits within ``blocks`` resource blocks."""
    ok = [r for r in reports if r.blocks_cum <= blocks]
    return ok[-1].accuracy if ok else None


def _load(args) -> RunConfig:
    return load_config(args.config, seed=args.seed, max_rounds=args.max_rounds)


def cmd_run(args) -> int:
    cfg = _load(args)
    if cfg.algorithm != "tcs_h" and cfg.n_scheduled_digital == 0:
        raise ConfigError("n_scheduled_digital", "must be >= 1 when running a digital baseline alone")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / ("metrics.jsonl" if args.jsonl else "metrics.csv")
    outputs = {"config": "config.ini", "metrics": metrics.name, "summary": "summary.json"}
    started = _now()
    (out / "config.ini").write_text(dump_config(cfg))
    _write_manifest(out / "manifest.json", cfg, outputs, started)

    sim = Simulation(cfg)
    writer = MetricsWriter(metrics, cfg.digest(), jsonl=args.jsonl)
    try:
        sim.run(on_round=writer.write)
    finally:
        writer.close()
    summary = {"algorithm": cfg.algorithm, **summarize(sim.reports)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_manifest(out / "manifest.json", cfg, outputs, started, _now())
    print(json.dumps(summary))
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"config": "config.ini", "metrics": "compare_metrics.csv", "summary": "compare_summary.csv"}
    started = _now()
    (out / "config.ini").write_text(dump_config(cfg))
    _write_manifest(out / "manifest.json", cfg, outputs, started)

    results: dict[str, list[RoundReport]] = {}
    writer = MetricsWriter(out / "compare_metrics.csv", cfg.digest(), extra={"algorithm": ""})
    try:
        hybrid = Simulation(cfg.replace(algorithm="tcs_h"))
        k = cfg.n_scheduled_digital
        data = (hybrid.shards, hybrid.test)
        for alg in ("tcs_h", "tcs_d", "top_k"):
            if alg == "tcs_h":
                sim = hybrid
            else:
                if k == 0:
                    k = max(1, int(round(summarize(results["tcs_h"])["mean_scheduled"])))
                    log.info("digital baselines schedule %d devices per round", k)
                sim = Simulation(cfg.replace(algorithm=alg, n_scheduled_digital=k), data=data)
            writer.extra = {"algorithm": alg}
            results[alg] = sim.run(on_round=writer.write)
    finally:
        writer.close()

    budgets = sorted({summarize(r)["blocks"] for r in results.values()})
    rows = []
    for alg, reps in results.items():
        s = summarize(reps)
        row = {"algorithm": alg, "rounds": s["rounds"], "blocks": s["blocks"],
               "final_accuracy": s["final_accuracy"], "mean_scheduled": s["mean_scheduled"]}
        for b in budgets:
            row[f"acc_at_{b}"] = accuracy_at_budget(reps, b)
        rows.append(row)
    with open(out / "compare_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_manifest(out / "manifest.json", cfg, outputs, started, _now(),
                    {"n_scheduled_digital_used": k})

    print(f"{'algorithm':<8} {'rounds':>7} {'blocks':>10} {'final_acc':>9}  "
          + "  ".join(f"acc@{b}" for b in budgets))
    for r in rows:
        accs = "  ".join(
            f"{r[f'acc_at_{b}']:.4f}" if r[f"acc_at_{b}"] is not None else "   -  " for b in budgets
        )
        print(f"{r['algorithm']:<8} {r['rounds']:>7} {r['blocks']:>10} {r['final_accuracy']:>9.4f}  {accs}")
    return 0


def cmd_verify(args) -> int:
    checks = run_suite(args.suite, seed=args.seed or 0, trials=args.trials)
    failed = False
    for c in checks:
        print(c.line())
        if not c.passed:
            failed = True
            print("counterexample: " + json.dumps(c.counterexample))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feelsim", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("compare", cmd_compare)):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--max-rounds", type=int)
        if name == "run":
            sp.add_argument("--jsonl", action="store_true", help="write JSON lines instead of CSV")
        sp.set_defaults(func=fn)
    sp = sub.add_parser("verify")
    sp.add_argument("suite", choices=sorted(SUITES))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trials", type=int)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FEELSIM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
