"""Command-line entry point: ``neibo run|worker|bench|report|best``.

Exit codes are 0 on success, 1 on a usage error and 2 when the run itself
fails.  Seeds come only from ``--seed``/``--seeds`` or the config file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> list[int]:
    """``"0,1,5"`` or ``"0-19"`` (inclusive) or a mix of both."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            lo, sep, hi = part.partition("-")
            if sep and lo:
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise UsageError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise UsageError("no seeds given")
    return seeds


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise UsageError(f"expected host:port, got {text!r}")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neibo", description="Constrained Bayesian optimization with noisy EI.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="start or resume an optimization run")
    r.add_argument("--config", required=True, help="run config (INI)")
    r.add_argument("--resume", action="store_true", help="continue from the history file")
    r.add_argument("--seed", type=int, help="master seed (overrides the config)")
    r.add_argument("--budget", type=int, help="completed-trial budget (overrides the config)")
    r.add_argument("--workers", help="inline[:n], threads[:n] or socket:host:port")

    w = sub.add_parser("worker", help="evaluate trials for a coordinator")
    w.add_argument("--connect", required=True, metavar="HOST:PORT")
    w.add_argument("--id", dest="worker_id", help="worker name reported to the coordinator")
    w.add_argument("--heartbeat", type=float, default=5.0, help="seconds between heartbeats")

    b = sub.add_parser("bench", help="BO versus random search over several seeds")
    b.add_argument("--suite", required=True, help="suite file or shipped suite name")
    b.add_argument("--seeds", required=True, help="e.g. 0-19 or 1,2,3,4,5")
    b.add_argument("--out", default="bench_out", help="output directory")
    b.add_argument("--no-plots", action="store_true")

    rep = sub.add_parser("report", help="convergence trace of a run history")
    rep.add_argument("--history", required=True)
    rep.add_argument("--out", help="directory for trace.csv, summary.json and a figure")
    rep.add_argument("--no-plots", action="store_true")

    be = sub.add_parser("best", help="best feasible trial of a run history")
    be.add_argument("--history", required=True)
    return p


# ---------------------------------------------------------------------------
# verbs


def cmd_run(args) -> int:
    from .orchestrator import best_feasible_trial, load_run_config, run_loop

    if not Path(args.config).exists():
        raise UsageError(f"no such config file: {args.config}")
    cfg = load_run_config(args.config, master_seed=args.seed, budget=args.budget, workers=args.workers)
    history = run_loop(cfg, resume=args.resume)
    done = sum(t.state == "completed" for t in history)
    failed = sum(t.state == "failed" for t in history)
    print(f"completed\t{done}\nfailed\t{failed}")
    _print_best(best_feasible_trial(history))
    return EXIT_OK


def cmd_worker(args) -> int:
    from .workers import run_worker

    host, port = parse_address(args.connect)
    n = run_worker(host, port, worker_id=args.worker_id, heartbeat_interval=args.heartbeat)
    print(f"evaluated\t{n}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_benchmark

    seeds = parse_seeds(args.seeds)
    if len(seeds) < 5:
        raise UsageError("bench needs at least 5 seeds")
    report = run_benchmark(args.suite, seeds)
    files = report.write(args.out, plots=not args.no_plots)
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(["method", "seed", "final_best"])
    for m in report.runs:
        for seed, v in zip(report.seeds, report.final(m)):
            w.writerow([m, seed, repr(float(v))])
    print(f"wilcoxon_p\t{report.wilcoxon_p!r}")
    for f in files:
        print(f"wrote\t{f}")
    return EXIT_OK


def _load(path):
    from .orchestrator import load_history

    if not Path(path).exists():
        raise UsageError(f"no such history file: {path}")
    return load_history(path)


def cmd_report(args) -> int:
    from .bench import history_trace

    history = _load(args.history)
    done = sorted(
        (t for t in history if t.state == "completed"),
        key=lambda t: (t.completed_at if t.completed_at is not None else 0.0, t.trial_id),
    )
    best = history_trace(history)
    rows = []
    for (i, b), t in zip(best, done):
        y = t.observation.y if t.observation.feasible else None
        rows.append((i, t.trial_id, y, b))

    header = ["index", "trial_id", "observed", "best_so_far"]
    cells = [["" if v is None else repr(v) for v in row] for row in rows]
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(cells)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trace.csv", "w", newline="") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            cw.writerow(header)
            cw.writerows(cells)
        summary = {
            "trials": len(history),
            "completed": len(done),
            "failed": sum(t.state == "failed" for t in history),
            "best_so_far": rows[-1][3] if rows else None,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if not args.no_plots:
            from .plotting import plot_history

            plot_history([(r[0], r[2], r[3]) for r in rows], out / "trace.png", title=Path(args.history).name)
    return EXIT_OK


def _print_best(t):
    if t is None:
        print("best\tnone")
        return
    print(f"best_trial\t{t.trial_id}\nbest_y\t{t.observation.y!r}\nbest_c\t{t.observation.c!r}")
    print("best_candidate\t" + json.dumps(t.candidate, sort_keys=True))


def cmd_best(args) -> int:
    from .orchestrator import best_feasible_trial

    _print_best(best_feasible_trial(_load(args.history)))
    return EXIT_OK


VERBS = {"run": cmd_run, "worker": cmd_worker, "bench": cmd_bench, "report": cmd_report, "best": cmd_best}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return VERBS[args.verb](args)
    except UsageError as exc:
        print(f"neibo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"neibo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
