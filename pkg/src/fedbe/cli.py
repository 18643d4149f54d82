"""Command line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from . import harness
from .config import ExperimentConfig
from .datagen import gen_task, label_histogram, task_pair
from .errors import ConfigurationError, FedBEError
from .federation import build_clients, plan_expansion, prepare, run_experiment
from .seeding import int_seed

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOL = 1e-6


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedbe", description="Federated fine-tuning with block expansion on synthetic tasks.")
    p.add_argument("--seed", type=int, default=None, help="override the config's root seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one method and write metrics, summary and charts")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--method", default=None, help="override config.method")

    sel = sub.add_parser("select-layers", help="print the expansion plan as JSON")
    sel.add_argument("--config", required=True)

    part = sub.add_parser("partition", help="print per-client downstream label histograms")
    part.add_argument("--config", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    gc.add_argument("--tol", type=float, default=GRADCHECK_TOL)

    fg = sub.add_parser("forgetting", help="pretrain once, compare methods, write reports")
    fg.add_argument("--config", required=True)
    fg.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="re-render charts from a metrics.csv directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    return p


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    if args.method is not None:
        cfg = cfg.replace(method=args.method)
    series = run_experiment(cfg)
    for path in harness.emit_report(series, args.out):
        print(path)
    return EXIT_OK


def _cmd_select_layers(args) -> int:
    cfg = _load(args)
    plan, profile = plan_expansion(cfg, prepare(cfg), "fedbe")
    out = plan.to_json()
    out["gradient_profile"] = profile
    print(json.dumps(out))
    return EXIT_OK


def _cmd_partition(args) -> int:
    cfg = _load(args)
    s = cfg.model
    _, d_spec = task_pair(s.V, s.T_max, s.K, cfg.tasks.m, cfg.tasks.p, noise_pool=cfg.tasks.noise_pool)
    data = gen_task(d_spec, cfg.tasks.n_downstream, int_seed(cfg.seed, "data.D"))
    clients = build_clients(cfg, data.train)
    print(json.dumps({str(c.id): label_histogram(c.state.shard, s.K).tolist() for c in clients}))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = harness.gradient_check_suite(seed=args.seed or 0)
    for name, err in results:
        print(f"{name:<40s} max rel err {err:.3e}")
    worst = max(err for _, err in results)
    print(f"max error {worst:.3e} ({'ok' if worst < args.tol else 'FAIL'}, tol {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_RUNTIME


def _cmd_forgetting(args) -> int:
    cfg = _load(args)
    results = harness.forgetting_experiment(cfg)
    harness.emit_comparison(results, args.out)
    for method, s in results.items():
        line = f"{method:<18s} final {s.final_accuracy:.4f}  forgetting {s.forgetting:.4f}"
        if s.forgetting_expanded is not None:
            line += f"  (expanded active {s.forgetting_expanded:.4f})"
        print(line)
    return EXIT_OK


def _cmd_report(args) -> int:
    for path in harness.report_from_dir(args.in_dir):
        print(path)
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "select-layers": _cmd_select_layers,
    "partition": _cmd_partition,
    "gradcheck": _cmd_gradcheck,
    "forgetting": _cmd_forgetting,
    "report": _cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedBEError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
