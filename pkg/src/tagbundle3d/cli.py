"""Command line: ``run``, ``compare`` and ``replay``.

Exit status is 0 on success and 2 on a configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .estimation import FilterWindow, estimate_bundle, estimate_leader_only, log_row, write_estimate_log
from .experiment import ExperimentConfig, Report, compare, compare_table, run
from .geometry import to_planar, wrap_deg
from .simulator import load_detections
from .swarm import ConfigError

EXIT_CONFIG = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tagbundle3d", description="Tag-bundle pose estimation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--seed", type=int)
    r.add_argument("--episodes", type=int)
    r.add_argument("--workers", type=int, help="process pool size (results do not depend on it)")

    c = sub.add_parser("compare", help="delta table between two reports")
    c.add_argument("report_a", type=Path)
    c.add_argument("report_b", type=Path)
    c.add_argument("--json", action="store_true", help="print the deltas as JSON")

    rp = sub.add_parser("replay", help="re-run estimation on a dumped detection stream")
    rp.add_argument("--detections", required=True, type=Path)
    rp.add_argument("--estimator", choices=("classic_single", "bundle3d"), default="bundle3d")
    rp.add_argument("--log", type=Path, help="write the per-frame estimate CSV here")
    return p


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    overrides = {k: getattr(args, k) for k in ("seed", "episodes", "workers") if getattr(args, k) is not None}
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    run(cfg, args.out)
    sys.stdout.write((args.out / "table.txt").read_text())
    print(f"wrote {args.out / 'report.json'}")
    return 0


def cmd_compare(args) -> int:
    a, b = Report.load(args.report_a), Report.load(args.report_b)
    if args.json:
        print(json.dumps(compare(a, b), indent=2, sort_keys=True))
    else:
        sys.stdout.write(compare_table(a, b))
    return 0


def cmd_replay(args) -> int:
    try:
        bundle, k, frames = load_detections(args.detections)
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot read detections: {e}") from None
    win = FilterWindow()
    rows, errors = [], []
    for f in frames:
        if args.estimator == "classic_single":
            est = estimate_leader_only(f.detections, bundle, k)
        else:
            est = estimate_bundle(f.detections, bundle, k, win)
        rows.append(log_row(f.frame_index, est))
        if est is not None and f.truth is not None:
            errors.append(wrap_deg(to_planar(est.pose).psi - to_planar(f.truth).psi))
    if args.log:
        write_estimate_log(args.log, rows)
    n = len(rows)
    hit = sum(r["n_tags"] > 0 for r in rows)
    summary = {"frames": n, "detection_pct": round(100.0 * hit / n, 6) if n else 0.0}
    if errors:
        e = np.asarray(errors)
        summary["yaw_rmse_deg"] = round(float(np.sqrt(np.mean(e**2))), 6)
        summary["yaw_max_abs_deg"] = round(float(np.max(np.abs(e))), 6)
    print(json.dumps(summary, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "compare": cmd_compare, "replay": cmd_replay}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"tagbundle3d: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
