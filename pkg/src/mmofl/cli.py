"""Command line: ``mmofl run|sweep|validate|oracle``.

Exit status is 0 on success; otherwise a single ``error: <kind>: <message>``
line goes to stderr and the status is 1 (bad input) or 2 (usage).
"""
from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, ExperimentConfig, parse_config


def _read_config(arg: str) -> ExperimentConfig:
    if arg.startswith("preset:"):
        name = arg.split(":", 1)[1]
        text = resources.files("mmofl.presets").joinpath(name).read_text(encoding="utf-8")
    else:
        text = Path(arg).read_text(encoding="utf-8")
    return parse_config(text)


def _cmd_run(args) -> int:
    from .experiment import run_experiment
    cfg = _read_config(args.config)
    seeds = [args.seed] if args.seed is not None else None
    agg = run_experiment(cfg, args.out or cfg.run.out, seeds=seeds)
    print(f"{agg['strategy']} seeds={len(agg['seeds'])} final_acc={agg['final_acc']['mean']:.4f} "
          f"last10_acc={agg['mean_last10_acc']['mean']:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    from .experiment import parse_values, run_sweep
    cfg = _read_config(args.config)
    rows = run_sweep(cfg, args.axis, parse_values(args.values), args.out or cfg.run.out)
    for r in rows:
        print(f"{args.axis}={r['axis_value']} {r['strategy']} final_acc={float(r['mean_final_acc']):.4f} "
              f"+/- {float(r['std_final_acc']):.4f}")
    return 0


def _cmd_validate(args) -> int:
    cfg = _read_config(args.config)
    print(f"ok: {cfg.strategy.kind} K={cfg.data.K} M={cfg.data.M} C={cfg.data.C} T={cfg.run.T} "
          f"seeds={len(cfg.run.seed_list)}")
    return 0


def _cmd_oracle(args) -> int:
    from .oracle import run_all
    rows = run_all(quick=args.quick)
    width = max(len(name) for name, _, _ in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    return 0 if all(ok for _, ok, _ in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmofl", description="Multimodal online federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment over the configured seeds")
    r.add_argument("--config", required=True, help="config file, or preset:<name>")
    r.add_argument("--seed", type=int, help="run only this seed")
    r.add_argument("--out", help="output directory (default: run.out)")
    r.set_defaults(fn=_cmd_run)

    s = sub.add_parser("sweep", help="one experiment per value of a config key")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, help="section.key to vary")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_sweep)

    v = sub.add_parser("validate", help="parse and check a config without running it")
    v.add_argument("--config", required=True)
    v.set_defaults(fn=_cmd_validate)

    o = sub.add_parser("oracle", help="run the brute-force and finite-difference checks")
    o.add_argument("--quick", action="store_true", help="smaller sample counts")
    o.set_defaults(fn=_cmd_oracle)
    return p


def _one_line(e: BaseException) -> str:
    return " ".join(str(e).split()) or type(e).__name__


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: config: {_one_line(e)}", file=sys.stderr)
    except (OSError, UnicodeDecodeError) as e:
        print(f"error: io: {_one_line(e)}", file=sys.stderr)
    except ValueError as e:
        print(f"error: value: {_one_line(e)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
