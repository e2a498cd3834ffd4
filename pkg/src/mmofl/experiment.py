"""Experiment and sweep runners that turn configs into files on disk.

Everything written under the output directory is a function of the config
text and the seed list; timings only go to the log.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, _split_key
from .federation import CSV_COLUMNS, Federation, metrics_rows

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("axis_value", "strategy", "mean_final_acc", "std_final_acc", "mean_last10_acc", "seeds")


def ensure_writable(out: str | os.PathLike) -> Path:
    """Create ``out`` and prove it is writable, before any compute starts."""
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path, prefix=".probe-"):
            pass
    except OSError as e:
        raise OSError(f"output directory not writable: {path}: {e.strerror or e}") from None
    return path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def csv_text(rows: list[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_manifest(root: Path) -> Path:
    entries = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith(".probe-"):
            entries.append({"path": p.relative_to(root).as_posix(),
                            "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                            "bytes": p.stat().st_size})
    out = root / "manifest.json"
    _write(out, _dump({"artifacts": entries}))
    return out


def run_seed(cfg: ExperimentConfig, seed: int) -> tuple[Federation, dict]:
    t0 = time.perf_counter()
    fed = Federation(cfg, seed=seed)
    fed.run()
    if cfg.run.regret:
        fed.hindsight()
    log.info("seed %d: %d rounds in %.1fs", seed, len(fed.metrics), time.perf_counter() - t0)
    accs = [m.test_accuracy for m in fed.metrics]
    summary = {
        "strategy": cfg.strategy.kind,
        "seed": seed,
        "rounds": len(fed.metrics),
        "final_acc": accs[-1],
        "mean_last10_acc": float(np.mean(accs[-10:])),
        "bytes": {
            "model_up": sum(m.bytes_model_up for m in fed.metrics),
            "model_down": sum(m.bytes_model_down for m in fed.metrics),
            "proto_up": sum(m.bytes_proto_up for m in fed.metrics),
            "proto_down": sum(m.bytes_proto_down for m in fed.metrics),
        },
        "fallbacks": {
            "zero_substitutions": sum(m.zero_fallbacks for m in fed.metrics),
            "pce_skipped": sum(m.pce_fallbacks for m in fed.metrics),
            "skipped_clients": sum(m.skipped_clients for m in fed.metrics),
        },
        "config": cfg.as_dict(),
    }
    if cfg.run.regret:
        summary["final_avg_regret_clean"] = fed.metrics[-1].avg_regret_clean
        summary["final_avg_regret_degraded"] = fed.metrics[-1].avg_regret_degraded
    return fed, summary


def _cumulative_bytes(fed: Federation) -> list[int]:
    total, out = 0, []
    for m in fed.metrics:
        total += m.bytes_model_up + m.bytes_proto_up
        out.append(total)
    return out


def plot_script(title: str, series: list[tuple[str, str]]) -> str:
    """gnuplot commands for accuracy vs round and accuracy vs cumulative uplink bytes.

    ``series`` holds (label, data file) pairs; data files have columns
    round, mean_acc, std_acc, cum_bytes.
    """
    lines = [
        "# generated; run with: gnuplot plot.gp",
        "set terminal pngcairo size 1400,520 enhanced font 'sans,11'",
        "set output 'accuracy.png'",
        "set multiplot layout 1,2 title " + json.dumps(title),
        "set grid",
        "set key bottom right",
        "set ylabel 'test accuracy'",
        "set xlabel 'round'",
    ]
    plots = [f"{json.dumps(f)} using 1:2 with lines lw 2 title {json.dumps(lbl)}" for lbl, f in series]
    lines.append("plot " + ", \\\n     ".join(plots))
    lines += ["set xlabel 'cumulative uplink bytes'", "set format x '%.0s%c'"]
    plots = [f"{json.dumps(f)} using 4:2 with lines lw 2 title {json.dumps(lbl)}" for lbl, f in series]
    lines.append("plot " + ", \\\n     ".join(plots))
    lines.append("unset multiplot")
    return "\n".join(lines) + "\n"


def _curve_text(mean: np.ndarray, std: np.ndarray, cum_bytes: np.ndarray) -> str:
    rows = ["# round mean_acc std_acc cum_uplink_bytes"]
    rows += [f"{t} {m!r} {s!r} {int(b)}" for t, (m, s, b) in enumerate(zip(mean, std, cum_bytes))]
    return "\n".join(rows) + "\n"


def run_experiment(cfg: ExperimentConfig, out: str | os.PathLike | None = None,
                   seeds: list[int] | None = None, manifest: bool = True) -> dict:
    """Run every seed, write per-seed CSV/JSON, the aggregate, and a plot script."""
    root = ensure_writable(out if out is not None else cfg.run.out)
    seeds = list(seeds) if seeds is not None else list(cfg.run.seed_list)
    _write(root / "config.txt", cfg.to_text())

    accs, cum_bytes, finals, last10 = [], [], [], []
    for s in seeds:
        fed, summary = run_seed(cfg, s)
        d = root / f"seed-{s}"
        _write(d / "metrics.csv", csv_text(metrics_rows(fed)))
        _write(d / "summary.json", _dump(summary))
        accs.append([m.test_accuracy for m in fed.metrics])
        cum_bytes.append(_cumulative_bytes(fed))
        finals.append(summary["final_acc"])
        last10.append(summary["mean_last10_acc"])

    acc = np.array(accs)
    mean, std = acc.mean(axis=0), acc.std(axis=0)
    agg = {
        "strategy": cfg.strategy.kind,
        "seeds": seeds,
        "per_round": {"mean_acc": mean.tolist(), "std_acc": std.tolist()},
        "final_acc": {"mean": float(np.mean(finals)), "std": float(np.std(finals))},
        "mean_last10_acc": {"mean": float(np.mean(last10)), "std": float(np.std(last10))},
    }
    _write(root / "aggregate.json", _dump(agg))
    _write(root / "curve.dat", _curve_text(mean, std, np.mean(cum_bytes, axis=0)))
    _write(root / "plot.gp", plot_script(f"{cfg.strategy.kind}, {len(seeds)} seeds", [(cfg.strategy.kind, "curve.dat")]))
    if manifest:
        write_manifest(root)
    return agg


def _axis_token(value: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in value)


def run_sweep(cfg: ExperimentConfig, axis: str, values: list[str], out: str | os.PathLike | None = None) -> list[dict]:
    """One experiment per axis value plus a comparison table and a combined plot."""
    _split_key(axis, None)
    if not values:
        raise ConfigError("sweep needs at least one value")
    configs = [cfg.replace(axis, v) for v in values]  # validate every point before computing
    root = ensure_writable(out if out is not None else cfg.run.out)
    rows, series = [], []
    for v, sub in zip(values, configs):
        name = f"{axis}={_axis_token(v)}"
        agg = run_experiment(sub, root / name, manifest=False)
        rows.append({
            "axis_value": v, "strategy": sub.strategy.kind,
            "mean_final_acc": repr(agg["final_acc"]["mean"]), "std_final_acc": repr(agg["final_acc"]["std"]),
            "mean_last10_acc": repr(agg["mean_last10_acc"]["mean"]), "seeds": len(agg["seeds"]),
        })
        series.append((f"{axis}={v}", f"{name}/curve.dat"))
    _write(root / "sweep.csv", csv_text(rows, SWEEP_COLUMNS))
    _write(root / "plot.gp", plot_script(f"sweep over {axis}", series))
    write_manifest(root)
    return rows


def parse_values(text: str) -> list[str]:
    vals = [v.strip() for v in text.split(",")]
    if not all(vals):
        raise ConfigError(f"bad --values list: {text!r}")
    return vals

