"""Command-line entry point (``amss``).

Outputs go under ``$AMSS_OUTPUT_ROOT`` (default ``./runs``) unless a
path is given. Failures print one JSON object to stderr and exit with
status 2 (usage/config/data errors) or 1 (failed verification).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import harness, plots
from .config import ConfigError, RunConfig, data_spec_from_text, load_config
from .data import DatasetFormatError, generate, save_dataset
from .model import CheckpointError
from .training import TrainingError


def _floats(text: str) -> List[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty value list")
    return values


def _overrides(items: Optional[List[str]]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args.set))


def _out(args, config: RunConfig, name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return config.output_path(name)


def cmd_run(args) -> dict:
    config = _config(args)
    result = harness.run_experiment(config, args.out)
    final = result.final
    return {"run_dir": str(result.run_dir), "test_acc": final["test_acc"],
            "test_f1": final["test_f1"]}


def cmd_grid(args) -> dict:
    config = _config(args)
    out = _out(args, config, f"grid-{config.strategy}-seed{config.seed}")
    res = harness.grid_sweep(config, args.axis1, args.axis2, out, jobs=args.jobs)
    return {"out_dir": str(out), "best": [list(c) for c in res.best_cells()],
            "best_acc": float(res.accuracy.max())}


def cmd_tau(args) -> dict:
    config = _config(args)
    out = _out(args, config, f"tau-{config.strategy}-seed{config.seed}")
    rows = harness.tau_sweep(config, args.taus, out, jobs=args.jobs)
    return {"out_dir": str(out), "rows": rows}


def cmd_gen_data(args) -> dict:
    spec = data_spec_from_text(Path(args.spec).read_text(encoding="utf-8"))
    out = Path(args.out) if args.out else RunConfig(data=spec).output_path(f"data-seed{spec.seed}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(generate(spec), out)
    return {"dataset": str(out)}


def cmd_plot(args) -> dict:
    written = []
    for run in args.run:
        written += [str(p) for p in plots.emit_plots(run)]
    if len(args.run) > 1:
        labels = {}
        for run in args.run:
            label = Path(run).name
            while label in labels:
                label += "'"
            labels[label] = Path(run)
        svg = plots.comparison_chart(labels, args.column)
        out = Path(args.out) if args.out else Path(args.run[0]).parent / "comparison.svg"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(svg, encoding="utf-8")
        written.append(str(out))
    return {"written": written}


def cmd_verify(args) -> dict:
    from .verify import run_all

    results = run_all(args.draws)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailed(failed)
    return {"passed": len(results)}


class VerificationFailed(RuntimeError):
    def __init__(self, failed):
        self.failed = failed
        super().__init__("failed checks: " + ", ".join(failed))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="key = value run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", help="output directory (default: under $AMSS_OUTPUT_ROOT)")

    sp = sub.add_parser("run", help="train once and write a run directory")
    with_config(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("grid", help="2-D grid over per-modality ratios or coefficients")
    with_config(sp)
    sp.add_argument("--axis1", type=_floats, required=True, help="values for modality 0")
    sp.add_argument("--axis2", type=_floats, required=True, help="values for modality 1")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_grid)

    sp = sub.add_parser("tau-sweep", help="accuracy and mean ratios per temperature")
    with_config(sp)
    sp.add_argument("--taus", type=_floats, required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_tau)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset file")
    sp.add_argument("--spec", required=True, help="file of data.* keys")
    sp.add_argument("--out", help="dataset path")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("plot", help="(re)draw SVG charts for run directories")
    sp.add_argument("--run", action="append", required=True)
    sp.add_argument("--column", default="train_loss", help="metric for the comparison chart")
    sp.add_argument("--out", help="comparison chart path")
    sp.set_defaults(fn=cmd_plot)

    sp = sub.add_parser("verify", help="run the oracle self-checks")
    sp.add_argument("--draws", type=int, default=200_000)
    sp.set_defaults(fn=cmd_verify)
    return p


EXPECTED = (ConfigError, DatasetFormatError, CheckpointError, TrainingError, harness.CellError,
            plots.PlotError, OSError, ValueError)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.fn(args)
    except VerificationFailed as exc:
        print(json.dumps({"error": "VerificationFailed", "message": str(exc),
                          "failed": exc.failed}), file=sys.stderr)
        return 1
    except EXPECTED as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        for attr in ("line", "column", "key", "epoch", "batch", "modality", "coords"):
            if getattr(exc, attr, None) is not None:
                err[attr] = getattr(exc, attr)
        print(json.dumps(err, default=str), file=sys.stderr)
        return 2
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
