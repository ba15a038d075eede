"""End-to-end experiment runs, parameter grids and temperature sweeps.

A run directory contains:

``config.txt``      the normalised configuration
``metrics.csv``     one row per epoch (schema in :data:`metrics_columns`)
``iterations.csv``  one row per optimizer step
``summary.json``    final metrics and first-10-epoch average ratios
``model.ckpt``      final parameters (binary checkpoint)
``*.svg``           loss, imbalance and branch-accuracy charts
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset, generate, load_dataset
from .estimator import AMSSClassifier
from .metrics import Evaluation
from .metrics import evaluate as _evaluate
from .model import dump_checkpoint
from .plots import run_charts
from .training import Strategy

RHO_BAR_EPOCHS = 10


class CellError(RuntimeError):
    def __init__(self, coords, cause: BaseException):
        self.coords = coords
        self.cause = cause
        super().__init__(f"cell {coords}: {type(cause).__name__}: {cause}")


def metrics_columns(K: int) -> List[str]:
    """Fixed column order of ``metrics.csv`` for ``K`` modalities."""
    cols = ["epoch", "lr", "train_loss"]
    for split in ("val", "test"):
        cols += [f"{split}_acc", f"{split}_f1"] + [f"{split}_branch_acc_{k}" for k in range(K)]
    cols += [f"u_hat_{k}" for k in range(K)]
    cols += [f"u_{k}" for k in range(K)]
    cols += [f"rho_{k}" for k in range(K)]
    cols.append("imbalance")
    return cols


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def load_data(config: RunConfig) -> Dataset:
    if config.data_path is not None:
        return load_dataset(config.data_path)
    return generate(config.data)


def build_estimator(config: RunConfig) -> AMSSClassifier:
    return AMSSClassifier(
        strategy=config.strategy, fusion=config.fusion, encoder_widths=config.encoder_widths,
        tau=config.tau, lam=config.lam, lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay, epochs=config.epochs, batch_size=config.batch_size,
        modulation=config.modulation, ratios=config.ratios, scope=config.scope,
        sampling=config.sampling, fisher_stride=config.fisher_stride,
        plateau_patience=config.plateau_patience, random_state=config.seeds()[1],
    )


@dataclass
class RunResult:
    config: RunConfig
    estimator: AMSSClassifier
    history: List[dict]
    run_dir: Optional[Path] = None

    @property
    def final(self) -> dict:
        return self.history[-1]

    def rho_bar(self, epochs: int = RHO_BAR_EPOCHS) -> np.ndarray:
        """Mean realised update ratio over all steps of the first ``epochs`` epochs."""
        recs = [r.rho for r in self.estimator.iteration_log_ if r.epoch <= epochs]
        if not recs:
            return np.full(self.estimator.n_modalities_, np.nan)
        return np.mean(recs, axis=0)


def fit(config: RunConfig, data: Optional[Dataset] = None) -> RunResult:
    """Train in memory without writing anything."""
    data = load_data(config) if data is None else data
    train, val, test = data["train"], data["val"], data["test"]
    est = build_estimator(config)
    est.fit(train.xs, train.labels,
            eval_sets={"val": (val.xs, val.labels), "test": (test.xs, test.labels)})
    return RunResult(config, est, est.history_)


def evaluate(model, batch) -> Evaluation:
    return _evaluate(model, batch)


def metrics_csv(history: List[dict], K: int) -> str:
    cols = metrics_columns(K)
    return _csv(cols, [[row[c] for c in cols] for row in history])


def iterations_csv(result: RunResult) -> str:
    K = result.estimator.n_modalities_
    header = (["iteration", "epoch", "loss"] + [f"u_hat_{k}" for k in range(K)]
              + [f"u_{k}" for k in range(K)] + [f"rho_{k}" for k in range(K)]
              + ["imbalance", "selected", "expected"])
    rows = []
    for r in result.estimator.iteration_log_:
        sel = ";".join(f"{k}={v}" for k, v in sorted(r.selected.items()))
        exp = ";".join(f"{k}={v}" for k, v in sorted(r.expected.items()))
        rows.append([r.iteration, r.epoch, float(r.loss), *map(float, r.u_hat), *map(float, r.u),
                     *map(float, r.rho), float(r.imbalance), sel, exp])
    return _csv(header, rows)


def summary(result: RunResult) -> dict:
    final = result.final
    K = result.estimator.n_modalities_
    return {
        "strategy": result.config.strategy,
        "seed": result.config.seed,
        "epochs": result.config.epochs,
        "final": {k: (None if isinstance(v, float) and math.isnan(v) else v)
                  for k, v in final.items()},
        "rho_bar_first_10_epochs": [float(x) for x in result.rho_bar()],
        "iterations": int(result.estimator.n_iter_),
        "n_modalities": K,
    }


def run_experiment(config: RunConfig, out_dir=None) -> RunResult:
    """Train and write a full run directory (see module docstring)."""
    out = Path(out_dir) if out_dir is not None else config.output_path(
        f"{config.strategy}-seed{config.seed}")
    result = fit(config)
    K = result.estimator.n_modalities_
    files = {
        "config.txt": config.to_text(),
        "metrics.csv": metrics_csv(result.history, K),
        "iterations.csv": iterations_csv(result),
        "summary.json": json.dumps(summary(result), indent=2, sort_keys=True) + "\n",
    }
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    (out / "model.ckpt").write_bytes(dump_checkpoint(result.estimator.model_.params))
    for name, svg in run_charts(out / "metrics.csv").items():
        (out / name).write_text(svg, encoding="utf-8")
    result.run_dir = out
    return result


# -- sweeps -------------------------------------------------------------------


def _grid_config(config: RunConfig, a: float, b: float) -> RunConfig:
    strategy = Strategy(config.strategy)
    if strategy is Strategy.UNIFORM_MASK:
        return config.replace(ratios=(float(a), float(b)))
    if strategy is Strategy.GLOBAL_WISE:
        return config.replace(modulation=(float(a), float(b)))
    raise ValueError("grid sweeps need strategy uniform_mask or global_wise")


def _grid_cell(args):
    config, data, coords = args
    try:
        return fit(config, data).final
    except Exception as exc:  # noqa: BLE001 - re-raised with the cell coordinates
        raise CellError(coords, exc) from exc


def _map(fn, jobs: int, items):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class GridResult:
    axis1: List[float]
    axis2: List[float]
    accuracy: np.ndarray  # test accuracy, shape (len(axis1), len(axis2))
    cells: List[dict]

    def best_cells(self) -> List[tuple]:
        """All (value1, value2) pairs tied for the highest accuracy."""
        top = self.accuracy.max()
        return [(self.axis1[i], self.axis2[j]) for i, j in zip(*np.nonzero(self.accuracy == top))]

    def matrix_csv(self) -> str:
        rows = [[a, *self.accuracy[i]] for i, a in enumerate(self.axis1)]
        return _csv(["axis1\\axis2", *map(repr, self.axis2)], rows)


def grid_sweep(config: RunConfig, axis1: Sequence[float], axis2: Sequence[float], out_dir=None,
               jobs: int = 1) -> GridResult:
    """Run every (axis1, axis2) cell on the same data and seed.

    ``axis1`` sets the first modality's ratio (``uniform_mask``) or
    coefficient (``global_wise``), ``axis2`` the second's.
    """
    if not axis1 or not axis2:
        raise ValueError("grid axes must be non-empty")
    data = load_data(config)
    if data.spec.n_modalities != 2:
        raise ValueError("grid sweeps need exactly two modalities")
    items = [(_grid_config(config, a, b), data, (a, b)) for a in axis1 for b in axis2]
    finals = _map(_grid_cell, jobs, items)
    acc = np.array([f["test_acc"] for f in finals]).reshape(len(axis1), len(axis2))
    cells = [dict(axis1=c[2][0], axis2=c[2][1], **f) for c, f in zip(items, finals)]
    result = GridResult([float(a) for a in axis1], [float(b) for b in axis2], acc, cells)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.csv").write_text(result.matrix_csv(), encoding="utf-8")
        cols = ["axis1", "axis2"] + [c for c in cells[0] if c not in ("axis1", "axis2")]
        (out / "cells.csv").write_text(_csv(cols, [[c[k] for k in cols] for c in cells]),
                                       encoding="utf-8")
    return result


def _tau_cell(args):
    config, data = args
    res = fit(config, data)
    return res.final["test_acc"], res.rho_bar()


def tau_sweep(config: RunConfig, taus: Sequence[float], out_dir=None, jobs: int = 1) -> List[dict]:
    """Test accuracy and first-10-epoch mean ratios for each temperature."""
    if not Strategy(config.strategy).adaptive or config.strategy == "theoretical_unbiased":
        raise ValueError("tau sweeps need strategy amss or amss_plus")
    data = load_data(config)
    outs = _map(_tau_cell, jobs, [(config.replace(tau=float(t)), data) for t in taus])
    K = data.spec.n_modalities
    rows = [{"tau": float(t), "test_acc": acc, **{f"rho_bar_{k}": float(rb[k]) for k in range(K)}}
            for t, (acc, rb) in zip(taus, outs)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["tau", "test_acc"] + [f"rho_bar_{k}" for k in range(K)]
        (out / "tau_sweep.csv").write_text(_csv(cols, [[r[c] for c in cols] for r in rows]),
                                           encoding="utf-8")
    return rows
