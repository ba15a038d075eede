"""Flat ``key = value`` run configuration with dotted keys.

Example::

    seed = 3
    data.dims = 64,16
    data.snr = 8,1
    model.fusion = concat
    model.widths = 64
    train.strategy = amss_plus
    train.tau = 0.25
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .data import DataSpec
from .masking import Scope
from .model import FUSIONS
from .training import Strategy

OUTPUT_ROOT_ENV = "AMSS_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"{key}: "
        super().__init__(prefix + message)


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _widths(text: str):
    """``64`` or ``64,32`` (shared) or ``64;32,16`` (per modality)."""
    blocks = [b for b in text.split(";") if b.strip()]
    if len(blocks) == 1:
        return _ints(blocks[0])
    return tuple(_ints(b) for b in blocks)


def _fmt_tuple(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


@dataclass(frozen=True)
class RunConfig:
    data: Optional[DataSpec] = field(default_factory=DataSpec)
    data_path: Optional[str] = None
    fusion: str = "concat"
    encoder_widths: tuple = (64,)
    strategy: str = "amss_plus"
    modulation: Optional[Tuple[float, ...]] = None
    ratios: Optional[Tuple[float, ...]] = None
    scope: str = "both"
    sampling: str = "fisher"
    lam: float = 0.9
    tau: float = 0.25
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 64
    fisher_stride: int = 1
    plateau_patience: int = 0
    seed: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            strategy = Strategy(self.strategy)
        except ValueError:
            raise ConfigError(f"unknown strategy {self.strategy!r}", "train.strategy") from None
        if (self.modulation is not None) != (strategy is Strategy.GLOBAL_WISE):
            raise ConfigError("train.v is required for global_wise and only allowed there", "train.v")
        if (self.ratios is not None) != (strategy is Strategy.UNIFORM_MASK):
            raise ConfigError("train.rho is required for uniform_mask and only allowed there",
                              "train.rho")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}", "model.fusion")
        try:
            Scope(self.scope)
        except ValueError:
            raise ConfigError(f"unknown scope {self.scope!r}", "train.scope") from None
        if self.data is None and self.data_path is None:
            raise ConfigError("either data.* generation keys or data.path is required")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def seeds(self):
        """(data seed, model seed) derived from the master seed."""
        data_ss, model_ss = np.random.SeedSequence(self.seed).spawn(2)
        return int(data_ss.generate_state(1)[0]), int(model_ss.generate_state(1)[0])

    def output_path(self, default_name: str = "run") -> Path:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        if self.output_dir is None:
            return root / default_name
        out = Path(self.output_dir)
        return out if out.is_absolute() else root / out

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        if self.data_path is not None:
            lines.append(f"data.path = {self.data_path}")
        if self.data is not None:
            d = self.data
            lines += [
                f"data.classes = {d.n_classes}",
                f"data.dims = {_fmt_tuple(d.dims)}",
                f"data.snr = {_fmt_tuple(d.snr)}",
                f"data.train = {d.n_train}",
                f"data.val = {d.n_val}",
                f"data.test = {d.n_test}",
                f"data.seed = {d.seed}",
            ]
            if d.n_prototypes is not None:
                lines.append(f"data.prototypes = {_fmt_tuple(d.n_prototypes)}")
        widths = self.encoder_widths
        if widths and not np.isscalar(widths[0]):
            wtext = ";".join(_fmt_tuple(w) for w in widths)
        else:
            wtext = _fmt_tuple(widths)
        lines += [f"model.fusion = {self.fusion}", f"model.widths = {wtext}",
                  f"train.strategy = {self.strategy}"]
        if self.modulation is not None:
            lines.append(f"train.v = {_fmt_tuple(self.modulation)}")
        if self.ratios is not None:
            lines.append(f"train.rho = {_fmt_tuple(self.ratios)}")
        lines += [
            f"train.scope = {self.scope}",
            f"train.sampling = {self.sampling}",
            f"train.lambda = {self.lam!r}",
            f"train.tau = {self.tau!r}",
            f"train.lr = {self.lr!r}",
            f"train.momentum = {self.momentum!r}",
            f"train.weight_decay = {self.weight_decay!r}",
            f"train.epochs = {self.epochs}",
            f"train.batch_size = {self.batch_size}",
            f"train.fisher_stride = {self.fisher_stride}",
            f"train.plateau_patience = {self.plateau_patience}",
        ]
        if self.output_dir is not None:
            lines.append(f"output.dir = {self.output_dir}")
        return "\n".join(lines) + "\n"


_DATA_KEYS = {
    "data.classes": ("n_classes", int),
    "data.dims": ("dims", _ints),
    "data.snr": ("snr", _floats),
    "data.prototypes": ("n_prototypes", _ints),
    "data.train": ("n_train", int),
    "data.val": ("n_val", int),
    "data.test": ("n_test", int),
    "data.seed": ("seed", int),
}

_RUN_KEYS = {
    "seed": ("seed", int),
    "data.path": ("data_path", str),
    "model.fusion": ("fusion", str),
    "model.widths": ("encoder_widths", _widths),
    "train.strategy": ("strategy", str),
    "train.v": ("modulation", _floats),
    "train.rho": ("ratios", _floats),
    "train.scope": ("scope", str),
    "train.sampling": ("sampling", str),
    "train.lambda": ("lam", float),
    "train.tau": ("tau", float),
    "train.lr": ("lr", float),
    "train.momentum": ("momentum", float),
    "train.weight_decay": ("weight_decay", float),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.fisher_stride": ("fisher_stride", int),
    "train.plateau_patience": ("plateau_patience", int),
    "output.dir": ("output_dir", str),
}


def parse_pairs(text: str) -> Dict[str, Tuple[str, int]]:
    pairs: Dict[str, Tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError("duplicate key", key, lineno)
        pairs[key] = (value, lineno)
    return pairs


def config_from_pairs(pairs: Dict[str, Tuple[str, int]]) -> RunConfig:
    run_kw, data_kw = {}, {}
    for key, (value, lineno) in pairs.items():
        table = _DATA_KEYS if key in _DATA_KEYS else _RUN_KEYS if key in _RUN_KEYS else None
        if table is None:
            raise ConfigError("unknown key", key, lineno)
        name, conv = table[key]
        try:
            parsed = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} ({exc})", key, lineno) from None
        (data_kw if table is _DATA_KEYS else run_kw)[name] = parsed
    if "data_path" in run_kw:
        if data_kw:
            raise ConfigError("data.path cannot be combined with data generation keys")
        run_kw["data"] = None
    else:
        seed = run_kw.get("seed", 0)
        if "seed" not in data_kw:
            data_kw["seed"] = RunConfig(seed=seed).seeds()[0]
        try:
            run_kw["data"] = DataSpec(**data_kw)
        except ValueError as exc:
            raise ConfigError(f"invalid data spec: {exc}") from None
    try:
        return RunConfig(**run_kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def loads_config(text: str, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    pairs = parse_pairs(text)
    for key, value in (overrides or {}).items():
        pairs[key] = (value, None)
    return config_from_pairs(pairs)


def load_config(path, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    return loads_config(Path(path).read_text(encoding="utf-8"), overrides)


def data_spec_from_text(text: str) -> DataSpec:
    """Read a ``data.*``-only key-value file (the ``gen-data`` input)."""
    pairs = parse_pairs(text)
    kw = {}
    for key, (value, lineno) in pairs.items():
        if key not in _DATA_KEYS:
            raise ConfigError("only data.* keys are allowed in a data spec", key, lineno)
        name, conv = _DATA_KEYS[key]
        try:
            kw[name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} ({exc})", key, lineno) from None
    try:
        return DataSpec(**kw)
    except ValueError as exc:
        raise ConfigError(f"invalid data spec: {exc}") from None
