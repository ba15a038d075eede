"""Synthetic multi-modal classification data and its CSV file format.

Each class owns one random unit-norm prototype per modality; a sample of
class c in modality k is ``snr[k] * prototype[k][c] + N(0, I)``. A
larger SNR makes a modality easier to separate, i.e. dominant.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import LabeledBatch

SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", field {column}" if column is not None else "") + ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class DataSpec:
    n_classes: int = 4
    dims: Tuple[int, ...] = (16, 16)
    snr: Tuple[float, ...] = (8.0, 1.0)
    n_train: int = 1400
    n_val: int = 300
    n_test: int = 300
    seed: int = 0
    # Number of distinct prototypes per modality; classes share them
    # round-robin (class c uses prototype c mod n). None means one per class.
    n_prototypes: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "snr", tuple(float(s) for s in self.snr))
        if self.n_prototypes is not None:
            object.__setattr__(self, "n_prototypes", tuple(int(n) for n in self.n_prototypes))
        self.validate()

    @property
    def n_modalities(self) -> int:
        return len(self.dims)

    @property
    def sizes(self) -> Dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.dims) < 2:
            raise ValueError("need at least two modalities")
        if len(self.snr) != len(self.dims):
            raise ValueError(f"{len(self.snr)} SNR values for {len(self.dims)} modalities")
        if min(self.dims) < 1:
            raise ValueError("feature dimensions must be >= 1")
        if min(self.snr) < 0:
            raise ValueError("SNR must be non-negative")
        for name, n in self.sizes.items():
            if n < self.n_classes:
                raise ValueError(f"{name} size {n} is smaller than the class count")
        if self.n_prototypes is not None:
            if len(self.n_prototypes) != len(self.dims):
                raise ValueError("n_prototypes needs one entry per modality")
            if any(not 1 <= n <= self.n_classes for n in self.n_prototypes):
                raise ValueError("n_prototypes entries must lie in [1, n_classes]")

    def to_json(self) -> str:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["snr"] = list(self.snr)
        if self.n_prototypes is not None:
            d["n_prototypes"] = list(self.n_prototypes)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        d = dict(d)
        for key in ("dims", "snr", "n_prototypes"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Dataset:
    spec: DataSpec
    splits: Dict[str, LabeledBatch]
    prototypes: Optional[List[np.ndarray]] = field(default=None, compare=False)

    def __getitem__(self, split: str) -> LabeledBatch:
        return self.splits[split]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.spec != other.spec:
            return False
        for s in SPLITS:
            a, b = self.splits[s], other.splits[s]
            if not np.array_equal(a.y, b.y) or len(a.xs) != len(b.xs):
                return False
            if not all(np.array_equal(x, z) for x, z in zip(a.xs, b.xs)):
                return False
        return True


def _balanced_labels(n: int, C: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % C
    rng.shuffle(labels)
    return labels


def class_prototypes(spec: DataSpec, rng: np.random.Generator) -> List[np.ndarray]:
    """(C, d_k) matrices of unit-norm class prototypes, one per modality."""
    protos = []
    for k, d in enumerate(spec.dims):
        n = spec.n_classes if spec.n_prototypes is None else spec.n_prototypes[k]
        base = rng.normal(size=(n, d))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        protos.append(base[np.arange(spec.n_classes) % n])
    return protos


def generate(spec: DataSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    protos = class_prototypes(spec, rng)
    splits = {}
    C = spec.n_classes
    for split in SPLITS:
        n = spec.sizes[split]
        labels = _balanced_labels(n, C, rng)
        xs = [
            spec.snr[k] * protos[k][labels] + rng.normal(size=(n, spec.dims[k]))
            for k in range(spec.n_modalities)
        ]
        splits[split] = LabeledBatch(xs, np.eye(C)[labels])
    return Dataset(spec, splits, protos)


# -- file format -----------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_dataset(ds: Dataset) -> str:
    """Serialise as ``# {spec}`` then ``split,label,<features...>`` rows."""
    lines = ["# " + ds.spec.to_json()]
    for split in SPLITS:
        b = ds.splits[split]
        labels = b.labels
        for i in range(len(b)):
            fields = [split, str(int(labels[i]))]
            for x in b.xs:
                fields.extend(_fmt(v) for v in x[i])
            lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DatasetFormatError("missing '# {spec}' header", line=1)
    try:
        spec = DataSpec.from_dict(json.loads(lines[0][1:].strip()))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad header: {exc}", line=1) from None
    width = 2 + sum(spec.dims)
    rows: Dict[str, list] = {s: [] for s in SPLITS}
    labels: Dict[str, list] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise DatasetFormatError(
                f"expected {width} fields for {spec.n_modalities} modality blocks "
                f"of widths {list(spec.dims)}, got {len(fields)}",
                line=lineno,
            )
        split = fields[0]
        if split not in rows:
            raise DatasetFormatError(f"unknown split {split!r}", line=lineno, column=1)
        try:
            label = int(fields[1])
        except ValueError:
            raise DatasetFormatError(f"bad label {fields[1]!r}", line=lineno, column=2) from None
        if not 0 <= label < spec.n_classes:
            raise DatasetFormatError(f"label {label} out of range", line=lineno, column=2)
        values = []
        for col, f in enumerate(fields[2:], start=3):
            try:
                values.append(float(f))
            except ValueError:
                raise DatasetFormatError(f"bad number {f!r}", line=lineno, column=col) from None
        rows[split].append(values)
        labels[split].append(label)
    splits = {}
    offsets = np.cumsum((0,) + spec.dims)
    for split in SPLITS:
        n = len(rows[split])
        if n != spec.sizes[split]:
            raise DatasetFormatError(
                f"{split} split has {n} rows, header declares {spec.sizes[split]} (truncated file?)"
            )
        X = np.array(rows[split], dtype=np.float64).reshape(n, width - 2)
        xs = [X[:, offsets[k]:offsets[k + 1]].copy() for k in range(spec.n_modalities)]
        splits[split] = LabeledBatch(xs, np.eye(spec.n_classes)[np.array(labels[split], dtype=int)])
    return Dataset(spec, splits)


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))
