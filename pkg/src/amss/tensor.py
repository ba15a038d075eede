"""Dense layer primitives with analytic gradients.

Tensors are plain float64 numpy arrays. Every layer here keeps the
batch axis first and has no cross-sample coupling, which the per-sample
Fisher computation in :mod:`amss.masking` relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

GradientSet = Dict[str, np.ndarray]

SHARED = -1


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer: str, expected, actual):
        self.layer = layer
        self.expected = expected
        self.actual = actual
        super().__init__(f"{layer}: expected shape {expected}, got {actual}")


class StaleCacheError(RuntimeError):
    """A forward cache was reused or outlived a parameter update."""


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass
class Param:
    name: str
    value: np.ndarray
    layer: str
    modality: int = SHARED


class ParamStore:
    """Ordered parameter registry keyed by parameter id.

    Each entry remembers its owning layer and modality (``SHARED`` for
    fusion/joint-head parameters).
    """

    def __init__(self):
        self._params: Dict[str, Param] = {}

    def add(self, name: str, value, layer: str, modality: int = SHARED) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter id {name!r}")
        p = Param(name, np.asarray(value, dtype=np.float64), layer, modality)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        current = self._params[name].value
        if value.shape != current.shape:
            raise ShapeError(name, current.shape, value.shape)
        current[...] = value

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def entry(self, name: str) -> Param:
        return self._params[name]

    def entries(self) -> List[Param]:
        return list(self._params.values())

    def names(self, modality: Optional[int] = None) -> List[str]:
        if modality is None:
            return list(self._params)
        return [n for n, p in self._params.items() if p.modality == modality]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in state.items():
            self[name] = value

    def size(self) -> int:
        return int(sum(p.value.size for p in self._params.values()))


class Linear:
    """Affine map ``x @ W.T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, layer_id: str, params: ParamStore):
        self.layer_id = layer_id
        self.weight_id = f"{layer_id}.weight"
        self.bias_id = f"{layer_id}.bias"
        self.params = params

    @property
    def n_out(self) -> int:
        return self.params[self.weight_id].shape[0]

    @property
    def n_in(self) -> int:
        return self.params[self.weight_id].shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        W = self.params[self.weight_id]
        if x.ndim != 2 or x.shape[1] != W.shape[1]:
            raise ShapeError(self.layer_id, ("B", W.shape[1]), x.shape)
        return x @ W.T + self.params[self.bias_id]

    def backward(self, x: np.ndarray, dout: np.ndarray, grads: GradientSet,
                 record: Optional[dict] = None) -> np.ndarray:
        if record is not None:
            record[self.layer_id] = (x, dout)
        grads[self.weight_id] = grads.get(self.weight_id, 0.0) + dout.T @ x
        grads[self.bias_id] = grads.get(self.bias_id, 0.0) + dout.sum(axis=0)
        return dout @ self.params[self.weight_id]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (x > 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of one-hot ``y`` under ``softmax(logits)``.

    Returns ``(loss, dlogits)`` where ``dlogits = (q - y) / B``.
    """
    if logits.shape != y.shape:
        raise ShapeError("softmax_ce", logits.shape, y.shape)
    B = logits.shape[0]
    logq = log_softmax(logits)
    loss = float(-(y * logq).sum() / B)
    return max(loss, 0.0), (np.exp(logq) - y) / B


def finite_diff_gradient(
    loss_fn: Callable[[ParamStore], float], params: ParamStore, eps: float = 1e-5
) -> GradientSet:
    """Central-difference gradient of ``loss_fn`` at the current parameters.

    Coordinates are perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads: GradientSet = {}
    for name in params:
        w = params[name]
        g = np.zeros_like(w)
        flat_w, flat_g = w.reshape(-1), g.reshape(-1)
        for j in range(flat_w.size):
            orig = flat_w[j]
            flat_w[j] = orig + eps
            f_plus = loss_fn(params)
            flat_w[j] = orig - eps
            f_minus = loss_fn(params)
            flat_w[j] = orig
            flat_g[j] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def max_relative_error(g1: GradientSet, g2: GradientSet) -> float:
    if set(g1) != set(g2):
        raise KeyError("gradient sets have different keys")
    return max(float(relative_error(g1[k], g2[k]).max()) for k in g1)
