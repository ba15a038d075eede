"""SGD updates with optional per-parameter gradient masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .masking import MaskPlan
from .tensor import GradientSet, ParamStore

MaskValue = Union[float, np.ndarray]


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def _update(params: ParamStore, grads: GradientSet, state: OptimizerState,
            names: Iterable[str], masks: Optional[Mapping[str, MaskValue]] = None) -> None:
    """Shared update kernel.

    Weight decay joins the raw gradient, the mask multiplies the result,
    and only then does momentum accumulate. Coordinates whose mask is
    exactly zero keep both their value and their velocity.
    """
    for name in names:
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        w = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {w.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * w
        m = None if masks is None else masks[name]
        if m is not None:
            m = np.broadcast_to(np.asarray(m, dtype=np.float64), w.shape)
            g = g * m
        if state.momentum > 0:
            v = state.velocity.get(name)
            if v is None:
                v = state.velocity[name] = np.zeros_like(w)
            if m is None:
                v *= state.momentum
                v += g
            else:
                live = m != 0
                v[live] = state.momentum * v[live] + g[live]
            step = v if m is None else np.where(m != 0, v, 0.0)
        else:
            step = g
        w -= state.lr * step


def sgd_step(params: ParamStore, grads: GradientSet, state: OptimizerState,
             names: Optional[Sequence[str]] = None) -> ParamStore:
    _update(params, grads, state, list(params) if names is None else names)
    return params


def masked_step(params: ParamStore, grads: GradientSet, plan: MaskPlan,
                state: OptimizerState) -> ParamStore:
    """Update only the parameters covered by ``plan``, scaled by its masks."""
    for name, m in plan.masks.items():
        if name not in params:
            raise KeyError(f"mask plan references unknown parameter {name!r}")
        if np.shape(m) != params[name].shape:
            raise ValueError(f"mask for {name} has shape {np.shape(m)}, parameter {params[name].shape}")
    _update(params, grads, state, list(plan.masks), plan.masks)
    return params


def global_scaled_step(params: ParamStore, grads: GradientSet, v: Sequence[float],
                       state: OptimizerState) -> ParamStore:
    """Scale every modality-k gradient by ``v[k]``; shared parameters are unscaled."""
    v = [float(x) for x in v]
    if any(not 0.0 < x <= 1.0 for x in v):
        raise ValueError(f"modulation coefficients must lie in (0, 1], got {v}")
    masks: Dict[str, MaskValue] = {}
    for entry in params.entries():
        if entry.modality >= 0:
            if entry.modality >= len(v):
                raise ValueError(f"no coefficient for modality {entry.modality}")
            masks[entry.name] = v[entry.modality]
        else:
            masks[entry.name] = 1.0
    _update(params, grads, state, list(params), masks)
    return params


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` when the loss stops improving.

    ``patience=0`` disables the schedule.
    """

    def __init__(self, patience: int = 0, factor: float = 0.1, threshold: float = 1e-4):
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float, state: OptimizerState) -> bool:
        if self.patience <= 0:
            return False
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            state.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False
