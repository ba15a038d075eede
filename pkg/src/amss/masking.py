"""Fisher-guided subnetwork sampling and gradient mask construction.

A mask unit is one output neuron of a linear layer: its weight row and
bias entry. Units are scored with the diagonal empirical Fisher of the
true-class log-likelihood, normalised within each layer, and a
``ceil(rho * L)`` subset is drawn per layer without replacement.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .model import LabeledBatch, MultiModalModel


class Scope(str, enum.Enum):
    BACKBONE = "backbone"
    CLASSIFIER = "classifier"
    BOTH = "both"


class MaskMode(str, enum.Enum):
    AMSS = "amss"
    AMSS_PLUS = "amss_plus"
    THEORETICAL_UNBIASED = "theoretical_unbiased"
    UNIFORM_RANDOM = "uniform_random"
    NONE = "none"


MAX_ENUMERATION = 12


@dataclass(frozen=True)
class MaskUnit:
    layer: str
    index: int
    weight_id: str
    bias_id: str

    def span(self):
        """Parameter coordinates owned by this unit as (param id, index) pairs."""
        return [(self.weight_id, (self.index, slice(None))), (self.bias_id, (self.index,))]


@dataclass
class LayerImportance:
    fisher: np.ndarray
    p: np.ndarray

    @property
    def n_units(self) -> int:
        return self.p.size


UnitImportance = Dict[str, LayerImportance]


def _as_scope(scope) -> Scope:
    try:
        return Scope(scope.value if isinstance(scope, Scope) else str(scope).lower())
    except ValueError:
        raise ValueError(f"unknown mask scope {scope!r}; expected backbone, classifier or both")


def scope_layers(model: MultiModalModel, k: int, scope) -> List:
    model._check_modality(k)
    scope = _as_scope(scope)
    layers = []
    if scope in (Scope.BACKBONE, Scope.BOTH):
        layers.extend(model.encoders[k])
    if scope in (Scope.CLASSIFIER, Scope.BOTH) and model.classifiers is not None:
        layers.append(model.classifiers[k])
    if not layers:
        warnings.warn(
            f"mask scope {scope.value!r} selects no layers for modality {k} "
            f"(fusion={model.spec.fusion!r} has no per-modality classifier)",
            stacklevel=2,
        )
    return layers


def enumerate_mask_units(model: MultiModalModel, k: int, scope="both") -> List[MaskUnit]:
    units = []
    for layer in scope_layers(model, k, scope):
        units.extend(
            MaskUnit(layer.layer_id, j, layer.weight_id, layer.bias_id) for j in range(layer.n_out)
        )
    return units


def normalize_importance(fisher) -> np.ndarray:
    """Fisher scores to a probability vector; uniform if the layer has no signal."""
    fisher = np.asarray(fisher, dtype=np.float64)
    total = fisher.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(fisher.size, 1.0 / fisher.size)
    return fisher / total


def per_sample_layer_grads(model: MultiModalModel, batch: LabeledBatch, k: int) -> Dict[str, tuple]:
    """``(input, dlogp)`` per layer of modality ``k``'s prediction path.

    Row i of ``dlogp`` is the gradient of ``log q(y_i | x_i^(k))`` with
    respect to that layer's pre-activation, so the per-sample weight
    gradient is ``outer(dlogp[i], input[i])``.
    """
    _, cache = model.forward_unimodal(batch, k)
    record: dict = {}
    model.backward(cache, record=record)
    return record


def parameter_fisher(model: MultiModalModel, batch: LabeledBatch, k: int, scope="both"):
    """Diagonal empirical Fisher for every parameter in scope (dict of arrays)."""
    record = per_sample_layer_grads(model, batch, k)
    B = len(batch)
    out = {}
    for layer in scope_layers(model, k, scope):
        x, d = record[layer.layer_id]
        out[layer.weight_id] = (d ** 2).T @ (x ** 2) / B
        out[layer.bias_id] = (d ** 2).sum(axis=0) / B
    return out


def accumulate_fisher(model: MultiModalModel, batch: LabeledBatch, k: int, scope="both") -> UnitImportance:
    """Per-unit Fisher (sum over the unit's weight row and bias) and layer-normalised p."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    record = per_sample_layer_grads(model, batch, k)
    B = len(batch)
    result: UnitImportance = {}
    for layer in scope_layers(model, k, scope):
        x, d = record[layer.layer_id]
        # sum_j (d_iu x_ij)^2 + d_iu^2 = d_iu^2 (|x_i|^2 + 1)
        row_norm = (x ** 2).sum(axis=1) + 1.0
        fisher = (d ** 2 * row_norm[:, None]).sum(axis=0) / B
        result[layer.layer_id] = LayerImportance(fisher, normalize_importance(fisher))
    return result


def uniform_importance(model: MultiModalModel, k: int, scope="both") -> UnitImportance:
    return {
        layer.layer_id: LayerImportance(np.zeros(layer.n_out), np.full(layer.n_out, 1.0 / layer.n_out))
        for layer in scope_layers(model, k, scope)
    }


# -- sampling ------------------------------------------------------------------


def _check_probvec(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("p must be a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("p must be finite and non-negative")
    return p


def sample_without_replacement(p, n: int, rng) -> np.ndarray:
    """Draw ``n`` distinct indices, each draw proportional to the remaining weights."""
    p = _check_probvec(p)
    L = p.size
    if not 1 <= n <= L:
        raise ValueError(f"need 1 <= n <= {L}, got {n}")
    if n > int(np.count_nonzero(p)):
        raise ValueError(f"cannot draw {n} distinct units from {np.count_nonzero(p)} positive weights")
    if n == L:
        return np.arange(L)
    w = p.tolist()
    out = []
    for _ in range(n):
        r = rng.random() * sum(w)
        acc = 0.0
        pick = -1
        for j, wj in enumerate(w):
            if wj > 0.0:
                pick = j
                acc += wj
                if r < acc:
                    break
        # falling off the end (float rounding) keeps the last positive entry
        out.append(pick)
        w[pick] = 0.0
    return np.sort(np.asarray(out, dtype=np.int64))


def subset_probabilities(p, n: int) -> Dict[frozenset, float]:
    """Exact probability of every size-``n`` subset under sequential sampling.

    Dynamic programme over subsets: P(S) sums, over the last-drawn
    element j, P(S - j) times j's share of the weight left after S - j.
    """
    p = _check_probvec(p)
    L = p.size
    if L > MAX_ENUMERATION:
        raise ValueError(
            f"exact enumeration is limited to {MAX_ENUMERATION} units (got {L}); "
            "use estimate_inclusion_probabilities for a Monte Carlo estimate"
        )
    if not 1 <= n <= L:
        raise ValueError(f"need 1 <= n <= {L}, got {n}")
    if n > int(np.count_nonzero(p)):
        raise ValueError("n exceeds the number of positive-weight units")
    p = p / p.sum()
    level = {0: 1.0}
    for _ in range(n):
        nxt: Dict[int, float] = {}
        for mask, prob in level.items():
            remaining = 1.0 - sum(p[i] for i in range(L) if mask >> i & 1)
            if remaining <= 0:
                continue
            for j in range(L):
                if mask >> j & 1 or p[j] == 0:
                    continue
                key = mask | (1 << j)
                nxt[key] = nxt.get(key, 0.0) + prob * p[j] / remaining
        level = nxt
    return {frozenset(i for i in range(L) if m >> i & 1): v for m, v in level.items()}


def inclusion_probabilities(p, n: int) -> np.ndarray:
    """Exact ``P(j in sample)`` for each unit; sums to ``n``."""
    p = _check_probvec(p)
    pi = np.zeros(p.size)
    for subset, prob in subset_probabilities(p, n).items():
        for j in subset:
            pi[j] += prob
    return pi


def estimate_inclusion_probabilities(p, n: int, rng, draws: int = 20000) -> np.ndarray:
    p = _check_probvec(p)
    counts = np.zeros(p.size)
    for _ in range(draws):
        counts[sample_without_replacement(p, n, rng)] += 1
    return counts / draws


def select_units(p, n: int, rng) -> np.ndarray:
    """Like :func:`sample_without_replacement`, but tolerant of zero weights.

    Once every positive-weight unit is taken the remaining weight is
    zero, so the rest are filled uniformly from the zero-weight units
    (dead ReLU units have zero Fisher).
    """
    p = _check_probvec(p)
    positive = np.flatnonzero(p > 0)
    if n <= positive.size:
        return sample_without_replacement(p, n, rng)
    zeros = np.flatnonzero(p == 0)
    extra = rng.choice(zeros, size=n - positive.size, replace=False)
    return np.sort(np.concatenate([positive, extra]).astype(np.int64))


def selection_inclusion(p, n: int) -> Optional[np.ndarray]:
    """Inclusion probabilities matching :func:`select_units`.

    None when no positive-weight shortcut applies and ``p`` is too long
    to enumerate.
    """
    p = _check_probvec(p)
    positive = p > 0
    n_pos = int(positive.sum())
    if n <= n_pos:
        if p.size <= MAX_ENUMERATION:
            return inclusion_probabilities(p, n)
        return None
    return np.where(positive, 1.0, (n - n_pos) / (p.size - n_pos))


def units_to_select(rho: float, n_units: int) -> int:
    """``ceil(rho * L)`` clamped to [1, L]; tolerant of float noise just above an integer."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"update ratio must lie in (0, 1], got {rho}")
    raw = rho * n_units
    n = math.ceil(raw - 1e-9)
    return int(min(max(n, 1), n_units))


# -- mask plans ----------------------------------------------------------------


@dataclass
class MaskPlan:
    """Per-parameter gradient multipliers for one modality."""

    modality: int
    mode: MaskMode
    masks: Dict[str, np.ndarray]
    selected: Dict[str, np.ndarray] = field(default_factory=dict)
    unit_values: Dict[str, np.ndarray] = field(default_factory=dict)

    def selection_counts(self) -> Dict[str, int]:
        return {layer: int(idx.size) for layer, idx in self.selected.items()}


def _unit_values(mode: MaskMode, imp: LayerImportance, chosen: np.ndarray,
                 inclusion: Optional[np.ndarray]) -> np.ndarray:
    L = imp.n_units
    values = np.zeros(L)
    if mode in (MaskMode.AMSS, MaskMode.UNIFORM_RANDOM):
        values[chosen] = 1.0
    elif mode is MaskMode.AMSS_PLUS:
        values[chosen] = 1.0 / (imp.p[chosen] + L)
    elif mode is MaskMode.THEORETICAL_UNBIASED:
        if inclusion is None or inclusion.shape != (L,):
            raise ValueError("theoretical_unbiased masks need per-unit inclusion probabilities")
        if np.any(inclusion[chosen] <= 0):
            raise ValueError("selected unit has zero inclusion probability")
        values[chosen] = 1.0 / inclusion[chosen]
    elif mode is MaskMode.NONE:
        values[:] = 1.0
    else:  # pragma: no cover
        raise ValueError(mode)
    return values


def build_mask(model: MultiModalModel, k: int, selected: Dict[str, np.ndarray],
               importance: UnitImportance, ratio: float, mode, scope="both",
               inclusion: Optional[Dict[str, np.ndarray]] = None) -> MaskPlan:
    """Expand per-layer unit selections into parameter-shaped mask arrays.

    Every parameter of a selected unit shares the unit's mask value;
    parameters of unselected units get 0.
    """
    mode = MaskMode(mode)
    layers = scope_layers(model, k, scope)
    plan = MaskPlan(k, mode, {})
    for layer in layers:
        lid = layer.layer_id
        if lid not in importance:
            raise ValueError(f"no importance for layer {lid}")
        imp = importance[lid]
        if imp.n_units != layer.n_out:
            raise ValueError(f"importance for {lid} has {imp.n_units} units, layer has {layer.n_out}")
        chosen = np.asarray(selected.get(lid, ()), dtype=np.int64)
        if mode is not MaskMode.NONE:
            want = units_to_select(ratio, layer.n_out)
            if chosen.size != want or np.unique(chosen).size != chosen.size:
                raise ValueError(f"{lid}: expected {want} distinct selected units, got {chosen.tolist()}")
        else:
            chosen = np.arange(layer.n_out)
        values = _unit_values(mode, imp, chosen, None if inclusion is None else inclusion.get(lid))
        plan.selected[lid] = np.sort(chosen)
        plan.unit_values[lid] = values
        W = model.params[layer.weight_id]
        plan.masks[layer.weight_id] = np.repeat(values[:, None], W.shape[1], axis=1)
        plan.masks[layer.bias_id] = values.copy()
    return plan


def sample_mask_plan(model: MultiModalModel, k: int, importance: UnitImportance, ratio: float,
                     mode, rng, scope="both") -> MaskPlan:
    """Sample per-layer subsets from ``importance`` and build the plan."""
    mode = MaskMode(mode)
    selected, inclusion = {}, {}
    for lid, imp in importance.items():
        n = units_to_select(ratio, imp.n_units)
        selected[lid] = select_units(imp.p, n, rng)
        if mode is MaskMode.THEORETICAL_UNBIASED:
            pi = selection_inclusion(imp.p, n)
            if pi is None:
                pi = estimate_inclusion_probabilities(imp.p, n, rng)
            inclusion[lid] = pi
    return build_mask(model, k, selected, importance, ratio, mode, scope,
                      inclusion if mode is MaskMode.THEORETICAL_UNBIASED else None)


def uniform_mask_plan(model: MultiModalModel, k: int, rho: float, scope, rng) -> MaskPlan:
    """0/1 plan with ``ceil(rho * L)`` units per layer drawn uniformly."""
    importance = uniform_importance(model, k, scope)
    return sample_mask_plan(model, k, importance, rho, MaskMode.UNIFORM_RANDOM, rng, scope)


def importance_rows(importance: UnitImportance, plan: Optional[MaskPlan] = None):
    """Flat rows (layer, unit, F, p, selected, mask value) for CSV dumps."""
    rows = []
    for lid, imp in importance.items():
        sel = set() if plan is None else set(plan.selected.get(lid, np.array([])).tolist())
        vals = None if plan is None else plan.unit_values.get(lid)
        for j in range(imp.n_units):
            rows.append((lid, j, float(imp.fisher[j]), float(imp.p[j]), int(j in sel),
                         0.0 if vals is None else float(vals[j])))
    return rows
