"""Mini-batch training loop with modality-rebalancing update strategies."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .masking import (
    MaskMode,
    MaskPlan,
    accumulate_fisher,
    sample_mask_plan,
    scope_layers,
    uniform_importance,
    uniform_mask_plan,
    units_to_select,
)
from .model import LabeledBatch, MultiModalModel
from .optim import OptimizerState, PlateauSchedule, _update, global_scaled_step, sgd_step
from .significance import SignificanceState, imbalance_degree, significance_from_probs


class TrainingError(RuntimeError):
    """A step failed; carries where it happened."""

    def __init__(self, epoch: int, batch: int, modality, cause: BaseException):
        self.epoch = epoch
        self.batch = batch
        self.modality = modality
        self.cause = cause
        where = f"epoch {epoch}, batch {batch}"
        if modality is not None:
            where += f", modality {modality}"
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")


class Strategy(str, enum.Enum):
    BASELINE = "baseline"
    GLOBAL_WISE = "global_wise"
    UNIFORM_MASK = "uniform_mask"
    AMSS = "amss"
    AMSS_PLUS = "amss_plus"
    THEORETICAL_UNBIASED = "theoretical_unbiased"

    @property
    def adaptive(self) -> bool:
        return self in (Strategy.AMSS, Strategy.AMSS_PLUS, Strategy.THEORETICAL_UNBIASED)


_MODE = {
    Strategy.AMSS: MaskMode.AMSS,
    Strategy.AMSS_PLUS: MaskMode.AMSS_PLUS,
    Strategy.THEORETICAL_UNBIASED: MaskMode.THEORETICAL_UNBIASED,
}


@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    loss: float
    u_hat: np.ndarray
    u: np.ndarray
    rho: np.ndarray
    imbalance: float
    selected: Dict[str, int] = field(default_factory=dict)
    expected: Dict[str, int] = field(default_factory=dict)


class Trainer:
    """Owns the optimizer and significance state for one model.

    Each step runs one forward/backward pass on the joint loss, scores
    every modality from its unimodal prediction on the same batch, and
    then applies the strategy's update.
    """

    def __init__(self, model: MultiModalModel, strategy, *, lr=0.01, momentum=0.9,
                 weight_decay=1e-4, lam=0.9, tau=0.25, scope="both", modulation=None,
                 ratios=None, sampling="fisher", fisher_stride=1, plateau_patience=0,
                 sampling_rng=None, shuffle_rng=None):
        self.model = model
        self.strategy = Strategy(strategy)
        K = model.n_modalities
        self.opt = OptimizerState(lr, momentum, weight_decay)
        self.significance = SignificanceState(K, lam, tau)
        self.scope = scope
        self.sampling = sampling
        if sampling not in ("fisher", "uniform"):
            raise ValueError("sampling must be 'fisher' or 'uniform'")
        if fisher_stride < 1:
            raise ValueError("fisher_stride must be >= 1")
        self.fisher_stride = int(fisher_stride)
        self.schedule = PlateauSchedule(plateau_patience)
        self.sampling_rng = np.random.default_rng(sampling_rng)
        self.shuffle_rng = np.random.default_rng(shuffle_rng)
        self.iteration = 0
        self.log: List[IterationRecord] = []
        self._importance: Dict[int, dict] = {}
        self._modality = None

        if self.strategy is Strategy.GLOBAL_WISE:
            if modulation is None or len(modulation) != K:
                raise ValueError(f"global_wise needs {K} modulation coefficients")
            if any(not 0.0 < float(v) <= 1.0 for v in modulation):
                raise ValueError("modulation coefficients must lie in (0, 1]")
        elif modulation is not None:
            raise ValueError("modulation coefficients are only used by global_wise")
        if self.strategy is Strategy.UNIFORM_MASK:
            if ratios is None or len(ratios) != K:
                raise ValueError(f"uniform_mask needs {K} update ratios")
            if any(not 0.0 < float(r) <= 1.0 for r in ratios):
                raise ValueError("update ratios must lie in (0, 1]")
        elif ratios is not None:
            raise ValueError("fixed update ratios are only used by uniform_mask")
        self.modulation = None if modulation is None else [float(v) for v in modulation]
        self.ratios = None if ratios is None else [float(r) for r in ratios]
        if self.strategy in (Strategy.UNIFORM_MASK,) or self.strategy.adaptive:
            for k in range(K):
                if not scope_layers(model, k, scope):
                    raise ValueError(f"mask scope {scope!r} is empty for modality {k}")

    # -- one step -----------------------------------------------------------

    def _importance_for(self, k: int, batch: LabeledBatch):
        if self.sampling == "uniform":
            return uniform_importance(self.model, k, self.scope)
        if self.iteration % self.fisher_stride == 0 or k not in self._importance:
            self._importance[k] = accumulate_fisher(self.model, batch, k, self.scope)
        return self._importance[k]

    def step(self, batch: LabeledBatch, epoch: int = 0) -> IterationRecord:
        model = self.model
        K = model.n_modalities
        self._modality = None
        loss, cache = model.forward(batch)
        grads = model.backward(cache)

        u_hat = np.array([
            significance_from_probs(model.predict_unimodal(batch.xs, k), batch.y) for k in range(K)
        ])
        self.significance.update(u_hat)
        u = self.significance.u.copy()

        plans: List[MaskPlan] = []
        if self.strategy is Strategy.BASELINE:
            rho = np.ones(K)
        elif self.strategy is Strategy.GLOBAL_WISE:
            rho = np.ones(K)
        elif self.strategy is Strategy.UNIFORM_MASK:
            rho = np.array(self.ratios)
            for k in range(K):
                self._modality = k
                plans.append(uniform_mask_plan(model, k, rho[k], self.scope, self.sampling_rng))
        else:
            rho = self.significance.ratios()
            mode = _MODE[self.strategy]
            for k in range(K):
                self._modality = k
                imp = self._importance_for(k, batch)
                plans.append(sample_mask_plan(model, k, imp, rho[k], mode, self.sampling_rng,
                                              self.scope))

        self._modality = None
        if self.strategy is Strategy.BASELINE:
            sgd_step(model.params, grads, self.opt)
        elif self.strategy is Strategy.GLOBAL_WISE:
            global_scaled_step(model.params, grads, self.modulation, self.opt)
        else:
            masks = {}
            for plan in plans:
                masks.update(plan.masks)
            # parameters outside every plan (fusion head, out-of-scope layers) update plainly
            _update(model.params, grads, self.opt, list(model.params),
                    {n: masks.get(n) for n in model.params})
        model.bump()

        rec = IterationRecord(self.iteration, epoch, loss, u_hat, u, rho,
                              imbalance_degree(u))
        for plan in plans:
            rec.selected.update(plan.selection_counts())
        if plans:
            for k in range(K):
                for layer in scope_layers(model, k, self.scope):
                    rec.expected[layer.layer_id] = units_to_select(rho[k], layer.n_out)
        self.log.append(rec)
        self.iteration += 1
        return rec

    def run_epoch(self, train: LabeledBatch, batch_size: int, epoch: int) -> float:
        n = len(train)
        order = self.shuffle_rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            try:
                losses.append(self.step(train.subset(idx), epoch).loss)
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                raise TrainingError(epoch, b, self._modality, exc) from exc
        return float(np.mean(losses))
