"""scikit-learn compatible multi-modal classifier."""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import evaluate
from .model import LabeledBatch, ModelSpec, build_model
from .significance import SignificanceState
from .training import Strategy, Trainer


def split_modalities(X, modality_dims: Optional[Sequence[int]] = None) -> List[np.ndarray]:
    """Validate ``X`` as a list of per-modality 2-D arrays.

    ``X`` may also be a single 2-D array whose columns are the modality
    blocks laid side by side; ``modality_dims`` then gives their widths.
    """
    if isinstance(X, (list, tuple)):
        xs = [check_array(x, dtype=np.float64) for x in X]
        if len({x.shape[0] for x in xs}) != 1:
            raise ValueError("all modalities need the same number of samples")
        return xs
    if modality_dims is None:
        raise ValueError("pass X as a list of modality arrays, or set modality_dims")
    X = check_array(X, dtype=np.float64)
    dims = [int(d) for d in modality_dims]
    if sum(dims) != X.shape[1]:
        raise ValueError(f"modality_dims {dims} sum to {sum(dims)}, X has {X.shape[1]} columns")
    offsets = np.cumsum([0] + dims)
    return [X[:, offsets[k]:offsets[k + 1]] for k in range(len(dims))]


class AMSSClassifier(ClassifierMixin, BaseEstimator):
    """Multi-modal MLP classifier trained with masked subnetwork updates.

    Parameters
    ----------
    strategy : {"baseline", "global_wise", "uniform_mask", "amss", "amss_plus",
        "theoretical_unbiased"}
        How each modality's gradient is modulated. ``amss`` applies 0/1
        masks over Fisher-sampled units; ``amss_plus`` rescales the kept
        units by ``1 / (p_j + L)``; ``theoretical_unbiased`` by the exact
        inverse inclusion probability.
    fusion : {"concat", "sum", "weight"}
    encoder_widths : tuple of int, or one tuple per modality
        Hidden widths of each MLP encoder.
    tau : float
        Softmax temperature for the update ratios; below 1 widens the gap
        between modalities.
    lam : float
        EMA factor applied to the significance history.
    modulation : sequence of float, optional
        Per-modality gradient coefficients for ``global_wise``.
    ratios : sequence of float, optional
        Fixed per-modality update ratios for ``uniform_mask``.
    scope : {"backbone", "classifier", "both"}
        Which layers of each modality take part in masking.
    sampling : {"fisher", "uniform"}
        Unit selection distribution for the adaptive strategies.
    modality_dims : sequence of int, optional
        Column widths when ``X`` is passed as one concatenated array.
    """

    def __init__(self, strategy="amss_plus", fusion="concat", encoder_widths=(32,), tau=0.25,
                 lam=0.9, lr=0.01, momentum=0.9, weight_decay=1e-4, epochs=40, batch_size=64,
                 modulation=None, ratios=None, scope="both", sampling="fisher", fisher_stride=1,
                 plateau_patience=0, modality_dims=None, random_state=None):
        self.strategy = strategy
        self.fusion = fusion
        self.encoder_widths = encoder_widths
        self.tau = tau
        self.lam = lam
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.modulation = modulation
        self.ratios = ratios
        self.scope = scope
        self.sampling = sampling
        self.fisher_stride = fisher_stride
        self.plateau_patience = plateau_patience
        self.modality_dims = modality_dims
        self.random_state = random_state

    def _widths(self, K: int):
        ws = self.encoder_widths
        if len(ws) and all(np.isscalar(w) for w in ws):
            return tuple(tuple(ws) for _ in range(K))
        if len(ws) != K:
            raise ValueError(f"encoder_widths has {len(ws)} entries for {K} modalities")
        return tuple(tuple(w) for w in ws)

    def _seeds(self):
        if isinstance(self.random_state, np.random.SeedSequence):
            ss = self.random_state
        elif self.random_state is None or isinstance(self.random_state, (int, np.integer)):
            ss = np.random.SeedSequence(self.random_state)
        else:
            raise ValueError("random_state must be None, an int or a SeedSequence")
        return ss.spawn(3)

    def fit(self, X, y, eval_sets: Optional[Dict[str, tuple]] = None,
            callback: Optional[Callable[[dict], None]] = None):
        """Train from scratch.

        ``eval_sets`` maps names to ``(X, y)`` pairs scored after every
        epoch; ``history_`` holds one dict per epoch (epoch 0 is the
        untrained model). ``callback`` receives each history row.
        """
        xs = split_modalities(X, self.modality_dims)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != xs[0].shape[0]:
            raise ValueError("y must be a 1-D label vector matching X")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        K = len(xs)
        C = self.classes_.size
        Y = np.eye(C)[np.searchsorted(self.classes_, y)]
        train = LabeledBatch(xs, Y)
        self.n_modalities_ = K
        self.n_features_in_ = sum(x.shape[1] for x in xs)
        spec = ModelSpec(tuple(x.shape[1] for x in xs), self._widths(K), C, self.fusion)
        init_ss, sample_ss, shuffle_ss = self._seeds()
        self.model_ = build_model(spec, init_ss)
        self.trainer_ = Trainer(
            self.model_, self.strategy, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, lam=self.lam, tau=self.tau, scope=self.scope,
            modulation=self.modulation, ratios=self.ratios, sampling=self.sampling,
            fisher_stride=self.fisher_stride, plateau_patience=self.plateau_patience,
            sampling_rng=sample_ss, shuffle_rng=shuffle_ss,
        )
        evals = {}
        for name, (Xe, ye) in (eval_sets or {}).items():
            xe = split_modalities(Xe, self.modality_dims)
            evals[name] = LabeledBatch(xe, np.eye(C)[np.searchsorted(self.classes_, np.asarray(ye))])

        self.history_: List[dict] = []
        self._record(0, train, evals, None, callback)
        for epoch in range(1, self.epochs + 1):
            start = len(self.trainer_.log)
            self.trainer_.run_epoch(train, self.batch_size, epoch)
            row = self._record(epoch, train, evals, self.trainer_.log[start:], callback)
            self.trainer_.schedule.step(row["train_loss"], self.trainer_.opt)
        self.n_iter_ = self.trainer_.iteration
        return self

    def _record(self, epoch, train, evals, records, callback):
        model = self.model_
        row = {"epoch": epoch, "lr": self.trainer_.opt.lr, "train_loss": model.loss(train)}
        for name, batch in evals.items():
            ev = evaluate(model, batch)
            row[f"{name}_acc"] = ev.accuracy
            row[f"{name}_f1"] = ev.macro_f1
            for k, a in enumerate(ev.branch_accuracy):
                row[f"{name}_branch_acc_{k}"] = a
        K = model.n_modalities
        sig: SignificanceState = self.trainer_.significance
        if records:
            u_hat = np.mean([r.u_hat for r in records], axis=0)
            rho = np.mean([r.rho for r in records], axis=0)
        else:
            u_hat = np.full(K, np.nan)
            rho = np.full(K, np.nan)
        u = sig.u if sig.u is not None else np.full(K, np.nan)
        for k in range(K):
            row[f"u_hat_{k}"] = float(u_hat[k])
        for k in range(K):
            row[f"u_{k}"] = float(u[k])
        for k in range(K):
            row[f"rho_{k}"] = float(rho[k])
        row["imbalance"] = records[-1].imbalance if records else float("nan")
        self.history_.append(row)
        if callback is not None:
            callback(row)
        return row

    def _xs(self, X):
        check_is_fitted(self, "model_")
        xs = split_modalities(X, self.modality_dims)
        if len(xs) != self.n_modalities_:
            raise ValueError(f"expected {self.n_modalities_} modalities, got {len(xs)}")
        return xs

    def predict_proba(self, X) -> np.ndarray:
        xs = self._xs(X)
        return self.model_.predict_joint(xs)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def predict_unimodal_proba(self, X, k: int) -> np.ndarray:
        xs = self._xs(X)
        return self.model_.predict_unimodal(xs, k)

    def predict_unimodal(self, X, k: int) -> np.ndarray:
        proba = self.predict_unimodal_proba(X, k)
        return self.classes_[proba.argmax(axis=1)]

    @property
    def significance_(self) -> SignificanceState:
        check_is_fitted(self, "trainer_")
        return self.trainer_.significance

    @property
    def iteration_log_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.log
