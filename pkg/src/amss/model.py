"""Multi-modal MLP networks with concat, sum and weighted fusion."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    SHARED,
    GradientSet,
    Linear,
    ParamStore,
    ShapeError,
    StaleCacheError,
    log_softmax,
    relu,
    relu_backward,
    softmax,
)

FUSIONS = ("concat", "sum", "weight")

CKPT_MAGIC = b"AMSSCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a K-modality network.

    ``encoder_widths[k]`` lists the hidden widths of modality k's MLP
    encoder; the last entry is the feature width handed to fusion.
    """

    input_dims: Tuple[int, ...]
    encoder_widths: Tuple[Tuple[int, ...], ...]
    n_classes: int
    fusion: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(
            self, "encoder_widths", tuple(tuple(int(w) for w in ws) for ws in self.encoder_widths)
        )
        self.validate()

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    @property
    def late_fusion(self) -> bool:
        return self.fusion in ("sum", "weight")

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.n_modalities < 2:
            raise ValueError("need at least two modalities")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.encoder_widths) != self.n_modalities:
            raise ValueError(
                f"{len(self.encoder_widths)} encoder specs for {self.n_modalities} modalities"
            )
        for k, (d, ws) in enumerate(zip(self.input_dims, self.encoder_widths)):
            if d < 1:
                raise ValueError(f"modality {k}: input dimension must be >= 1")
            if len(ws) == 0 or min(ws) < 1:
                raise ValueError(f"modality {k}: encoder widths must be non-empty and positive")


@dataclass
class LabeledBatch:
    xs: List[np.ndarray]
    y: np.ndarray

    def __post_init__(self):
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.y = np.asarray(self.y, dtype=np.float64)
        n = self.y.shape[0]
        for k, x in enumerate(self.xs):
            if x.ndim != 2 or x.shape[0] != n:
                raise ShapeError(f"batch.modality{k}", (n, "d"), x.shape)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.y.argmax(axis=1)

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch([x[idx] for x in self.xs], self.y[idx])


@dataclass
class ForwardCache:
    version: int
    xs: List[np.ndarray]
    y: np.ndarray
    pre: List[List[np.ndarray]]  # encoder pre-activations per modality
    feats: List[np.ndarray]
    logits: List[np.ndarray]  # one joint logit matrix, or one per modality
    probs: np.ndarray
    branch_probs: Optional[List[np.ndarray]]
    fusion_w: Optional[np.ndarray]
    dropped: Tuple[int, ...] = ()
    target: str = "mean_nll"
    consumed: bool = False


class MultiModalModel:
    """K encoders plus a fusion head over one shared :class:`ParamStore`."""

    def __init__(self, spec: ModelSpec, params: ParamStore):
        self.spec = spec
        self.params = params
        self.version = 0
        K = spec.n_modalities
        self.encoders: List[List[Linear]] = [
            [Linear(f"enc{k}.{i}", params) for i in range(len(spec.encoder_widths[k]))]
            for k in range(K)
        ]
        if spec.late_fusion:
            self.classifiers: Optional[List[Linear]] = [Linear(f"cls{k}", params) for k in range(K)]
            self.head = None
        else:
            self.classifiers = None
            self.head = Linear("head", params)

    # -- structure ---------------------------------------------------------

    @property
    def n_modalities(self) -> int:
        return self.spec.n_modalities

    def layers(self, k: int) -> List[Linear]:
        """Linear layers owned by modality ``k`` (encoder, then own classifier)."""
        out = list(self.encoders[k])
        if self.classifiers is not None:
            out.append(self.classifiers[k])
        return out

    def partition(self, k: int) -> List[str]:
        return self.params.names(k)

    def shared_params(self) -> List[str]:
        return self.params.names(SHARED)

    def bump(self) -> None:
        """Mark parameters as modified; outstanding caches become stale."""
        self.version += 1

    # -- forward -----------------------------------------------------------

    def _check_batch(self, xs: Sequence[np.ndarray]) -> None:
        if len(xs) != self.n_modalities:
            raise ShapeError("input", f"{self.n_modalities} modalities", f"{len(xs)}")
        B = None
        for k, (x, d) in enumerate(zip(xs, self.spec.input_dims)):
            if x.ndim != 2 or x.shape[1] != d:
                raise ShapeError(f"enc{k}.0", ("B", d), x.shape)
            if B is None:
                B = x.shape[0]
            elif x.shape[0] != B:
                raise ShapeError(f"enc{k}.0", (B, d), x.shape)
        if not B:
            raise ValueError("empty batch")

    def _encode(self, xs):
        pre, feats = [], []
        for enc, x in zip(self.encoders, xs):
            h, zs = x, []
            for layer in enc:
                z = layer.forward(h)
                zs.append(z)
                h = relu(z)
            pre.append(zs)
            feats.append(h)
        return pre, feats

    def _fuse(self, feats, dropped=()):
        """Return (logits list, joint probs, branch probs, fusion weights)."""
        if self.head is not None:
            parts = [
                np.zeros_like(f) if k in dropped else f for k, f in enumerate(feats)
            ]
            logits = self.head.forward(np.concatenate(parts, axis=1))
            return [logits], softmax(logits), None, None
        logits = [cls.forward(f) for cls, f in zip(self.classifiers, feats)]
        branch = [softmax(z) for z in logits]
        w = self.fusion_weights()
        probs = sum(wk * q for wk, q in zip(w, branch))
        return logits, probs, branch, w

    def fusion_weights(self) -> np.ndarray:
        K = self.n_modalities
        if self.spec.fusion == "weight":
            return softmax(self.params["fusion.logits"])
        return np.full(K, 1.0 / K)

    def forward(self, batch: LabeledBatch, *, target: str = "mean_nll"):
        """Loss and cache for ``batch``.

        ``target="mean_nll"`` gives the batch-mean cross-entropy of the
        joint prediction; ``"sum_logp"`` gives the summed true-class
        log-probability (used for per-sample gradients).
        """
        xs = batch.xs
        self._check_batch(xs)
        if batch.y.shape != (xs[0].shape[0], self.spec.n_classes):
            raise ShapeError("labels", (xs[0].shape[0], self.spec.n_classes), batch.y.shape)
        pre, feats = self._encode(xs)
        logits, probs, branch, w = self._fuse(feats)
        cache = ForwardCache(self.version, xs, batch.y, pre, feats, logits, probs, branch, w,
                             target=target)
        return self._objective(cache), cache

    def forward_unimodal(self, batch: LabeledBatch, k: int):
        """Forward pass of the modality-``k`` prediction path.

        The objective is the summed true-class log-probability, so its
        backward pass yields per-sample rows of log-likelihood gradients.
        """
        self._check_modality(k)
        self._check_batch(batch.xs)
        pre, feats = self._encode(batch.xs)
        if self.head is not None:
            dropped = tuple(j for j in range(self.n_modalities) if j != k)
            logits, probs, _, _ = self._fuse(feats, dropped)
            cache = ForwardCache(self.version, batch.xs, batch.y, pre, feats, logits, probs,
                                 None, None, dropped, target="sum_logp")
        else:
            z = self.classifiers[k].forward(feats[k])
            logits = [None] * self.n_modalities
            logits[k] = z
            dropped = tuple(j for j in range(self.n_modalities) if j != k)
            cache = ForwardCache(self.version, batch.xs, batch.y, pre, feats, logits, softmax(z),
                                 None, None, dropped, target="sum_logp")
        return self._objective(cache), cache

    def _objective(self, cache: ForwardCache) -> float:
        y = cache.y
        B = y.shape[0]
        if cache.branch_probs is None:
            (z,) = [z for z in cache.logits if z is not None]
            logp = (y * log_softmax(z)).sum(axis=1)
        else:
            logp = np.log(np.maximum((y * cache.probs).sum(axis=1), 1e-300))
        if cache.target == "sum_logp":
            return float(logp.sum())
        return max(float(-logp.sum() / B), 0.0)

    # -- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache, record: Optional[dict] = None) -> GradientSet:
        """Gradient of the cached objective with respect to every parameter.

        Parameters that the cached path does not touch get zero gradients.
        If ``record`` is given, each linear layer stores its
        ``(input, upstream gradient)`` pair there, keyed by layer id.
        """
        if cache.consumed:
            raise StaleCacheError("forward cache already consumed by backward()")
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        cache.consumed = True
        grads: GradientSet = {}
        dfeats = self._backward_head(cache, grads, record)
        for k, df in enumerate(dfeats):
            if df is None:
                continue
            self._backward_encoder(k, cache, df, grads, record)
        for name in self.params:
            if name not in grads:
                grads[name] = np.zeros_like(self.params[name])
        return grads

    def _logit_grads(self, cache: ForwardCache):
        """d(objective)/d(logits) for the single-softmax paths."""
        y = cache.y
        (z,) = [z for z in cache.logits if z is not None]
        q = softmax(z)
        if cache.target == "sum_logp":
            return y - q
        return (q - y) / y.shape[0]

    def _backward_head(self, cache: ForwardCache, grads: GradientSet, record=None):
        K = self.n_modalities
        feats = cache.feats
        if self.head is not None:
            parts = [np.zeros_like(f) if k in cache.dropped else f for k, f in enumerate(feats)]
            dz = self._logit_grads(cache)
            dh = self.head.backward(np.concatenate(parts, axis=1), dz, grads, record)
            splits = np.cumsum([f.shape[1] for f in feats])[:-1]
            blocks = np.split(dh, splits, axis=1)
            return [None if k in cache.dropped else blocks[k] for k in range(K)]
        if cache.branch_probs is None:
            # unimodal late-fusion path
            (k,) = [j for j in range(K) if j not in cache.dropped]
            dz = self._logit_grads(cache)
            out = [None] * K
            out[k] = self.classifiers[k].backward(feats[k], dz, grads, record)
            return out
        # mixture of branch probabilities: P_i = sum_k w_k q_k[y_i]
        y = cache.y
        B = y.shape[0]
        P = np.maximum((y * cache.probs).sum(axis=1), 1e-300)
        scale = -1.0 / B if cache.target == "mean_nll" else 1.0
        # d(objective)/dP_i = scale / P_i for both targets (sign folded in)
        dP = scale / P
        w = cache.fusion_w
        out = []
        dw = np.zeros(K)
        for k in range(K):
            q = cache.branch_probs[k]
            qy = (y * q).sum(axis=1)
            # dq_k[y]/dz_k = q_k[y] (y - q_k)
            dz = (dP * w[k] * qy)[:, None] * (y - q)
            out.append(self.classifiers[k].backward(feats[k], dz, grads, record))
            dw[k] = float((dP * qy).sum())
        if self.spec.fusion == "weight":
            grads["fusion.logits"] = w * (dw - float(w @ dw))
        return out

    def _backward_encoder(self, k: int, cache: ForwardCache, dh: np.ndarray, grads: GradientSet,
                          record=None):
        enc = self.encoders[k]
        zs = cache.pre[k]
        for i in range(len(enc) - 1, -1, -1):
            dz = relu_backward(zs[i], dh)
            inp = cache.xs[k] if i == 0 else relu(zs[i - 1])
            dh = enc[i].backward(inp, dz, grads, record)

    # -- prediction --------------------------------------------------------

    def _check_modality(self, k: int) -> None:
        if not 0 <= k < self.n_modalities:
            raise IndexError(f"modality {k} out of range for K={self.n_modalities}")

    def predict_joint(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        xs = [np.asarray(x, dtype=np.float64) for x in xs]
        self._check_batch(xs)
        _, feats = self._encode(xs)
        return self._fuse(feats)[1]

    def predict_unimodal(self, xs: Sequence[np.ndarray], k: int) -> np.ndarray:
        """Class probabilities from modality ``k`` alone.

        Late fusion uses the modality's own classifier; concat fusion
        zero-pads the other modalities' encoder outputs.
        """
        self._check_modality(k)
        xs = [np.asarray(x, dtype=np.float64) for x in xs]
        self._check_batch(xs)
        if self.head is None:
            h = xs[k]
            for layer in self.encoders[k]:
                h = relu(layer.forward(h))
            return softmax(self.classifiers[k].forward(h))
        _, feats = self._encode(xs)
        dropped = tuple(j for j in range(self.n_modalities) if j != k)
        return self._fuse(feats, dropped)[1]

    def loss(self, batch: LabeledBatch) -> float:
        return self.forward(batch)[0]


def _glorot(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    s = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-s, s, size=(n_out, n_in))


def build_model(spec: ModelSpec, rng) -> MultiModalModel:
    """Initialise a model for ``spec``; deterministic for a given seed."""
    spec.validate()
    rng = np.random.default_rng(rng)
    params = ParamStore()
    for k in range(spec.n_modalities):
        n_in = spec.input_dims[k]
        for i, n_out in enumerate(spec.encoder_widths[k]):
            params.add(f"enc{k}.{i}.weight", _glorot(rng, n_out, n_in), f"enc{k}.{i}", k)
            params.add(f"enc{k}.{i}.bias", np.zeros(n_out), f"enc{k}.{i}", k)
            n_in = n_out
    C = spec.n_classes
    if spec.late_fusion:
        for k in range(spec.n_modalities):
            d = spec.encoder_widths[k][-1]
            params.add(f"cls{k}.weight", _glorot(rng, C, d), f"cls{k}", k)
            params.add(f"cls{k}.bias", np.zeros(C), f"cls{k}", k)
        if spec.fusion == "weight":
            params.add("fusion.logits", np.zeros(spec.n_modalities), "fusion", SHARED)
    else:
        d = sum(ws[-1] for ws in spec.encoder_widths)
        params.add("head.weight", _glorot(rng, C, d), "head", SHARED)
        params.add("head.bias", np.zeros(C), "head", SHARED)
    return MultiModalModel(spec, params)


# -- checkpoints -------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def dump_checkpoint(params: ParamStore) -> bytes:
    """Serialise parameters.

    Layout: magic, version byte, uint32 count, then per parameter a
    uint32-length-prefixed utf-8 id, uint32 ndim, ndim uint32 dims and
    the values as little-endian float64. All integers little-endian.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(bytes([CKPT_VERSION]))
    buf.write(struct.pack("<I", len(params)))
    for name in params:
        value = params[name]
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(CKPT_MAGIC))) != CKPT_MAGIC:
        raise CheckpointError("bad magic; not an AMSS checkpoint")
    version = take(1)[0]
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last parameter")
    return out


def save_checkpoint(model: MultiModalModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(model.params))


def load_checkpoint(model: MultiModalModel, path) -> MultiModalModel:
    with open(path, "rb") as fh:
        state = parse_checkpoint(fh.read())
    model.params.load_state_dict(state)
    model.bump()
    return model
