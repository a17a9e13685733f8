"""Two-layer tanh classifier with a linear softmax head and exact gradients.

Architecture::

    x -> tanh(W1 x + b1) -> W2 h + b2 (features) -> W3 f + b3 -> softmax

Features are the second affine layer's output; they feed the cosine
alignment term. All operations are pure: a ``ModelState`` is never mutated.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractViolation


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden_dim: int
    feature_dim: int
    num_classes: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "feature_dim", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"arch.{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("arch.num_classes must be >= 2")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.input_dim, self.hidden_dim, self.feature_dim, self.num_classes)

    @property
    def param_count(self) -> int:
        D, H, F, C = self.dims
        return H * D + H + F * H + F + C * F + C


class ModelState:
    """Immutable flat parameter vector plus its architecture."""

    __slots__ = ("params", "arch")

    def __init__(self, params, arch: Arch):
        p = np.array(params, dtype=np.float64, copy=True).ravel()
        if p.shape[0] != arch.param_count:
            raise ConfigurationError(
                f"params has length {p.shape[0]}, architecture needs {arch.param_count}"
            )
        if not np.all(np.isfinite(p)):
            raise ContractViolation("model parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "arch", arch)

    def __setattr__(self, name, value):
        raise AttributeError("ModelState is immutable")

    def __repr__(self):
        return f"ModelState(arch={self.arch}, n_params={self.params.shape[0]})"

    def layers(self) -> dict[str, np.ndarray]:
        """Named read-only views of the weight matrices and biases."""
        D, H, F, C = self.arch.dims
        p = self.params
        out = {}
        o = 0
        for name, shape in (("W1", (H, D)), ("b1", (H,)), ("W2", (F, H)),
                            ("b2", (F,)), ("W3", (C, F)), ("b3", (C,))):
            size = int(np.prod(shape))
            out[name] = p[o:o + size].reshape(shape)
            o += size
        return out

    @classmethod
    def from_layers(cls, arch: Arch, W1, b1, W2, b2, W3, b3) -> "ModelState":
        parts = [np.asarray(a, dtype=np.float64).ravel() for a in (W1, b1, W2, b2, W3, b3)]
        return cls(np.concatenate(parts), arch)


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.1
    tau: float = 0.5

    def __post_init__(self):
        if not (self.mu >= 0.0) or not np.isfinite(self.mu):
            raise ConfigurationError(f"mu must be a finite value >= 0, got {self.mu}")
        if not (0.0 < self.tau <= 1.0):
            raise ConfigurationError(f"tau must be in (0, 1], got {self.tau}")


class Source(enum.IntEnum):
    """Which reference model an anchor sample is aligned to."""

    LOC = 0
    GLO = 1


def init_model(arch: Arch, seed: int, scale: float = 1.0) -> ModelState:
    """Seeded Glorot-style initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    D, H, F, C = arch.dims
    W1 = rng.normal(0.0, scale * np.sqrt(1.0 / D), size=(H, D))
    W2 = rng.normal(0.0, scale * np.sqrt(1.0 / H), size=(F, H))
    W3 = rng.normal(0.0, scale * np.sqrt(1.0 / F), size=(C, F))
    return ModelState.from_layers(arch, W1, np.zeros(H), W2, np.zeros(F), W3, np.zeros(C))


def zero_model(arch: Arch) -> ModelState:
    return ModelState(np.zeros(arch.param_count), arch)


def _as_batch(model: ModelState, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.arch.input_dim:
        raise ConfigurationError(
            f"sample dimension {X.shape[-1] if X.ndim else 0} does not match input_dim "
            f"{model.arch.input_dim}"
        )
    return np.ascontiguousarray(X)


def forward(model: ModelState, x) -> tuple[np.ndarray, np.ndarray]:
    """Features and class probabilities for one sample (or a 2-D batch)."""
    single = np.ndim(x) == 1
    feats, probs = kernels.forward_batch(model.params, model.arch.dims, _as_batch(model, x))
    if single:
        return feats[0], probs[0]
    return feats, probs


def features(model: ModelState, X) -> np.ndarray:
    single = np.ndim(X) == 1
    out = kernels.features_batch(model.params, model.arch.dims, _as_batch(model, X))
    return out[0] if single else out


def predict_proba(model: ModelState, X) -> np.ndarray:
    return forward(model, X)[1]


def predict(model: ModelState, x):
    """Arg-max class; ties go to the smallest class index."""
    single = np.ndim(x) == 1
    out = kernels.predict_batch(model.params, model.arch.dims, _as_batch(model, x))
    return int(out[0]) if single else out


def accuracy(model: ModelState, X, y) -> float:
    y = np.asarray(y)
    if y.shape[0] == 0:
        return 0.0
    return float(np.mean(predict(model, np.asarray(X, dtype=np.float64).reshape(len(y), -1)) == y))


def class_loss(model: ModelState, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a labeled batch and its gradient."""
    X = _as_batch(model, X)
    y = np.ascontiguousarray(y, dtype=np.int64).ravel()
    if X.shape[0] == 0 or y.shape[0] == 0:
        raise ContractViolation("class_loss needs a non-empty batch")
    if y.shape[0] != X.shape[0]:
        raise ContractViolation("batch features and labels differ in length")
    if y.min() < 0 or y.max() >= model.arch.num_classes:
        raise ContractViolation(f"labels must lie in [0, {model.arch.num_classes})")
    return kernels.class_loss_grad(model.params, model.arch.dims, X, y)


def _check_same_arch(model: ModelState, *others: ModelState):
    for o in others:
        if o.arch != model.arch:
            raise ConfigurationError(f"architecture mismatch: {o.arch} vs {model.arch}")


def align_loss_from_refs(model: ModelState, X, ref_loc, ref_glo, use_glo, cfg: LossConfig):
    """Alignment loss given precomputed (frozen) reference features.

    ``use_glo[i]`` selects the global reference as the target for anchor i.
    """
    X = _as_batch(model, X)
    if X.shape[0] == 0:
        raise ContractViolation("align_loss needs at least one anchor")
    ref_loc = np.ascontiguousarray(ref_loc, dtype=np.float64)
    ref_glo = np.ascontiguousarray(ref_glo, dtype=np.float64)
    return kernels.align_loss_grad(model.params, model.arch.dims, X, ref_loc, ref_glo,
                                   np.asarray(use_glo, dtype=np.uint8), float(cfg.tau))


def align_loss(model: ModelState, X, sources: Sequence[Source | int],
               prev_local: ModelState, prev_global: ModelState,
               cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Softmax-form cosine alignment of current features to one of two frozen references."""
    _check_same_arch(model, prev_local, prev_global)
    X = _as_batch(model, X)
    src = np.asarray([int(s) for s in sources], dtype=np.uint8)
    if src.shape[0] != X.shape[0]:
        raise ContractViolation("one source label is required per anchor")
    if X.shape[0] == 0:
        raise ContractViolation("align_loss needs at least one anchor")
    ref_loc = features(prev_local, X)
    ref_glo = features(prev_global, X)
    return align_loss_from_refs(model, X, ref_loc, ref_glo, src == Source.GLO, cfg)


def combined_loss(model: ModelState, X, y, anchors_X, sources, prev_local: ModelState,
                  prev_global: ModelState, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Classification loss plus ``mu`` times the alignment loss."""
    lc, gc = class_loss(model, X, y)
    if cfg.mu == 0.0:
        return lc, gc
    la, ga = align_loss(model, anchors_X, sources, prev_local, prev_global, cfg)
    return lc + cfg.mu * la, gc + cfg.mu * ga


def sgd_step(model: ModelState, grad, eta: float) -> ModelState:
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape[0] != model.params.shape[0]:
        raise ContractViolation(
            f"gradient length {grad.shape[0]} != parameter length {model.params.shape[0]}"
        )
    if not eta > 0.0:
        raise ContractViolation(f"learning rate must be > 0, got {eta}")
    return ModelState(model.params - eta * grad, model.arch)
