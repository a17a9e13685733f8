"""Epistemic variation: prediction flips across local-training checkpoints.

A trace stores, per unlabeled sample, the flip indicator of every epoch
(the first entry is always 0) and the predicted class history. EV is the
number of flips, i.e. of inconsistent adjacent prediction pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ProtocolError
from .model import ModelState, predict, predict_proba


@dataclass(frozen=True)
class EvTrace:
    sample_id: Hashable
    flips: tuple[int, ...] = ()
    history: tuple = ()

    @property
    def epochs(self) -> int:
        return len(self.flips)

    @property
    def ev(self) -> int:
        return sum(self.flips)

    @property
    def distinct_classes(self) -> int:
        return len(set(self.history))

    def extended(self, prediction) -> "EvTrace":
        flip = 0 if not self.history else int(prediction != self.history[-1])
        return EvTrace(self.sample_id, self.flips + (flip,), self.history + (prediction,))


def record_predictions(traces: Mapping, ids: Sequence, predictions: Sequence, epoch: int) -> dict:
    """Append one epoch's predictions; epochs must arrive as 1, 2, ..., E."""
    if len(ids) != len(predictions):
        raise ProtocolError("one prediction is required per sample")
    if epoch < 1:
        raise ProtocolError(f"epochs are numbered from 1, got {epoch}")
    out = dict(traces)
    for sid, pred in zip(ids, predictions):
        sid = sid.item() if isinstance(sid, np.generic) else sid
        pred = pred.item() if isinstance(pred, np.generic) else pred
        prev = out.get(sid)
        done = 0 if prev is None else prev.epochs
        if done != epoch - 1:
            raise ProtocolError(
                f"sample {sid}: epoch {epoch} recorded after {done} epoch(s)"
            )
        out[sid] = (prev or EvTrace(sid)).extended(pred)
    return out


def record_epoch(traces: Mapping, model: ModelState, ids: Sequence[int], X: np.ndarray,
                 epoch: int) -> dict:
    """Predict the subset with a checkpoint and append the flip indicators.

    ``X`` holds the feature rows of ``ids`` in the same order.
    """
    if len(ids) == 0:
        return dict(traces)
    preds = predict(model, np.asarray(X, dtype=np.float64).reshape(len(ids), -1))
    return record_predictions(traces, ids, preds, epoch)


def finalize_ev(traces: Mapping, epochs: int) -> dict:
    """Per-sample EV once exactly ``epochs`` checkpoints are recorded."""
    out = {}
    for sid, tr in traces.items():
        if tr.epochs != epochs:
            raise ProtocolError(f"sample {sid}: {tr.epochs} of {epochs} epochs recorded")
        out[sid] = tr.ev
    return out


def history_ev(history: Iterable) -> int:
    """EV of a complete prediction history."""
    tr = EvTrace(None)
    for p in history:
        tr = tr.extended(p)
    return tr.ev


def class_count_ev(trace: EvTrace) -> int:
    return trace.ev + trace.distinct_classes


def entropy_from_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0.0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def entropy(model: ModelState, x) -> float | np.ndarray:
    """Predictive entropy (natural log) of the softmax output."""
    out = entropy_from_probs(predict_proba(model, x))
    return float(out) if np.ndim(out) == 0 else out


def gev(local_model: ModelState, global_model: ModelState, x) -> float | np.ndarray:
    """Absolute entropy change between the local model and the aggregated model."""
    if local_model.arch != global_model.arch:
        raise ConfigurationError("gev needs models with the same architecture")
    out = np.abs(entropy_from_probs(predict_proba(global_model, x))
                 - entropy_from_probs(predict_proba(local_model, x)))
    return float(out) if np.ndim(out) == 0 else out
