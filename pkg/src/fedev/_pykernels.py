"""Pure numpy implementation of the hot model kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``FEDEV_PURE_PYTHON=1`` is set. Both backends share signatures and agree
to floating point round-off.

Flat parameter layout: ``W1 (H, D) | b1 (H) | W2 (F, H) | b2 (F) | W3 (C, F) | b3 (C)``.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateFeatureError

MIN_FEATURE_NORM = 1e-12


def _unpack(params, dims):
    D, H, F, C = dims
    o = 0
    W1 = params[o:o + H * D].reshape(H, D); o += H * D
    b1 = params[o:o + H]; o += H
    W2 = params[o:o + F * H].reshape(F, H); o += F * H
    b2 = params[o:o + F]; o += F
    W3 = params[o:o + C * F].reshape(C, F); o += C * F
    b3 = params[o:o + C]
    return W1, b1, W2, b2, W3, b3


def _pack(dims, gW1, gb1, gW2, gb2, gW3, gb3):
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3])


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _features(params, dims, X):
    W1, b1, W2, b2, _, _ = _unpack(params, dims)
    h = np.tanh(X @ W1.T + b1)
    return h, h @ W2.T + b2


def features_batch(params, dims, X):
    return _features(params, dims, X)[1]


def forward_batch(params, dims, X):
    *_, W3, b3 = _unpack(params, dims)
    _, f = _features(params, dims, X)
    return f, _softmax(f @ W3.T + b3)


def predict_batch(params, dims, X):
    _, probs = forward_batch(params, dims, X)
    return np.argmax(probs, axis=1).astype(np.int64)


def _backprop_features(params, dims, X, h, dF):
    """Gradient of a loss w.r.t. the first two layers given dloss/dfeatures."""
    _, _, W2, _, _, _ = _unpack(params, dims)
    gW2 = dF.T @ h
    gb2 = dF.sum(axis=0)
    dA1 = (dF @ W2) * (1.0 - h * h)
    gW1 = dA1.T @ X
    gb1 = dA1.sum(axis=0)
    return gW1, gb1, gW2, gb2


def class_loss_grad(params, dims, X, y):
    D, H, F, C = dims
    n = X.shape[0]
    *_, W3, b3 = _unpack(params, dims)
    h, f = _features(params, dims, X)
    logits = f @ W3.T + b3
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s)).ravel()
    rows = np.arange(n)
    loss = float(np.mean(lse - logits[rows, y]))
    dL = e / s
    dL[rows, y] -= 1.0
    dL /= n
    gW3 = dL.T @ f
    gb3 = dL.sum(axis=0)
    dF = dL @ W3
    gW1, gb1, gW2, gb2 = _backprop_features(params, dims, X, h, dF)
    return loss, _pack(dims, gW1, gb1, gW2, gb2, gW3, gb3)


def _norms(M, what):
    nrm = np.sqrt(np.einsum("ij,ij->i", M, M))
    if np.any(nrm < MIN_FEATURE_NORM):
        raise DegenerateFeatureError(f"{what} feature vector has norm below {MIN_FEATURE_NORM}")
    return nrm


def align_loss_grad(params, dims, X, ref_loc, ref_glo, use_glo, tau):
    D, H, F, C = dims
    n = X.shape[0]
    h, f = _features(params, dims, X)
    nf = _norms(f, "current model")
    nl = _norms(ref_loc, "previous local model")
    ng = _norms(ref_glo, "previous global model")
    d_loc = np.einsum("ij,ij->i", f, ref_loc) / (nf * nl)
    d_glo = np.einsum("ij,ij->i", f, ref_glo) / (nf * ng)
    glo = np.asarray(use_glo, dtype=bool)
    glo_f = glo.astype(np.float64)
    a = d_loc / tau
    b = d_glo / tau
    hi = np.maximum(a, b)
    d_star = np.where(glo, b, a)
    losses = np.log1p(np.exp(-np.abs(a - b))) + (hi - d_star)
    loss = float(np.mean(losses))
    # logistic form of the two-way softmax; no overflow for small tau
    w_glo = 0.5 * (1.0 + np.tanh(0.5 * (b - a)))
    w_loc = 1.0 - w_glo
    c_loc = (w_loc - (1.0 - glo_f)) / (tau * n)
    c_glo = (w_glo - glo_f) / (tau * n)
    inv_nf2 = 1.0 / (nf * nf)
    dcos_loc = ref_loc / (nf * nl)[:, None] - (d_loc * inv_nf2)[:, None] * f
    dcos_glo = ref_glo / (nf * ng)[:, None] - (d_glo * inv_nf2)[:, None] * f
    dF = c_loc[:, None] * dcos_loc + c_glo[:, None] * dcos_glo
    gW1, gb1, gW2, gb2 = _backprop_features(params, dims, X, h, dF)
    zeros_w3 = np.zeros(C * F)
    zeros_b3 = np.zeros(C)
    return loss, _pack(dims, gW1, gb1, gW2, gb2, zeros_w3, zeros_b3)
