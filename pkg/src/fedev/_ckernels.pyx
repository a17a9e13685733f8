# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled model kernels. Mirrors ``_pykernels`` function for function.

Each call fuses forward and backward passes per sample, which avoids the
per-call numpy overhead that dominates on the small mini-batches used in
local training.
"""
import numpy as np

from libc.math cimport tanh, exp, log, log1p, sqrt, fabs

from .errors import DegenerateFeatureError

cdef double MIN_FEATURE_NORM = 1e-12


cdef inline void _hidden(const double* p, const double* wt, Py_ssize_t D, Py_ssize_t H,
                         Py_ssize_t F, const double* x, double* h, double* f) noexcept nogil:
    """Hidden activations and features of one sample.

    ``wt`` holds W1 and W2 transposed (see ``_transposed``) so both inner
    loops are independent updates rather than dot-product reductions.
    """
    cdef Py_ssize_t j, i
    cdef Py_ssize_t ob1 = H * D, ob2 = ob1 + H + F * H
    cdef const double* w1t = wt
    cdef const double* w2t = wt + D * H
    cdef double xi, hi
    for j in range(H):
        h[j] = p[ob1 + j]
    for i in range(D):
        xi = x[i]
        for j in range(H):
            h[j] += w1t[i * H + j] * xi
    for j in range(H):
        h[j] = tanh(h[j])
    for j in range(F):
        f[j] = p[ob2 + j]
    for i in range(H):
        hi = h[i]
        for j in range(F):
            f[j] += w2t[i * F + j] * hi


cdef inline void _logits(const double* p, const double* wt, Py_ssize_t D, Py_ssize_t H,
                         Py_ssize_t F, Py_ssize_t C, const double* f, double* z) noexcept nogil:
    cdef Py_ssize_t c, i
    cdef Py_ssize_t ob3 = H * D + H + F * H + F + C * F
    cdef const double* w3t = wt + D * H + H * F
    cdef double fi
    for c in range(C):
        z[c] = p[ob3 + c]
    for i in range(F):
        fi = f[i]
        for c in range(C):
            z[c] += w3t[i * C + c] * fi


cdef _transposed(const double[::1] params, Py_ssize_t D, Py_ssize_t H, Py_ssize_t F, Py_ssize_t C):
    """W1^T | W2^T | W3^T packed in one buffer."""
    out = np.empty(D * H + H * F + F * C, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t oW2 = H * D + H, oW3 = oW2 + F * H + F
    cdef Py_ssize_t i, j, base
    for j in range(H):
        for i in range(D):
            o[i * H + j] = params[j * D + i]
    base = D * H
    for j in range(F):
        for i in range(H):
            o[base + i * F + j] = params[oW2 + j * H + i]
    base += H * F
    for j in range(C):
        for i in range(F):
            o[base + i * C + j] = params[oW3 + j * F + i]
    return out


cdef inline void _backprop_features(const double* p, Py_ssize_t D, Py_ssize_t H, Py_ssize_t F,
                                    const double* x, const double* h, const double* df,
                                    double* dh, double* g) noexcept nogil:
    """Accumulate into g the first two layers' gradient given dloss/dfeatures."""
    cdef Py_ssize_t j, i
    cdef Py_ssize_t oW1 = 0, ob1 = H * D
    cdef Py_ssize_t oW2 = ob1 + H, ob2 = oW2 + F * H
    for i in range(H):
        dh[i] = 0.0
    for j in range(F):
        g[ob2 + j] += df[j]
        for i in range(H):
            g[oW2 + j * H + i] += df[j] * h[i]
            dh[i] += df[j] * p[oW2 + j * H + i]
    for j in range(H):
        dh[j] *= 1.0 - h[j] * h[j]
        g[ob1 + j] += dh[j]
        for i in range(D):
            g[oW1 + j * D + i] += dh[j] * x[i]


def features_batch(const double[::1] params, dims, const double[:, ::1] X):
    cdef Py_ssize_t D = dims[0], H = dims[1], F = dims[2]
    cdef Py_ssize_t n = X.shape[0], s
    cdef double[::1] wt = _transposed(params, D, H, F, dims[3])
    out = np.empty((n, F), dtype=np.float64)
    cdef double[:, ::1] fo = out
    h_arr = np.empty(H, dtype=np.float64)
    cdef double[::1] h = h_arr
    if n == 0:
        return out
    with nogil:
        for s in range(n):
            _hidden(&params[0], &wt[0], D, H, F, &X[s, 0], &h[0], &fo[s, 0])
    return out


def forward_batch(const double[::1] params, dims, const double[:, ::1] X):
    cdef Py_ssize_t D = dims[0], H = dims[1], F = dims[2], C = dims[3]
    cdef Py_ssize_t n = X.shape[0], s, c
    cdef double[::1] wt = _transposed(params, D, H, F, C)
    feats = np.empty((n, F), dtype=np.float64)
    probs = np.empty((n, C), dtype=np.float64)
    cdef double[:, ::1] fo = feats
    cdef double[:, ::1] po = probs
    h_arr = np.empty(H, dtype=np.float64)
    cdef double[::1] h = h_arr
    cdef double m, tot
    if n == 0:
        return feats, probs
    with nogil:
        for s in range(n):
            _hidden(&params[0], &wt[0], D, H, F, &X[s, 0], &h[0], &fo[s, 0])
            _logits(&params[0], &wt[0], D, H, F, C, &fo[s, 0], &po[s, 0])
            m = po[s, 0]
            for c in range(1, C):
                if po[s, c] > m:
                    m = po[s, c]
            tot = 0.0
            for c in range(C):
                po[s, c] = exp(po[s, c] - m)
                tot += po[s, c]
            for c in range(C):
                po[s, c] /= tot
    return feats, probs


def predict_batch(const double[::1] params, dims, const double[:, ::1] X):
    _, probs = forward_batch(params, dims, X)
    return np.argmax(probs, axis=1).astype(np.int64)


def class_loss_grad(const double[::1] params, dims, const double[:, ::1] X, const long long[::1] y):
    cdef Py_ssize_t D = dims[0], H = dims[1], F = dims[2], C = dims[3]
    cdef Py_ssize_t n = X.shape[0], s, c, i
    cdef double[::1] wt = _transposed(params, D, H, F, C)
    cdef Py_ssize_t oW3 = H * D + H + F * H + F
    cdef Py_ssize_t ob3 = oW3 + C * F
    grad_arr = np.zeros(params.shape[0], dtype=np.float64)
    cdef double[::1] g = grad_arr
    buf = np.empty(2 * H + 2 * F + C, dtype=np.float64)
    cdef double[::1] b = buf
    cdef double* h = &b[0]
    cdef double* dh = h + H
    cdef double* f = dh + H
    cdef double* df = f + F
    cdef double* z = df + F
    cdef double m, tot, lse, loss = 0.0, inv_n = 1.0 / n, dz
    with nogil:
        for s in range(n):
            _hidden(&params[0], &wt[0], D, H, F, &X[s, 0], h, f)
            _logits(&params[0], &wt[0], D, H, F, C, f, z)
            m = z[0]
            for c in range(1, C):
                if z[c] > m:
                    m = z[c]
            tot = 0.0
            for c in range(C):
                tot += exp(z[c] - m)
            lse = m + log(tot)
            loss += lse - z[y[s]]
            for i in range(F):
                df[i] = 0.0
            for c in range(C):
                dz = exp(z[c] - m) / tot
                if c == y[s]:
                    dz -= 1.0
                dz *= inv_n
                g[ob3 + c] += dz
                for i in range(F):
                    g[oW3 + c * F + i] += dz * f[i]
                    df[i] += dz * params[oW3 + c * F + i]
            _backprop_features(&params[0], D, H, F, &X[s, 0], h, df, dh, &g[0])
    return loss * inv_n, grad_arr


def align_loss_grad(const double[::1] params, dims, const double[:, ::1] X,
                    const double[:, ::1] ref_loc, const double[:, ::1] ref_glo,
                    use_glo, double tau):
    cdef Py_ssize_t D = dims[0], H = dims[1], F = dims[2]
    cdef Py_ssize_t n = X.shape[0], s, i
    cdef double[::1] wt = _transposed(params, D, H, F, dims[3])
    glo_arr = np.ascontiguousarray(use_glo, dtype=np.uint8)
    cdef const unsigned char[::1] glo = glo_arr
    grad_arr = np.zeros(params.shape[0], dtype=np.float64)
    cdef double[::1] g = grad_arr
    buf = np.empty(2 * H + 2 * F, dtype=np.float64)
    cdef double[::1] b = buf
    cdef double* h = &b[0]
    cdef double* dh = h + H
    cdef double* f = dh + H
    cdef double* df = f + F
    cdef double nf, nl, ng, dot_l, dot_g, d_loc, d_glo, a, bb, hi, d_star
    cdef double w_glo, c_loc, c_glo, inv_n = 1.0 / n, loss = 0.0
    cdef int bad = 0
    with nogil:
        for s in range(n):
            _hidden(&params[0], &wt[0], D, H, F, &X[s, 0], h, f)
            nf = 0.0; nl = 0.0; ng = 0.0; dot_l = 0.0; dot_g = 0.0
            for i in range(F):
                nf += f[i] * f[i]
                nl += ref_loc[s, i] * ref_loc[s, i]
                ng += ref_glo[s, i] * ref_glo[s, i]
                dot_l += f[i] * ref_loc[s, i]
                dot_g += f[i] * ref_glo[s, i]
            nf = sqrt(nf); nl = sqrt(nl); ng = sqrt(ng)
            if nf < MIN_FEATURE_NORM:
                bad = 1
                break
            if nl < MIN_FEATURE_NORM:
                bad = 2
                break
            if ng < MIN_FEATURE_NORM:
                bad = 3
                break
            d_loc = dot_l / (nf * nl)
            d_glo = dot_g / (nf * ng)
            a = d_loc / tau
            bb = d_glo / tau
            hi = a if a > bb else bb
            d_star = bb if glo[s] else a
            loss += log1p(exp(-fabs(a - bb))) + (hi - d_star)
            w_glo = 0.5 * (1.0 + tanh(0.5 * (bb - a)))
            c_glo = (w_glo - (1.0 if glo[s] else 0.0)) / tau * inv_n
            c_loc = ((1.0 - w_glo) - (0.0 if glo[s] else 1.0)) / tau * inv_n
            for i in range(F):
                df[i] = (c_loc * (ref_loc[s, i] / (nf * nl) - d_loc / (nf * nf) * f[i])
                         + c_glo * (ref_glo[s, i] / (nf * ng) - d_glo / (nf * nf) * f[i]))
            _backprop_features(&params[0], D, H, F, &X[s, 0], h, df, dh, &g[0])
    if bad:
        what = ("current model", "previous local model", "previous global model")[bad - 1]
        raise DegenerateFeatureError(f"{what} feature vector has norm below {MIN_FEATURE_NORM}")
    return loss * inv_n, grad_arr
