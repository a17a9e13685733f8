"""Backend selection for the model kernels.

The compiled extension is preferred. Its fused per-sample loops beat numpy
on the small mini-batches of local training, while numpy's vectorized
``tanh``/``exp`` and BLAS win on large inference batches. With the
extension loaded each call is therefore routed by batch size; the
crossover points come from ``benchmarks/bench_kernels.py``.

Set ``FEDEV_PURE_PYTHON=1`` to force the numpy fallback everywhere.
"""
from __future__ import annotations

import os

from . import _pykernels

KERNEL_NAMES = ("features_batch", "forward_batch", "predict_batch", "class_loss_grad",
                "align_loss_grad")

# largest batch still sent to the compiled kernel
CROSSOVER = {
    "features_batch": 24,
    "forward_batch": 24,
    "predict_batch": 24,
    "class_loss_grad": 48,
    "align_loss_grad": 64,
}

_FORCE_PURE = os.environ.get("FEDEV_PURE_PYTHON", "").strip() not in ("", "0")

_ext = None
if not _FORCE_PURE:
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"


def _routed(name):
    small = getattr(_ext, name)
    large = getattr(_pykernels, name)
    limit = CROSSOVER[name]

    def call(params, dims, X, *args):
        fn = small if X.shape[0] <= limit else large
        return fn(params, dims, X, *args)

    call.__name__ = name
    call.__doc__ = f"{name} via the compiled kernel up to {limit} rows, numpy above."
    return call


if _ext is not None:
    features_batch = _routed("features_batch")
    forward_batch = _routed("forward_batch")
    predict_batch = _routed("predict_batch")
    class_loss_grad = _routed("class_loss_grad")
    align_loss_grad = _routed("align_loss_grad")
else:
    features_batch = _pykernels.features_batch
    forward_batch = _pykernels.forward_batch
    predict_batch = _pykernels.predict_batch
    class_loss_grad = _pykernels.class_loss_grad
    align_loss_grad = _pykernels.align_loss_grad


def available_backends():
    """Map backend name to kernel module for every backend importable here."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        return out
    out["cython"] = _ckernels
    return out
