"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set DIFFREC_PURE_PYTHON=1 to force the numpy backend (useful for debugging
and for the backend-comparison benchmark). The active backend name is
exposed as BACKEND.
"""

import os

from . import numpy_backend

_impl = None
if not os.environ.get("DIFFREC_PURE_PYTHON"):
    try:
        from . import _ext as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = None

if _impl is not None:
    BACKEND = "ext"
    softmax_last = _impl.softmax_last
    softmax_last_grad = _impl.softmax_last_grad
    layer_norm = _impl.layer_norm
    layer_norm_grad = _impl.layer_norm_grad
    gelu = _impl.gelu
    gelu_fwd = _impl.gelu_fwd
    gelu_grad = _impl.gelu_grad
    adam_update = _impl.adam_update
    embedding_grad = _impl.embedding_grad
else:
    BACKEND = "numpy"
    softmax_last = numpy_backend.softmax_last
    softmax_last_grad = numpy_backend.softmax_last_grad
    layer_norm = numpy_backend.layer_norm
    layer_norm_grad = numpy_backend.layer_norm_grad
    gelu = numpy_backend.gelu
    gelu_fwd = numpy_backend.gelu_fwd
    gelu_grad = numpy_backend.gelu_grad
    adam_update = numpy_backend.adam_update
    embedding_grad = numpy_backend.embedding_grad
