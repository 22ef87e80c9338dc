"""Hot-kernel dispatch.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy implementations in ``_kernels_py`` are used. Set ``DIFFATLAS_PURE=1``
to force the numpy path.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DIFFATLAS_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _rect(rect):
    return tuple(float(r) for r in rect)


def bilinear_sample(tex, uv, rect=(-1.0, 1.0, -1.0, 1.0)):
    tex = np.ascontiguousarray(tex, dtype=np.float64)
    if tex.ndim == 2:
        return _impl.bilinear_sample(tex[..., None].copy(), np.ascontiguousarray(uv, dtype=np.float64), _rect(rect))[:, 0]
    return _impl.bilinear_sample(tex, np.ascontiguousarray(uv, dtype=np.float64), _rect(rect))


def bilinear_grad_uv(tex, uv, grad_out, rect=(-1.0, 1.0, -1.0, 1.0)):
    tex = np.ascontiguousarray(tex, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if tex.ndim == 2:
        tex = tex[..., None].copy()
        grad_out = grad_out.reshape(-1, 1)
    return _impl.bilinear_grad_uv(tex, np.ascontiguousarray(uv, dtype=np.float64), _rect(rect),
                                  np.ascontiguousarray(grad_out))


def splat_max(values, uv, G, rect=(-1.0, 1.0, -1.0, 1.0)):
    return _impl.splat_max(np.ascontiguousarray(values, dtype=np.float64),
                           np.ascontiguousarray(uv, dtype=np.float64), int(G), _rect(rect))


def pull_push_pass(img, known):
    return _impl.pull_push_pass(np.ascontiguousarray(img, dtype=np.float64),
                                np.ascontiguousarray(known, dtype=bool))
