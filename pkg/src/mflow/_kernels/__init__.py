"""MLP kernel backend, chosen at import.

The compiled extension ``_mlp`` is used when it was built; otherwise (or
when ``MFLOW_PURE_PYTHON=1``) the numpy implementation in ``mlp_py`` is.
Both expose ``forward(theta, sizes, x, t, jac)`` and
``backward(theta, sizes, x, t, g_out, g_jac)``.
"""

import os

from . import mlp_py

_compiled = None
if os.environ.get("MFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _mlp as _compiled
    except ImportError:  # extension not built
        _compiled = None

backend = _compiled if _compiled is not None else mlp_py
BACKEND_NAME = "compiled" if _compiled is not None else "python"


def available_backends():
    out = {"python": mlp_py}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def set_num_threads(n: int):
    """Thread count for the compiled kernels; a no-op for the numpy backend."""
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if _compiled is not None:
        _compiled.set_num_threads(int(n))
