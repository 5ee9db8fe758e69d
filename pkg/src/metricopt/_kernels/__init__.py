"""Kernel backend selection.

Two interchangeable implementations of the dense-MLP primitives exist: a
compiled Cython module (`_core`) and a pure-NumPy fallback
(`_numpy_kernels`). They share names and signatures and agree to floating
point roundoff (~1e-12 relative), but are not bit-identical because the
summation orders differ. Determinism guarantees therefore hold per backend;
run manifests record which one was active.

Selection, checked at import time:

  METRICOPT_KERNELS=compiled  require the extension, raise if missing
  METRICOPT_KERNELS=python    force the NumPy fallback
  unset                       try the extension, fall back silently
"""

import os

_FUNCS = (
    "affine_fwd",
    "affine_bwd",
    "leaky_relu_fwd",
    "leaky_relu_bwd",
    "sigmoid_fwd",
    "sigmoid_bwd",
    "bn_train_fwd",
    "bn_train_bwd",
    "bn_eval_fwd",
    "bn_eval_bwd",
    "pairwise_sqdist",
)

_choice = os.environ.get("METRICOPT_KERNELS", "").strip().lower()
if _choice not in ("", "compiled", "python"):
    raise ImportError(
        f"METRICOPT_KERNELS={_choice!r} not understood; "
        "use 'compiled' or 'python' (or unset)"
    )

if _choice == "python":
    from . import _numpy_kernels as _impl

    BACKEND = "python"
elif _choice == "compiled":
    from . import _core as _impl  # noqa: F401  (raises if not built)

    BACKEND = "compiled"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        from . import _numpy_kernels as _impl

        BACKEND = "python"

globals().update({name: getattr(_impl, name) for name in _FUNCS})

__all__ = list(_FUNCS) + ["BACKEND"]
