"""Hot evaluation kernels with a compiled core and a numpy fallback.

The Cython extension ``heatnet.kernels._core`` implements the inner loops
called once per solver iteration (constraint residual + Jacobian fill for
the transcribed horizon problems, thermal state-matrix assembly). When the
extension is unavailable, or ``HEATNET_PURE_KERNELS`` is set, the
numpy implementation in ``_pure`` is used instead; both expose the same
functions and produce identical values to rounding.
"""

import os

if os.environ.get("HEATNET_PURE_KERNELS"):
    from . import _pure as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _pure as _impl

        BACKEND = "python"

fill_constraints = _impl.fill_constraints
fill_lagrangian_hessian = _impl.fill_lagrangian_hessian
thermal_ab = _impl.thermal_ab
ip_qp_core = _impl.ip_qp_core
