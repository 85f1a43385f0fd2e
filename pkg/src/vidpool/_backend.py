"""Kernel backend selection.

The compiled ``_kernels`` extension is preferred when importable; the numpy
module ``_kernels_np`` is the fallback.  Set ``VIDPOOL_BACKEND`` to ``c``,
``python``, or ``auto`` (default) to override.  Both backends satisfy the
same contracts; results agree to float rounding (summation order differs).
"""

from __future__ import annotations

import os

_choice = os.environ.get("VIDPOOL_BACKEND", "auto")
if _choice not in ("auto", "c", "python"):
    raise ImportError(f"VIDPOOL_BACKEND must be auto|c|python, got {_choice!r}")

if _choice == "python":
    from . import _kernels_np as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "c":
            raise
        from . import _kernels_np as _impl  # type: ignore[no-redef]

diag_log_joint = _impl.diag_log_joint
posteriors_from_log_joint = _impl.posteriors_from_log_joint
accumulate_stats = _impl.accumulate_stats


def backend_name() -> str:
    return _impl.BACKEND_NAME
