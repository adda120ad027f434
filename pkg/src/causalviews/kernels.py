"""Select the compiled or numpy kernel backend.

``CAUSALVIEWS_BACKEND`` may be ``auto`` (default), ``compiled`` or ``python``.
``compiled`` raises if the extension is missing rather than silently
falling back.
"""

from __future__ import annotations

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_choice = os.environ.get("CAUSALVIEWS_BACKEND", "auto").strip().lower()
if _choice not in {"auto", "compiled", "python"}:
    raise ImportError(f"CAUSALVIEWS_BACKEND must be auto, compiled or python, got {_choice!r}")

_impl = _kernels_py
BACKEND = "python"
if _choice != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _choice == "compiled":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")
    else:
        _impl = _compiled
        BACKEND = "compiled"

acausal_pair_sum = _impl.acausal_pair_sum
pair_shell_sum = _impl.pair_shell_sum
closure_bits = _impl.closure_bits


def implementations() -> dict:
    """Return every importable backend keyed by name (for benchmarks/tests)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        pass
    else:
        out["compiled"] = compiled
    return out
