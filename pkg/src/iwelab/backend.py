"""Kernel backend selection.

The dense-layer forward/backward and the SGD update dominate runtime, so
they exist twice: a Cython extension (``iwelab._ckernels``) and a NumPy
fallback (``iwelab._kernels_np``).  The extension is preferred when it
imported cleanly; ``IWELAB_KERNELS=py`` or ``=ext`` forces a choice.

Floating-point results are backend-deterministic, not identical across
backends; artifacts record which backend produced them.
"""

from __future__ import annotations

import os

from .errors import ConfigError
from . import _kernels_np

_choice = os.environ.get("IWELAB_KERNELS", "auto").lower()
if _choice not in ("auto", "ext", "py"):
    raise ConfigError(f"IWELAB_KERNELS must be auto|ext|py, got {_choice!r}")

if _choice == "py":
    kernels = _kernels_np
else:
    try:
        from . import _ckernels as kernels  # type: ignore[no-redef]
    except ImportError:
        if _choice == "ext":
            raise ConfigError("compiled kernels requested but not available")
        kernels = _kernels_np


def backend_name() -> str:
    return kernels.NAME
