"""Kernel backend selection.

The compiled extension is used when it imports; setting the environment
variable ``FLOWMAPS_KERNELS=python`` forces the numpy fallback.
"""

import os

from . import _kernels_py

kernels = _kernels_py
name = "python"


def use(backend: str) -> str:
    """Switch kernels at runtime; returns the previously active backend."""
    global kernels, name
    previous = name
    if backend == "python":
        kernels, name = _kernels_py, "python"
    elif backend == "cython":
        from . import _kernels  # raises ImportError when not built

        kernels, name = _kernels, "cython"
    else:
        raise ValueError(f"unknown kernel backend {backend!r}")
    return previous


def available() -> list[str]:
    out = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        pass
    else:
        out.append("cython")
    return out


if os.environ.get("FLOWMAPS_KERNELS", "").lower() not in ("python", "numpy"):
    try:
        use("cython")
    except ImportError:
        pass
