"""Scan kernel selection: compiled extension if available, numpy fallback.

Set PROPRIO_PURE_PYTHON=1 to force the numpy path (useful for debugging
and for the benchmark baseline).
"""

import os

from . import scan_py

if os.environ.get("PROPRIO_PURE_PYTHON") == "1":
    scan_forward = scan_py.scan_forward
    scan_backward = scan_py.scan_backward
    BACKEND = "python"
else:
    try:
        from ._scan import scan_backward, scan_forward
        BACKEND = "cython"
    except ImportError:
        scan_forward = scan_py.scan_forward
        scan_backward = scan_py.scan_backward
        BACKEND = "python"

__all__ = ["scan_forward", "scan_backward", "BACKEND", "scan_py"]
