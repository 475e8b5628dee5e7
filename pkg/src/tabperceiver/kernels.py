"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy versions in ``_kernels_py`` are used. Setting
``TABPERCEIVER_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

python_backend = _kernels_py

compiled_backend = None
if os.environ.get("TABPERCEIVER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend

BACKEND = _active.BACKEND
scatter_add_rows = _active.scatter_add_rows
ple_encode_batch = _active.ple_encode_batch
auc_mann_whitney = _active.auc_mann_whitney
bootstrap_aucs = _active.bootstrap_aucs
