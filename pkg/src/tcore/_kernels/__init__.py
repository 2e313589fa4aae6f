"""Hot loops of seed sifting, compiled when possible.

The Cython extension ``_ckernels`` is used when it was built; otherwise the
pure-Python ``_pykernels`` fallback is selected.  Setting the environment
variable ``TCORE_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels as python

native = None
if os.environ.get("TCORE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as native
    except ImportError:  # extension not built
        native = None

_impl = native if native is not None else python
BACKEND = "cython" if native is not None else "python"

dbscan_labels = _impl.dbscan_labels
consistent_counts = _impl.consistent_counts

__all__ = ["BACKEND", "dbscan_labels", "consistent_counts", "native", "python"]
