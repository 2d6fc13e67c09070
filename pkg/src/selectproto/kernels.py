"""Backend selection for the episode-head kernels.

The compiled extension is used when it imports; setting
``SELECTPROTO_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("SELECTPROTO_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

pairwise_sqdist = _impl.pairwise_sqdist
pairwise_sqdist_backward = _impl.pairwise_sqdist_backward
proto_xent = _impl.proto_xent
segment_weighted_mean = _impl.segment_weighted_mean
segment_weighted_mean_backward = _impl.segment_weighted_mean_backward


def available_backends():
    """Return ``{name: module}`` for every backend importable in this process."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
