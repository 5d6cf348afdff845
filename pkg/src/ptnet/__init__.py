"""Joint change captioning and change detection on a small numpy autodiff core.

Setting ``PTN_THREADS`` caps the BLAS worker threads used by numpy.
"""

import os as _os

__version__ = "0.1.0"


def _cap_threads():
    n = _os.environ.get("PTN_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        return None
    if n < 1:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


_thread_limit = _cap_threads()
