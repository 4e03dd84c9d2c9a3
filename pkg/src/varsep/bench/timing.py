"""Wall-clock measurement shared by the experiment drivers."""

from __future__ import annotations

import time

import numpy as np


def median_time(fn, repeats=5):
    """Run ``fn`` repeatedly; return its last result and the median seconds."""
    result, times = None, []
    for _ in range(max(1, int(repeats))):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return result, float(np.median(times))
