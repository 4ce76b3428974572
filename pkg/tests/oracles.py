"""Independent reference computations used by the tests.

Plain Python loops, no numpy, written directly from the definitions.
"""

import math


def brute_density(values, grid_divisor=1000, bandwidth_divisor=6.0, window=0.5):
    """Evaluate the truncated kernel density at every grid point with a double loop.

    Grid points are generated by counting steps from the lower end until the
    upper end is passed.
    """
    n = len(values)
    mean = sum(values) / n
    sigma = math.sqrt(sum((v - mean) ** 2 for v in values) / n)
    lo, hi = min(values), max(values)
    step = (hi - lo) / grid_divisor
    start, end = lo - sigma, hi + sigma
    h = sigma / bandwidth_divisor
    half = sigma * window
    positions, densities = [], []
    k = 0
    while start + k * step <= end:
        p = start + k * step
        total = 0.0
        for y in values:
            if y >= p - half and y <= p + half:
                total += math.exp(-((y - p) ** 2) / (2 * h**2))
        positions.append(p)
        densities.append(total / n)
        k += 1
    return positions, densities


def brute_argmax(densities):
    best = 0
    for i, d in enumerate(densities):
        if d > densities[best]:
            best = i
    return best
