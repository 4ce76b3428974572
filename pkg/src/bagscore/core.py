"""Kernel-density aggregation of ensemble predictions.

The representative value of a prediction set is the location of the maximum
of a truncated Gaussian density estimate swept over a fixed grid; the height
of that maximum is the Bagging Score, a confidence value in (0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DegenerateSpreadError, InvalidBandwidthError, InvalidInputError

__all__ = [
    "PredictionSet",
    "KdeConfig",
    "DensityGrid",
    "BaggingResult",
    "population_std",
    "kernel",
    "estimate_density",
    "bagging_score",
    "aggregate_mean",
    "aggregate_median",
    "write_density_csv",
    "read_density_csv",
]

# Upper bound on grid-points x predictions evaluated in one vectorized block.
_BLOCK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class PredictionSet:
    """Raw outputs of every ensemble member for one input point."""

    values: np.ndarray
    source_seeds: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        values = _as_values(self.values)
        object.__setattr__(self, "values", values)
        if self.source_seeds is not None:
            seeds = tuple(int(s) for s in self.source_seeds)
            if len(seeds) != len(values):
                raise InvalidInputError(
                    f"source_seeds has {len(seeds)} entries for {len(values)} values"
                )
            object.__setattr__(self, "source_seeds", seeds)

    def __len__(self) -> int:
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


ArrayLike = Union[PredictionSet, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class KdeConfig:
    """Grid resolution, kernel width and window size, relative to the data.

    The grid step is ``(max - min) / grid_divisor``, the kernel bandwidth is
    ``sigma / bandwidth_divisor`` and only predictions within
    ``sigma * window_half_width_factor`` of a grid point contribute to it.
    """

    grid_divisor: int = 1000
    bandwidth_divisor: float = 6.0
    window_half_width_factor: float = 0.5

    def __post_init__(self):
        if isinstance(self.grid_divisor, bool) or int(self.grid_divisor) != self.grid_divisor:
            raise InvalidInputError(f"grid_divisor must be an integer, got {self.grid_divisor!r}")
        if self.grid_divisor <= 0:
            raise InvalidInputError(f"grid_divisor must be positive, got {self.grid_divisor}")
        if not self.bandwidth_divisor > 0:
            raise InvalidInputError(
                f"bandwidth_divisor must be positive, got {self.bandwidth_divisor}"
            )
        if not self.window_half_width_factor > 0:
            raise InvalidInputError(
                f"window_half_width_factor must be positive, got {self.window_half_width_factor}"
            )


@dataclass(frozen=True)
class DensityGrid:
    positions: np.ndarray
    densities: np.ndarray
    sigma: float
    step: float

    def __len__(self) -> int:
        return len(self.positions)

    def argmax(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest position on ties.
        return int(np.argmax(self.densities))


@dataclass(frozen=True)
class BaggingResult:
    representative: float
    score: float
    grid: Optional[DensityGrid] = field(default=None, repr=False, compare=False)


def _as_values(values: ArrayLike) -> np.ndarray:
    if isinstance(values, PredictionSet):
        return values.values
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise InvalidInputError("prediction set is empty")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise InvalidInputError(f"prediction set contains a non-finite value at index {bad}")
    return arr


def population_std(values: ArrayLike) -> float:
    """Standard deviation with divisor n."""
    arr = _as_values(values)
    return float(np.std(arr, ddof=0))


def kernel(x, x_mu, h_k: float):
    """Unnormalized Gaussian kernel, equal to 1 at zero distance."""
    if not h_k > 0:
        raise InvalidBandwidthError(f"kernel bandwidth must be positive, got {h_k}")
    d = np.subtract(x, x_mu, dtype=np.float64)
    out = np.exp(-(d * d) / (2.0 * h_k * h_k))
    return float(out) if np.ndim(out) == 0 else out


def _grid_positions(start: float, end: float, step: float) -> np.ndarray:
    # start + k * step for every k with start + k * step <= end.
    k_max = int(math.floor((end - start) / step))
    while start + (k_max + 1) * step <= end:
        k_max += 1
    while k_max > 0 and start + k_max * step > end:
        k_max -= 1
    return start + np.arange(k_max + 1, dtype=np.float64) * step


def estimate_density(values: ArrayLike, config: KdeConfig = KdeConfig()) -> DensityGrid:
    """Sweep the truncated kernel estimate over ``[min - sigma, max + sigma]``.

    Raises DegenerateSpreadError for sets without spread; use
    :func:`bagging_score`, which handles that case directly.
    """
    y = _as_values(values)
    lo, hi = float(y.min()), float(y.max())
    sigma = population_std(y)
    if y.size < 2 or hi == lo or sigma == 0.0:
        raise DegenerateSpreadError("prediction set has zero spread; no density grid exists")
    step = (hi - lo) / config.grid_divisor
    if step == 0.0:
        raise DegenerateSpreadError("grid step underflows to zero")

    positions = _grid_positions(lo - sigma, hi + sigma, step)
    h_k = sigma / config.bandwidth_divisor
    half = sigma * config.window_half_width_factor
    two_h2 = 2.0 * h_k * h_k

    densities = np.empty_like(positions)
    block = max(1, _BLOCK_ELEMENTS // y.size)
    for i in range(0, positions.size, block):
        p = positions[i : i + block, None]
        inside = (y >= p - half) & (y <= p + half)
        d = y - p
        weights = np.where(inside, np.exp(-(d * d) / two_h2), 0.0)
        densities[i : i + block] = weights.sum(axis=1) / y.size
    return DensityGrid(positions=positions, densities=densities, sigma=sigma, step=step)


def bagging_score(values: ArrayLike, config: KdeConfig = KdeConfig()) -> BaggingResult:
    """Return the density mode of the set and the density value there.

    A set whose members all agree returns that value with score exactly 1.
    """
    y = _as_values(values)
    if y.size == 1 or y.min() == y.max():
        return BaggingResult(representative=float(y[0]), score=1.0)
    try:
        grid = estimate_density(y, config)
    except DegenerateSpreadError:
        # Distinct values whose spread underflows float64 count as identical.
        return BaggingResult(representative=float(np.median(y)), score=1.0)
    k = grid.argmax()
    return BaggingResult(
        representative=float(grid.positions[k]),
        score=float(grid.densities[k]),
        grid=grid,
    )


def aggregate_mean(values: ArrayLike) -> float:
    return float(np.mean(_as_values(values)))


def aggregate_median(values: ArrayLike) -> float:
    # Even-sized sets average the two middle order statistics.
    return float(np.median(_as_values(values)))


def write_density_csv(grid: DensityGrid, path: Union[str, Path]) -> None:
    """Write ``position,density`` rows with 17 significant digits."""
    lines = ["position,density"]
    lines.extend(f"{p:.17g},{d:.17g}" for p, d in zip(grid.positions, grid.densities))
    Path(path).write_text("\n".join(lines) + "\n")


def read_density_csv(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].strip() != "position,density":
        raise InvalidInputError(f"{path}: missing 'position,density' header")
    data = np.array(
        [[float(v) for v in line.split(",")] for line in rows[1:] if line.strip()],
        dtype=np.float64,
    ).reshape(-1, 2)
    return data[:, 0], data[:, 1]
