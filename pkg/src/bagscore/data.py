"""Dataset ingestion, seeded splits, standardization and synthetic targets."""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import IngestionError, InvalidInputError

CONCRETE_COLUMNS = (
    "cement",
    "blast_furnace_slag",
    "fly_ash",
    "water",
    "superplasticizer",
    "coarse_aggregate",
    "fine_aggregate",
    "age",
    "compressive_strength",
)
CONCRETE_ROWS = 1030
CONCRETE_SHA256 = "431e0b0b8bab99794c905cb45440a089c32c8f6d14bfd2602d1449727db92222"

# Stream tags keep the data split independent from other uses of the same seed.
SPLIT_STREAM = 0


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...]
    target_name: str = "target"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != y.shape[0]:
            raise InvalidInputError(f"{x.shape[0]} feature rows but {y.shape[0]} targets")
        if x.shape[1] != len(self.feature_names):
            raise InvalidInputError(
                f"{x.shape[1]} feature columns but {len(self.feature_names)} names"
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidInputError("dataset contains non-finite values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_rows(self) -> int:
        return self.targets.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[idx], self.targets[idx], self.feature_names, self.target_name)


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def bundled_concrete_path() -> Path:
    return Path(str(resources.files("bagscore") / "data" / "concrete.csv"))


def load_csv_dataset(path: Union[str, Path], n_columns: Optional[int] = None) -> Dataset:
    """Read a header + numeric-rows CSV; the last column is the target.

    Blank lines are skipped. Rows are reported 1-based, counting data rows
    only (the header is row 0).
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"cannot read dataset {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next((r for r in reader if any(c.strip() for c in r)), None)
        if header is None:
            raise IngestionError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        if n_columns is not None and len(header) != n_columns:
            raise IngestionError(
                f"{path}: expected {n_columns} columns, header has {len(header)}", row=0
            )
        if len(header) < 2:
            raise IngestionError(f"{path}: need at least one feature and one target column", row=0)
        rows = []
        for cells in reader:
            if not any(c.strip() for c in cells):
                continue
            row_no = len(rows) + 1
            if len(cells) != len(header):
                raise IngestionError(
                    f"{path}: row {row_no} has {len(cells)} columns, expected {len(header)}",
                    row=row_no,
                )
            parsed = []
            for col, cell in enumerate(cells):
                try:
                    value = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}: non-numeric cell {cell!r} at row {row_no}, "
                        f"column {col + 1} ({header[col]})",
                        row=row_no,
                        column=col + 1,
                    ) from None
                if not math.isfinite(value):
                    raise IngestionError(
                        f"{path}: non-finite cell at row {row_no}, column {col + 1} ({header[col]})",
                        row=row_no,
                        column=col + 1,
                    )
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    return Dataset(table[:, :-1], table[:, -1], tuple(header[:-1]), header[-1])


def load_concrete(path: Union[str, Path, None] = None) -> Dataset:
    """Load the Concrete compressive-strength table (8 features, MPa target).

    Without a path, the copy bundled with the package is used. A checksum
    differing from the pinned one only warns.
    """
    path = bundled_concrete_path() if path is None else Path(path)
    data = load_csv_dataset(path, n_columns=len(CONCRETE_COLUMNS))
    if data.n_rows != CONCRETE_ROWS:
        raise IngestionError(
            f"{path}: expected {CONCRETE_ROWS} data rows, found {data.n_rows}", row=data.n_rows
        )
    digest = file_sha256(path)
    if digest != CONCRETE_SHA256:
        warnings.warn(
            f"{path}: sha256 {digest} differs from the pinned Concrete file {CONCRETE_SHA256}",
            stacklevel=2,
        )
    return data


def write_csv_dataset(data: Dataset, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*data.feature_names, data.target_name])
        for x, y in zip(data.features, data.targets):
            w.writerow([repr(float(v)) for v in (*x, y)])


def _count(fraction: float, n: int) -> int:
    # Round half up so the result never depends on banker's rounding.
    return int(math.floor(fraction * n + 0.5))


def split_indices(
    n_rows: int, seed: int, fraction: float, stream: int = SPLIT_STREAM
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split into (kept, held-out) sorted index arrays.

    ``round(fraction * n_rows)`` indices are held out. Both parts must be
    non-empty.
    """
    if not 0 < fraction < 1:
        raise InvalidInputError(f"split fraction must lie in (0, 1), got {fraction}")
    if n_rows < 2:
        raise InvalidInputError(f"cannot split {n_rows} rows")
    n_out = _count(fraction, n_rows)
    if n_out == 0 or n_out == n_rows:
        raise InvalidInputError(
            f"fraction {fraction} of {n_rows} rows leaves an empty side of the split"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream])))
    perm = rng.permutation(n_rows)
    return np.sort(perm[n_out:]), np.sort(perm[:n_out])


def train_test_split(
    data: Dataset, seed: int, test_fraction: float = 0.1
) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(data.n_rows, seed, test_fraction)
    return data.subset(train_idx), data.subset(test_idx)


@dataclass(frozen=True)
class Scaler:
    """Per-column z-score transform; constant columns keep scale 1."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, values) -> "Scaler":
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape[0] < 2:
            raise InvalidInputError("need at least two rows to fit a scaler")
        mean = arr.mean(axis=0)
        scale = arr.std(axis=0, ddof=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(np.atleast_1d(mean), np.atleast_1d(scale))

    def apply(self, values) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64)
        return (arr - self._shaped(self.mean, arr)) / self._shaped(self.scale, arr)

    def invert(self, values) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64)
        return arr * self._shaped(self.scale, arr) + self._shaped(self.mean, arr)

    @staticmethod
    def _shaped(param: np.ndarray, arr: np.ndarray) -> np.ndarray:
        # A 1-column scaler acts elementwise on vectors of any shape.
        return param[0] if param.size == 1 else param


def fit_scaler(data: Dataset) -> tuple[Scaler, Scaler]:
    """Feature scaler and target scaler fitted on ``data``."""
    return Scaler.fit(data.features), Scaler.fit(data.targets)


def apply_scaler(scalers: tuple[Scaler, Scaler], data: Dataset) -> Dataset:
    fx, fy = scalers
    return Dataset(fx.apply(data.features), fy.apply(data.targets), data.feature_names, data.target_name)


def invert_scaler(scalers: tuple[Scaler, Scaler], data: Dataset) -> Dataset:
    fx, fy = scalers
    return Dataset(fx.invert(data.features), fy.invert(data.targets), data.feature_names, data.target_name)


# Synthetic ground truths

SYNTHETIC_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "xsin": lambda x: x * np.sin(x),
}


def register_function(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    SYNTHETIC_FUNCTIONS[name] = fn


@dataclass(frozen=True)
class SyntheticSpec:
    """One-dimensional regression problem with holes in the training sample.

    Gaps are open intervals; no training input falls strictly inside one.
    """

    function_id: str = "xsin"
    domain: tuple[float, float] = (-15.0, 15.0)
    n_train: int = 300
    noise_std: float = 0.0
    gap_intervals: tuple[tuple[float, float], ...] = field(default=((-7.5, -4.5),))

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        if not lo < hi:
            raise InvalidInputError(f"domain must be an increasing interval, got {self.domain}")
        if self.function_id not in SYNTHETIC_FUNCTIONS:
            raise InvalidInputError(f"unknown synthetic function {self.function_id!r}")
        if self.n_train < 10:
            raise InvalidInputError(f"n_train must be at least 10, got {self.n_train}")
        if self.noise_std < 0:
            raise InvalidInputError(f"noise_std must be non-negative, got {self.noise_std}")
        gaps = tuple(sorted((float(a), float(b)) for a, b in self.gap_intervals))
        for a, b in gaps:
            if not (lo <= a < b <= hi):
                raise InvalidInputError(f"gap ({a}, {b}) is not a sub-interval of {self.domain}")
        object.__setattr__(self, "domain", (lo, hi))
        object.__setattr__(self, "gap_intervals", gaps)

    def ground_truth(self, x):
        return SYNTHETIC_FUNCTIONS[self.function_id](np.asarray(x, dtype=np.float64))

    def in_gap(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        hit = np.zeros(x.shape, dtype=bool)
        for a, b in self.gap_intervals:
            hit |= (x > a) & (x < b)
        return hit

    def sampling_pieces(self) -> list[tuple[float, float]]:
        pieces, cursor = [], self.domain[0]
        for a, b in self.gap_intervals:
            if a > cursor:
                pieces.append((cursor, a))
            cursor = max(cursor, b)
        if cursor < self.domain[1]:
            pieces.append((cursor, self.domain[1]))
        return pieces


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Sample ``n_train`` inputs uniformly outside the gaps, targets f(x) + noise."""
    pieces = spec.sampling_pieces()
    lengths = np.array([b - a for a, b in pieces])
    if not pieces or lengths.sum() <= 0:
        raise InvalidInputError("gaps cover the whole domain; nothing to sample")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), SPLIT_STREAM])))
    u = rng.uniform(0.0, lengths.sum(), size=spec.n_train)
    edges = np.concatenate([[0.0], np.cumsum(lengths)])
    which = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, len(pieces) - 1)
    starts = np.array([a for a, _ in pieces])
    x = np.minimum(starts[which] + (u - edges[which]), np.array([b for _, b in pieces])[which])
    y = spec.ground_truth(x)
    if spec.noise_std > 0:
        y = y + rng.normal(0.0, spec.noise_std, size=x.shape)
    return Dataset(x[:, None], y, ("x",), "y")


def parse_gaps(items: Sequence[str]) -> tuple[tuple[float, float], ...]:
    """Parse ``"a:b"`` strings into interval tuples."""
    gaps = []
    for item in items:
        try:
            a, b = (float(v) for v in item.split(":"))
        except ValueError:
            raise InvalidInputError(f"gap {item!r} is not of the form LOW:HIGH") from None
        gaps.append((a, b))
    return tuple(gaps)
