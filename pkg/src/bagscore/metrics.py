"""Regression error measures and the MEAN / MEDIAN / BS comparison report."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .core import KdeConfig, aggregate_mean, aggregate_median, bagging_score
from .errors import InvalidInputError, UndefinedVarianceError, ZeroTargetError

AGGREGATORS = ("MEAN", "MEDIAN", "BS")


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if t.shape != p.shape:
        raise InvalidInputError(f"length mismatch: {t.size} true values, {p.size} predictions")
    if t.size == 0:
        raise InvalidInputError("metrics need at least one value")
    return t, p


def r2(y_true, y_pred) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``; may be negative."""
    t, p = _pair(y_true, y_pred)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedVarianceError("true values are constant; R^2 is undefined")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


def rmse(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def mape(y_true, y_pred) -> float:
    """Mean absolute percentage error, in percent."""
    t, p = _pair(y_true, y_pred)
    zero = np.flatnonzero(t == 0)
    if zero.size:
        raise ZeroTargetError(int(zero[0]))
    return float(100.0 * np.mean(np.abs(t - p) / np.abs(t)))


def mae(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float(np.mean(np.abs(t - p)))


@dataclass(frozen=True)
class MetricRow:
    r2: float
    rmse: float
    mape: float
    mae: float


@dataclass(frozen=True)
class EvalReport:
    rows: dict[str, MetricRow]
    n_test: int
    predictions: dict[str, np.ndarray]
    scores: np.ndarray

    def __getitem__(self, aggregator: str) -> MetricRow:
        return self.rows[aggregator]

    def to_text(self) -> str:
        head = f"{'aggregator':<10} {'R2':>12} {'RMSE':>12} {'MAPE':>12} {'MAE':>12}"
        lines = [head, "-" * len(head)]
        for name, m in self.rows.items():
            lines.append(
                f"{name:<10} {m.r2:>12.6g} {m.rmse:>12.6g} {m.mape:>12.6g} {m.mae:>12.6g}"
            )
        lines.append(f"n_test = {self.n_test}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["aggregator,r2,rmse,mape,mae"]
        for name, m in self.rows.items():
            lines.append(f"{name},{m.r2!r},{m.rmse!r},{m.mape!r},{m.mae!r}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Union[str, Path], stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        txt, csv = out_dir / f"{stem}.txt", out_dir / f"{stem}.csv"
        txt.write_text(self.to_text())
        csv.write_text(self.to_csv())
        return txt, csv


def aggregate_rows(predictions: np.ndarray, config: KdeConfig = KdeConfig()):
    """Apply every aggregator to each row of an (n_rows, n_members) matrix.

    Returns ``({tag: values}, bs_scores)``.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    agg = {name: np.empty(preds.shape[0]) for name in AGGREGATORS}
    scores = np.empty(preds.shape[0])
    for i, row in enumerate(preds):
        try:
            bs = bagging_score(row, config)
            agg["MEAN"][i] = aggregate_mean(row)
            agg["MEDIAN"][i] = aggregate_median(row)
        except InvalidInputError as exc:
            raise InvalidInputError(f"test row {i}: {exc}") from exc
        agg["BS"][i] = bs.representative
        scores[i] = bs.score
    return agg, scores


def evaluate_aggregators(model, features, targets, config: KdeConfig = KdeConfig()) -> EvalReport:
    """Score MEAN, MEDIAN and BS aggregation of ``model`` on a test set.

    ``model`` only needs a ``predict(features)`` method returning one row of
    member predictions per input row.
    """
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise InvalidInputError("test set is empty")
    preds = np.asarray(model.predict(features), dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] != y.size:
        raise InvalidInputError(f"model returned shape {preds.shape} for {y.size} test rows")
    agg, scores = aggregate_rows(preds, config)
    rows = {}
    for name in AGGREGATORS:
        rows[name] = MetricRow(
            r2(y, agg[name]), rmse(y, agg[name]), mape(y, agg[name]), mae(y, agg[name])
        )
    return EvalReport(rows=rows, n_test=int(y.size), predictions=agg, scores=scores)


METRICS: dict[str, Callable] = {"r2": r2, "rmse": rmse, "mape": mape, "mae": mae}
