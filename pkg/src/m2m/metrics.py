"""Poisson objective and count-forecast error metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import LossConfig
from .data import TASKS
from .tensor import Tensor

SMAPE_ZERO = 1e-9  # |y_hat| and |y| both below this: the term counts as a perfect forecast


class DomainError(ValueError):
    """Poisson loss evaluated at a nonpositive rate."""


class UndefinedMetricError(ValueError):
    """NMAE over labels that sum to zero."""


def poisson_loss(rate: Tensor, y) -> Tensor:
    """mean(rate - y * log(rate)) over all entries; constant log(y!) dropped."""
    if not isinstance(rate, Tensor):
        rate = Tensor(rate)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != rate.shape:
        raise ValueError(f"rate shape {rate.shape} != label shape {y.shape}")
    if rate.size == 0:
        raise ValueError("poisson loss of an empty batch")
    if np.any(rate.data <= 0):
        raise DomainError(f"Poisson rate must be positive, min is {rate.data.min():g}")
    return T.mean(T.sub(rate, T.mul(Tensor(y), T.log(rate))))


def regularizer(params) -> Tensor:
    return T.sum_squares(params) if params else Tensor(0.0)


def joint_loss(model, batch, cfg: LossConfig | None = None, rates: Tensor | None = None):
    """sum_t lambda_t L_t + alpha (||W1||^2 + ||W2||^2).

    Returns the scalar loss and the per-task Poisson losses as floats.
    """
    cfg = cfg or LossConfig()
    if len(batch) == 0:
        raise ValueError("joint loss of an empty batch")
    rates = model(batch) if rates is None else rates
    m = rates.shape[1]
    weights = cfg.weights(m)
    terms, per_task = [], []
    for t in range(m):
        col = T.reshape(T.gather_rows(T.transpose(rates), np.array([t])), (rates.shape[0],))
        lt = poisson_loss(col, batch.labels[:, t])
        per_task.append(lt.item())
        if weights[t]:
            terms.append(T.scale(lt, weights[t]))
    if cfg.reg_weight:
        gen, rest = model.parameter_groups()
        terms.append(T.scale(T.add(regularizer(gen), regularizer(rest)), cfg.reg_weight))
    total = T.add_n(terms) if terms else Tensor(0.0)
    return total, per_task


def _pair(y_hat, y) -> tuple[np.ndarray, np.ndarray]:
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {y_hat.size} predictions, {y.size} labels")
    return y_hat, y


def smape_terms(y_hat, y) -> np.ndarray:
    y_hat, y = _pair(y_hat, y)
    denom = (np.abs(y_hat) + np.abs(y)) / 2
    both_zero = (np.abs(y_hat) < SMAPE_ZERO) & (np.abs(y) < SMAPE_ZERO)
    out = np.zeros_like(y)
    ok = ~both_zero
    out[ok] = np.abs(y_hat[ok] - y[ok]) / denom[ok]
    return out


def smape(y_hat, y) -> float:
    terms = smape_terms(y_hat, y)
    if terms.size == 0:
        raise ValueError("SMAPE of an empty vector")
    return math.fsum(terms) / terms.size


def nmae(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y)
    total = math.fsum(y)
    if total <= 0:
        raise UndefinedMetricError("NMAE is undefined when the labels sum to zero")
    return math.fsum(np.abs(y_hat - y)) / total


@dataclass
class Cell:
    scenario: int
    task: int
    n: int
    nmae: float | None
    smape: float | None
    abs_err: float = 0.0  # sum |y_hat - y|, kept for pooling
    label_sum: float = 0.0


@dataclass
class MetricsReport:
    cells: list[Cell]
    n_scenarios: int
    n_tasks: int
    overall_nmae: float
    overall_smape: float
    macro_nmae: float
    macro_smape: float
    meta: dict = field(default_factory=dict)

    def cell(self, scenario: int, task: int) -> Cell:
        return self.cells[scenario * self.n_tasks + task]

    def scenario_nmae(self, scenario: int) -> float:
        """NMAE pooled over all tasks of one scenario."""
        cells = [c for c in self.cells if c.scenario == scenario and c.n]
        den = math.fsum(c.label_sum for c in cells)
        if not cells or den <= 0:
            raise UndefinedMetricError(f"no labelled test samples for scenario {scenario}")
        return math.fsum(c.abs_err for c in cells) / den

    def task_nmae(self, task: int) -> float:
        cells = [c for c in self.cells if c.task == task and c.n]
        return math.fsum(c.abs_err for c in cells) / math.fsum(c.label_sum for c in cells)

    def rows(self, scenario_names=None, task_names=None) -> list[dict]:
        out = []
        for c in self.cells:
            out.append(
                {
                    "scenario": scenario_names[c.scenario] if scenario_names else c.scenario,
                    "task": task_names[c.task] if task_names else c.task,
                    "nmae": "" if c.nmae is None else repr(c.nmae),
                    "smape": "" if c.smape is None else repr(c.smape),
                    "n": c.n,
                }
            )
        return out

    def to_csv(self, path, scenario_names=None, task_names=TASKS) -> None:
        with open(path, "w", newline="") as fh:
            for key in sorted(self.meta):
                fh.write(f"# {key}: {self.meta[key]}\n")
            fh.write(f"# overall_nmae: {self.overall_nmae!r}\n# overall_smape: {self.overall_smape!r}\n")
            fh.write(f"# macro_nmae: {self.macro_nmae!r}\n# macro_smape: {self.macro_smape!r}\n")
            w = csv.DictWriter(fh, fieldnames=["scenario", "task", "nmae", "smape", "n"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows(scenario_names, task_names))


def evaluate_predictions(pred, labels, scenario, n_scenarios: int, meta: dict | None = None) -> MetricsReport:
    """Per-(scenario, task) NMAE/SMAPE plus pooled and macro overall values.

    Cells without samples (or NMAE cells whose labels are all zero) carry None.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    scenario = np.asarray(scenario)
    if pred.shape != labels.shape or pred.ndim != 2:
        raise ValueError(f"prediction shape {pred.shape} does not match labels {labels.shape}")
    if len(pred) == 0:
        raise ValueError("cannot evaluate an empty test set")
    m = labels.shape[1]
    cells = []
    for s in range(n_scenarios):
        rows = scenario == s
        for t in range(m):
            yh, y = pred[rows, t], labels[rows, t]
            n = int(rows.sum())
            if n == 0:
                cells.append(Cell(s, t, 0, None, None))
                continue
            abs_err, lab = math.fsum(np.abs(yh - y)), math.fsum(y)
            cells.append(Cell(s, t, n, abs_err / lab if lab > 0 else None, smape(yh, y), abs_err, lab))
    filled = [c for c in cells if c.n]
    macro_n = [c.nmae for c in filled if c.nmae is not None]
    return MetricsReport(
        cells=cells,
        n_scenarios=n_scenarios,
        n_tasks=m,
        overall_nmae=nmae(pred, labels),
        overall_smape=smape(pred, labels),
        macro_nmae=math.fsum(macro_n) / len(macro_n) if macro_n else float("nan"),
        macro_smape=math.fsum(c.smape for c in filled) / len(filled),
        meta=dict(meta or {}),
    )


def evaluate(
    model, features, n_scenarios: int | None = None, chunk: int = 2048, meta: dict | None = None
) -> MetricsReport:
    n_scenarios = model.cfg.n_scenarios if n_scenarios is None else n_scenarios
    pred = model.predict(features, chunk)
    return evaluate_predictions(pred, features.labels, features.scenario, n_scenarios, meta)
