'''
Baselines and metrics for the imputation and prediction tasks, plus the
CSV writers for reports, plot-ready series and loss logs.

Errors are reported as MSE% in normalized units, `100 * mean((pred - truth)^2)`
after scaling both with the record's min-max statistics, and as RMSE in
engineering units.
'''
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import config
from .exceptions import ContractError, EmptyRecordError, ShapeError
from .griddata import Dataset, NormStats, Record, normalize_values
from .helpers import check_strictly_increasing
from .lode import LodeModel, LossRecord, condition_window, impute, predict
from .odesolve import SolverConfig
from .types import ArrayLike, FloatArray, PathLike, Task

_logger = logging.getLogger(__name__)

SERIES_COLUMNS = ['time_min', 'truth', 'observed', 'imputed', 'baseline']
LOSS_LOG_COLUMNS = ['iteration', 'neg_elbo', 'mse_pct', 'test_neg_elbo', 'test_mse_pct']


def linear_interp(times: ArrayLike, values: ArrayLike, mask: ArrayLike, query_times: ArrayLike) -> FloatArray:
    '''
    Piecewise-linear interpolation between observed points, holding the
    nearest observed value before the first and after the last observation.

    Raises:
        EmptyRecordError: if nothing is observed

    Example:
        ```python
        from grid_lode.evaluation import linear_interp

        print(linear_interp([0, 10], [0, 10], [1, 1], [5, 20]))  # [ 5. 10.]
        ```
    '''
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    observed = np.asarray(mask) == 1
    if not observed.any():
        raise EmptyRecordError('linear_interp needs at least one observed point')
    return np.interp(np.asarray(query_times, dtype=np.float64), t[observed], v[observed])


def hold_last(times: ArrayLike, values: ArrayLike, mask: ArrayLike, query_times: ArrayLike) -> FloatArray:
    '''Constant predictor repeating the last observed value'''
    v = np.asarray(values, dtype=np.float64)
    observed = np.flatnonzero(np.asarray(mask) == 1)
    if observed.size == 0:
        raise EmptyRecordError('hold_last needs at least one observed point')
    return np.full(len(np.atleast_1d(query_times)), v[observed[-1]])


def mse_percent(pred: ArrayLike, truth: ArrayLike, eval_mask: Optional[ArrayLike] = None) -> float:
    '''
    `100 * mean((pred - truth)^2)` over the entries selected by `eval_mask`.
    Inputs are expected in normalized units.

    Raises:
        ShapeError: if the shapes differ
        ContractError: if no entry is selected
    '''
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f'prediction shape {p.shape} does not match truth shape {t.shape}')
    sel = np.ones(p.shape, dtype=bool) if eval_mask is None else np.asarray(eval_mask) == 1
    if sel.shape != p.shape:
        raise ShapeError(f'eval_mask shape {sel.shape} does not match {p.shape}')
    if not sel.any():
        raise ContractError('mse_percent needs at least one selected entry')
    return float(100.0 * np.mean(np.square(p[sel] - t[sel])))


@dataclass
class RecordScore:
    node_id: str
    measurement_type: str
    n_points: int
    lode_mse_pct: float
    baseline_mse_pct: float
    lode_rmse: float
    baseline_rmse: float


@dataclass
class EvalReport:
    '''
    Per-record and aggregate errors of the model and its baseline on one task.

    The aggregate MSE% is the mean of the per-record values weighted by the
    number of evaluated points.
    '''
    task: Task
    records: List[RecordScore]
    baseline: str
    runtime_s: float = 0.0
    extrapolation: bool = False
    config: Dict[str, Any] = field(default_factory=dict)
    loss_log: Optional[List[LossRecord]] = None
    series: Dict[Tuple[str, str], pd.DataFrame] = field(default_factory=dict, repr=False)

    def _weighted(self, attr: str) -> float:
        weights = np.array([r.n_points for r in self.records], dtype=np.float64)
        if weights.sum() == 0:
            return float('nan')
        return float(np.average([getattr(r, attr) for r in self.records], weights=weights))

    @property
    def lode_mse_pct(self) -> float:
        return self._weighted('lode_mse_pct')

    @property
    def baseline_mse_pct(self) -> float:
        return self._weighted('baseline_mse_pct')

    def to_frame(self) -> pd.DataFrame:
        '''One row per record plus an `ALL` row with the weighted aggregate'''
        rows = [vars(r).copy() for r in self.records]
        rows.append({
            'node_id': 'ALL',
            'measurement_type': '',
            'n_points': sum(r.n_points for r in self.records),
            'lode_mse_pct': self.lode_mse_pct,
            'baseline_mse_pct': self.baseline_mse_pct,
            'lode_rmse': float(np.sqrt(self._weighted_square('lode_rmse'))),
            'baseline_rmse': float(np.sqrt(self._weighted_square('baseline_rmse'))),
        })
        frame = pd.DataFrame(rows)
        frame.insert(0, 'task', self.task)
        frame['baseline'] = self.baseline
        frame['extrapolation'] = int(self.extrapolation)
        return frame

    def _weighted_square(self, attr: str) -> float:
        weights = np.array([r.n_points for r in self.records], dtype=np.float64)
        if weights.sum() == 0:
            return float('nan')
        return float(np.average([getattr(r, attr) ** 2 for r in self.records], weights=weights))

    def save(self, path: PathLike):
        self.to_frame().to_csv(path, index=False, lineterminator='\n')
        _logger.info(f'wrote {self.task} report to {path}')


def _targets(dataset: Dataset, node_ids: Optional[Iterable[str]]) -> List[Record]:
    subset = dataset.select(node_ids=node_ids, measurement_types=('P', 'Q'))
    if not subset.records:
        raise ContractError('no smart-meter records to evaluate (is the held-out node set empty?)')
    return list(subset.records)


def record_stats(record: Record) -> NormStats:
    '''Min-max statistics of the observed values of a record'''
    _, observed = record.observed()
    if observed.size == 0:
        raise EmptyRecordError(f'record {record.key} has no observed values')
    return NormStats(float(observed.min()), float(observed.max()))


def _truth_series(truth: Dataset, record: Record) -> Record:
    try:
        return truth.records[truth.index(record.node_id, record.measurement_type)]
    except KeyError as e:
        raise ContractError(f'no truth series for record {record.key}') from e


def _score(record: Record, stats: NormStats, truth: FloatArray, lode: FloatArray, base: FloatArray) -> RecordScore:
    t_norm = normalize_values(truth, stats)
    return RecordScore(
        record.node_id, record.measurement_type, len(truth),
        mse_percent(normalize_values(lode, stats), t_norm),
        mse_percent(normalize_values(base, stats), t_norm),
        float(np.sqrt(np.mean(np.square(lode - truth)))),
        float(np.sqrt(np.mean(np.square(base - truth)))),
    )


def _series_frame(
    query: FloatArray, truth: FloatArray, record: Record, lode: FloatArray, base: FloatArray
) -> pd.DataFrame:
    observed = np.full(len(query), np.nan)
    idx = np.searchsorted(record.times, query)
    inside = idx < len(record.times)
    hit = np.zeros(len(query), dtype=bool)
    hit[inside] = (record.times[idx[inside]] == query[inside]) & (record.mask[idx[inside]] == 1)
    observed[hit] = record.values[idx[hit]]
    return pd.DataFrame({'time_min': query, 'truth': truth, 'observed': observed, 'imputed': lode, 'baseline': base})


@config.default_params
def evaluate_imputation(
    model: LodeModel,
    dataset: Dataset,
    truth: Dataset,
    node_ids: Optional[Sequence[str]] = None,
    solver: Optional[SolverConfig] = None
) -> EvalReport:
    '''
    Impute smart-meter records at the truth resolution and compare the model
    with linear interpolation on identical inputs.

    Args:
        model: a trained model
        dataset: observed records in engineering units
        truth: fully observed truth records (eg: from `FeederTruth.to_dataset`)
        node_ids: nodes to evaluate, usually the held-out ones. Defaults to all
        solver: solver settings

    Raises:
        ContractError: if there is nothing to evaluate or a truth series is missing
    '''
    started = time.perf_counter()
    scores, series = [], {}
    for rec in _targets(dataset, node_ids):
        stats = record_stats(rec)
        true_rec = _truth_series(truth, rec)
        query = true_rec.times[true_rec.times >= rec.times[0]]
        target = true_rec.values[true_rec.times >= rec.times[0]]
        lode = impute(model, rec, query, stats=stats, solver=solver)
        base = linear_interp(rec.times, rec.values, rec.mask, query)
        scores.append(_score(rec, stats, target, lode, base))
        series[rec.key] = _series_frame(query, target, rec, lode, base)
        last = scores[-1]
        _logger.debug(f'imputed {rec.key}: lode {last.lode_mse_pct:.4f}%, linear {last.baseline_mse_pct:.4f}%')

    report = EvalReport('imputation', scores, 'linear_interp', time.perf_counter() - started, series=series)
    _logger.info(
        f'imputation on {len(scores)} records: lode {report.lode_mse_pct:.4f}%, '
        f'linear {report.baseline_mse_pct:.4f}% ({report.runtime_s:.1f}s)'
    )
    return report


@config.default_params
def evaluate_prediction(
    model: LodeModel,
    dataset: Dataset,
    truth: Dataset,
    node_ids: Optional[Sequence[str]] = None,
    split_min: float = 720.0,
    horizon_times: Optional[ArrayLike] = None,
    solver: Optional[SolverConfig] = None
) -> EvalReport:
    '''
    Condition on each record up to `split_min`, predict the rest and compare
    the model with the hold-last constant predictor.

    Args:
        model: a trained model
        dataset: observed records in engineering units
        truth: fully observed truth records
        node_ids: nodes to evaluate. Defaults to all
        split_min: end of the conditioning window (minutes)
        horizon_times: prediction times, all after `split_min`. Defaults to the
            truth times after `split_min`. Times past the data are allowed and
            flag the report as an extrapolation; only times with truth are scored
        solver: solver settings
    '''
    started = time.perf_counter()
    scores, series = [], {}
    extrapolation = False
    for rec in _targets(dataset, node_ids):
        stats = record_stats(rec)
        true_rec = _truth_series(truth, rec)
        window = condition_window(rec, split_min)
        if horizon_times is None:
            horizon = true_rec.times[true_rec.times > window.times[-1]]
        else:
            horizon = check_strictly_increasing(horizon_times, 'horizon_times')
        extrapolation = extrapolation or bool(horizon.size and horizon[-1] > true_rec.times[-1])

        lode = predict(model, window, horizon, stats=stats, solver=solver)
        base = hold_last(window.times, window.values, window.mask, horizon)
        scored = np.isin(horizon, true_rec.times)
        if not scored.any():
            _logger.warning(f'no truth inside the horizon of {rec.key}, skipping its score')
            continue
        target = true_rec.values[np.searchsorted(true_rec.times, horizon[scored])]
        scores.append(_score(rec, stats, target, lode[scored], base[scored]))
        series[rec.key] = _series_frame(horizon[scored], target, rec, lode[scored], base[scored])

    if extrapolation:
        _logger.warning('prediction horizon extends beyond the data, results are extrapolations')
    report = EvalReport(
        'prediction', scores, 'hold_last', time.perf_counter() - started, extrapolation,
        config={'split_min': split_min}, series=series
    )
    if scores:
        _logger.info(
            f'prediction on {len(scores)} records: lode {report.lode_mse_pct:.4f}%, '
            f'hold-last {report.baseline_mse_pct:.4f}%'
        )
    return report


def save_series(path: PathLike, frame: pd.DataFrame):
    '''Write one plot-ready series (`time_min,truth,observed,imputed,baseline`)'''
    frame[SERIES_COLUMNS].to_csv(path, index=False, lineterminator='\n', na_rep='')


def save_loss_log(path: PathLike, log: Sequence[LossRecord]):
    '''
    Write a training loss trace. The held-out columns are empty for
    iterations trained without a held-out set.
    '''
    rows = [[r.iteration, r.neg_elbo, r.mse_pct, r.test_neg_elbo, r.test_mse_pct] for r in log]
    frame = pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS).astype({c: 'float64' for c in LOSS_LOG_COLUMNS[1:]})
    frame.to_csv(path, index=False, lineterminator='\n', na_rep='')
