'''
The measurement data model (records, masks, normalization, time-union
batching) and a synthetic multi-rate feeder data generator.

A `Record` is one sensor's time series. Unobserved entries have `mask == 0`
and carry `NaN` as a sentinel that models never read. Records collected on
one unified time grid form a `Dataset`.

```python
from grid_lode import griddata

spec = griddata.default_feeder()
truth = griddata.generate_profiles(spec, seed=42)
records = griddata.sample_multirate(truth, seed=42)
dataset = griddata.unify_time_grid(records)
print(len(dataset), len(dataset.times))  # 81 1440
```
'''
from __future__ import annotations

import configparser
import logging
import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import (ContractError, DatasetParseError, EmptyRecordError,
                         InfeasibleLoadingError, SchemaError)
from .helpers import check_strictly_increasing, rng_stream, sorted_union
from .types import (MEASUREMENT_TYPES, ArrayLike, FloatArray, LoadClass,
                    MaskArray, MeasurementType, PathLike)

_logger = logging.getLogger(__name__)

POWER_FACTOR = 0.9
'''Lagging power factor of every load'''
Q_PER_P = float(np.tan(np.arccos(POWER_FACTOR)))
'''Reactive to active power ratio, `tan(acos(0.9)) = 0.484322`'''
DAY_MINUTES = 1440
CSV_COLUMNS = ['node_id', 'measurement_type', 'time_min', 'value', 'mask']


@dataclass(frozen=True, eq=False)
class Record:
    '''
    One node's time series of one measurement type.

    Args:
        node_id: the feeder node the sensor sits at
        measurement_type: `'P'`, `'Q'` or `'V'`
        values: engineering units (kW, kvar or p.u.), `NaN` where unobserved
        times: minutes from midnight, strictly increasing
        mask: `1` where observed
    '''
    node_id: str
    measurement_type: MeasurementType
    values: FloatArray
    times: FloatArray
    mask: MaskArray

    def __post_init__(self):
        if self.measurement_type not in MEASUREMENT_TYPES:
            raise SchemaError(f'invalid measurement type {self.measurement_type!r}, must be one of {MEASUREMENT_TYPES}')
        values = np.array(self.values, dtype=np.float64)
        times = np.array(self.times, dtype=np.float64)
        raw_mask = np.asarray(self.mask)
        if not (values.ndim == times.ndim == raw_mask.ndim == 1) or not (len(values) == len(times) == len(raw_mask)):
            raise SchemaError(
                f'record {self.key}: values, times and mask must be 1-D of equal length, '
                f'got {values.shape}, {times.shape}, {raw_mask.shape}'
            )
        if not np.all((raw_mask == 0) | (raw_mask == 1)):
            raise SchemaError(f'record {self.key}: mask values must be 0 or 1')
        mask = raw_mask.astype(np.int8)
        try:
            check_strictly_increasing(times, f'record {self.key} times')
        except ContractError as e:
            raise SchemaError(str(e)) from e
        observed = mask == 1
        if not np.all(np.isfinite(values[observed])):
            raise SchemaError(f'record {self.key}: observed values must be finite')
        values = np.where(observed, values, np.nan)
        for name, arr in (('values', values), ('times', times), ('mask', mask)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, 'node_id', str(self.node_id))

    @property
    def key(self) -> Tuple[str, str]:
        return (str(self.node_id), self.measurement_type)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def __len__(self) -> int:
        return len(self.times)

    def observed(self) -> Tuple[FloatArray, FloatArray]:
        '''Times and values of the observed entries only'''
        sel = self.mask == 1
        return self.times[sel], self.values[sel]

    def equals(self, other: 'Record') -> bool:
        return (
            self.key == other.key
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass(frozen=True)
class NormStats:
    '''Per-record min-max statistics over observed values'''
    min: float
    max: float

    @property
    def range(self) -> float:
        return self.max - self.min


@dataclass(frozen=True, eq=False)
class Dataset:
    '''
    Records sharing one time grid.

    Args:
        records: the records, all on identical times
        norm_stats: one `NormStats` per record once normalized, else `None`
        metadata: free-form generation details (rates, noise level, seed)
    '''
    records: Tuple[Record, ...] = ()
    norm_stats: Optional[Tuple[NormStats, ...]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple(self.records))
        if self.records:
            grid = self.records[0].times
            for rec in self.records[1:]:
                if not np.array_equal(rec.times, grid):
                    raise SchemaError(
                        f'record {rec.key} is not on the shared time grid of record {self.records[0].key}'
                    )
        if self.norm_stats is not None:
            object.__setattr__(self, 'norm_stats', tuple(self.norm_stats))
            if len(self.norm_stats) != len(self.records):
                raise SchemaError(f'{len(self.norm_stats)} normalization stats for {len(self.records)} records')

    def __len__(self) -> int:
        return len(self.records)

    @property
    def times(self) -> FloatArray:
        return self.records[0].times if self.records else np.zeros(0)

    @property
    def normalized(self) -> bool:
        return self.norm_stats is not None

    @property
    def node_ids(self) -> List[str]:
        return _sorted_ids({r.node_id for r in self.records})

    def index(self, node_id: str, measurement_type: MeasurementType) -> int:
        for i, rec in enumerate(self.records):
            if rec.key == (str(node_id), measurement_type):
                return i
        raise KeyError(f'no record for node {node_id!r}, type {measurement_type!r}')

    def select(
        self,
        node_ids: Optional[Iterable[str]] = None,
        measurement_types: Optional[Iterable[MeasurementType]] = None
    ) -> 'Dataset':
        '''A dataset with the matching records (and their stats), in the original order'''
        ids = None if node_ids is None else {str(n) for n in node_ids}
        kinds = None if measurement_types is None else set(measurement_types)
        keep = [
            i for i, r in enumerate(self.records)
            if (ids is None or r.node_id in ids) and (kinds is None or r.measurement_type in kinds)
        ]
        stats = None if self.norm_stats is None else tuple(self.norm_stats[i] for i in keep)
        return Dataset(tuple(self.records[i] for i in keep), stats, dict(self.metadata))

    def batch_arrays(self, indices: Sequence[int]) -> Tuple[FloatArray, MaskArray]:
        '''
        Stack records into `(values, mask)` arrays of shape `len(indices) x n_times`.
        Unobserved values keep their `NaN` sentinel.
        '''
        if len(indices) == 0:
            raise ContractError('batch_arrays needs at least one record index')
        values = np.stack([self.records[i].values for i in indices])
        mask = np.stack([self.records[i].mask for i in indices])
        return values, mask

    def equals(self, other: 'Dataset') -> bool:
        return len(self) == len(other) and all(a.equals(b) for a, b in zip(self.records, other.records))


def _sorted_ids(ids: Iterable[str]) -> List[str]:
    return sorted(ids, key=lambda s: (0, int(s), s) if s.isdigit() else (1, 0, s))


# ---------------------------------------------------------------- feeder

@dataclass(frozen=True)
class FeederSpec:
    '''
    A radial feeder. Node 0 is the substation; every other node `j` hangs off
    `parents[j]` through a line with impedance `r[j] + 1j * x[j]` (p.u.).

    Args:
        parents: parent index per node, `None` for the root
        r: line resistance to the parent (p.u.), ignored for the root
        x: line reactance to the parent (p.u.), ignored for the root
        load_class: load profile class per node
        base_kw: nominal active power per node (kW)
        base_kva: system power base used for p.u. conversion
    '''
    parents: Tuple[Optional[int], ...]
    r: Tuple[float, ...]
    x: Tuple[float, ...]
    load_class: Tuple[LoadClass, ...]
    base_kw: Tuple[float, ...]
    base_kva: float = 5000.0

    def __post_init__(self):
        for name in ('parents', 'r', 'x', 'load_class', 'base_kw'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.parents)
        if n == 0:
            raise SchemaError('a feeder needs at least the substation node')
        if not (len(self.r) == len(self.x) == len(self.load_class) == len(self.base_kw) == n):
            raise SchemaError('parents, r, x, load_class and base_kw must have one entry per node')
        if self.parents[0] is not None or any(p is None for p in self.parents[1:]):
            raise SchemaError('node 0 must be the only root (parent None)')
        if not self.base_kva > 0:
            raise SchemaError(f'base_kva must be positive, not {self.base_kva}')
        for j in range(1, n):
            p = self.parents[j]
            if not 0 <= p < n or p == j:
                raise SchemaError(f'node {j}: invalid parent {p}')
            if not (self.r[j] > 0 and self.x[j] > 0):
                raise SchemaError(f'node {j}: line impedances must be positive')
        for j, cls in enumerate(self.load_class):
            if cls not in ('residential', 'commercial', 'substation'):
                raise SchemaError(f'node {j}: invalid load class {cls!r}')
            if self.base_kw[j] < 0:
                raise SchemaError(f'node {j}: base_kw must not be negative')
        # every node must reach the root, otherwise the graph has a cycle
        self.topological_order()

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def node_ids(self) -> List[str]:
        return [str(j) for j in range(self.n_nodes)]

    def children(self) -> List[List[int]]:
        out: List[List[int]] = [[] for _ in range(self.n_nodes)]
        for j, p in enumerate(self.parents):
            if p is not None:
                out[p].append(j)
        return out

    def topological_order(self) -> List[int]:
        '''Nodes ordered root first, each after its parent'''
        children = self.children()
        order, queue = [], [0]
        while queue:
            j = queue.pop(0)
            order.append(j)
            queue.extend(children[j])
        if len(order) != self.n_nodes:
            missing = sorted(set(range(self.n_nodes)) - set(order))
            raise SchemaError(f'feeder is not a connected tree, unreachable nodes: {missing}')
        return order

    def load_nodes(self) -> List[int]:
        return [j for j, c in enumerate(self.load_class) if c != 'substation']


_DEFAULT_PARENTS = (
    None, 0, 1, 2, 3, 4, 5, 6, 7, 8, 2, 10, 11, 4, 13, 14, 15, 6, 17, 18,
    8, 20, 21, 22, 9, 24, 25, 12, 27, 16, 29, 19, 31, 23, 33, 26, 35,
)


def default_feeder() -> FeederSpec:
    '''
    The 37-node radial test feeder: a substation plus 36 load nodes, every
    third of them commercial, the rest residential.
    '''
    n = len(_DEFAULT_PARENTS)
    r = [0.0] + [0.003 + 0.0005 * (j % 5) for j in range(1, n)]
    x = [0.0] + [0.7 * rj for rj in r[1:]]
    classes: List[LoadClass] = ['substation'] + [
        'commercial' if j % 3 == 0 else 'residential' for j in range(1, n)
    ]
    base_kw = [0.0] + [60.0 + 10.0 * (j % 5) for j in range(1, n)]
    return FeederSpec(_DEFAULT_PARENTS, tuple(r), tuple(x), tuple(classes), tuple(base_kw))


def save_feeder(path: PathLike, spec: FeederSpec):
    '''Write a feeder as a key-value text file (`[feeder]` plus one `[node N]` section per node)'''
    parser = configparser.ConfigParser()
    parser['feeder'] = {'base_kva': repr(float(spec.base_kva)), 'nodes': str(spec.n_nodes)}
    for j in range(spec.n_nodes):
        parent = spec.parents[j]
        parser[f'node {j}'] = {
            'parent': 'none' if parent is None else str(parent),
            'r': repr(float(spec.r[j])),
            'x': repr(float(spec.x[j])),
            'class': spec.load_class[j],
            'base_kw': repr(float(spec.base_kw[j])),
        }
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        parser.write(f)


def load_feeder(path: PathLike) -> FeederSpec:
    '''
    Read a feeder file written by `save_feeder`.

    Raises:
        FileNotFoundError: if the file does not exist
        SchemaError: if the file is malformed or describes an invalid feeder
    '''
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding='utf-8') as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise SchemaError(f'invalid feeder file {path}: {e}') from e

    base_kva = parser.getfloat('feeder', 'base_kva', fallback=5000.0)
    sections = [s for s in parser.sections() if s.startswith('node ')]
    try:
        indices = sorted(int(s.split()[1]) for s in sections)
    except ValueError as e:
        raise SchemaError(f'invalid node section name in {path}') from e
    if indices != list(range(len(indices))):
        raise SchemaError(f'node sections must be numbered 0..N-1 without gaps, got {indices}')

    parents, r, x, classes, base_kw = [], [], [], [], []
    for j in indices:
        sec = parser[f'node {j}']
        try:
            raw_parent = sec.get('parent', 'none').strip().lower()
            parents.append(None if raw_parent in ('none', '') else int(raw_parent))
            r.append(float(sec.get('r', '0')))
            x.append(float(sec.get('x', '0')))
            classes.append(sec.get('class', 'residential').strip())
            base_kw.append(float(sec.get('base_kw', '0')))
        except ValueError as e:
            raise SchemaError(f'node {j}: {e}') from e
    return FeederSpec(tuple(parents), tuple(r), tuple(x), tuple(classes), tuple(base_kw), base_kva)


# ---------------------------------------------------------------- truth generation

@dataclass(frozen=True, eq=False)
class FeederTruth:
    '''
    Noise-free per-node series at 1-minute resolution. Rows of `p`, `q` (kW,
    kvar) and `v` (p.u.) follow `node_ids`.
    '''
    node_ids: Tuple[str, ...]
    load_class: Tuple[LoadClass, ...]
    times: FloatArray
    p: FloatArray
    q: FloatArray
    v: FloatArray

    def __post_init__(self):
        shape = (len(self.node_ids), len(self.times))
        for name in ('p', 'q', 'v'):
            if getattr(self, name).shape != shape:
                raise SchemaError(f'truth {name} has shape {getattr(self, name).shape}, expected {shape}')

    def load_rows(self) -> List[int]:
        return [i for i, c in enumerate(self.load_class) if c != 'substation']

    def to_dataset(self) -> Dataset:
        '''Fully observed truth records: P and Q of load nodes, V of every node'''
        ones = np.ones(len(self.times), dtype=np.int8)
        records = []
        for i in self.load_rows():
            records.append(Record(self.node_ids[i], 'P', self.p[i], self.times, ones))
            records.append(Record(self.node_ids[i], 'Q', self.q[i], self.times, ones))
        for i, node in enumerate(self.node_ids):
            records.append(Record(node, 'V', self.v[i], self.times, ones))
        return Dataset(tuple(records), metadata={'kind': 'truth'})


def _bump(t: FloatArray, centre: float, width: float) -> FloatArray:
    return np.exp(-0.5 * ((t - centre) / width) ** 2)


def _logistic(v: FloatArray) -> FloatArray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _load_shape(load_class: LoadClass, t_min: FloatArray, rng: np.random.Generator) -> FloatArray:
    '''Dimensionless daily shape, roughly peaking near 1.5'''
    hours = t_min / 60.0
    if load_class == 'residential':
        morning = 7.5 + rng.uniform(-0.75, 0.75)
        evening = 19.0 + rng.uniform(-1.0, 1.0)
        amp_m, amp_e = rng.uniform(0.45, 0.65), rng.uniform(0.8, 1.1)
        return 0.4 + amp_m * _bump(hours, morning, 1.2) + amp_e * _bump(hours, evening, 1.8)
    if load_class == 'commercial':
        opens = 8.0 + rng.uniform(-0.5, 0.5)
        closes = 18.0 + rng.uniform(-0.5, 0.5)
        amp = rng.uniform(0.9, 1.2)
        return 0.3 + amp * _logistic((hours - opens) / 0.6) * _logistic((closes - hours) / 0.6)
    return np.zeros_like(t_min)


def lindistflow_voltages(spec: FeederSpec, p_pu: ArrayLike, q_pu: ArrayLike) -> FloatArray:
    '''
    Node voltage magnitudes from the linearized branch-flow model:
    `V_j^2 = V_parent^2 - 2 (r_j P_j + x_j Q_j)` where `P_j`, `Q_j` are the
    flows into node `j` (its own load plus everything downstream). The
    substation is held at 1.0 p.u.

    Args:
        spec: the feeder
        p_pu: active loads in p.u., shape `n_nodes` or `n_nodes x n_times`
        q_pu: reactive loads in p.u., same shape

    Returns:
        Voltages (p.u.) with the shape of the loads

    Raises:
        InfeasibleLoadingError: if a squared voltage is not positive
    '''
    p = np.asarray(p_pu, dtype=np.float64)
    q = np.asarray(q_pu, dtype=np.float64)
    vector = p.ndim == 1
    if vector:
        p, q = p[:, None], q[:, None]
    if p.shape != q.shape or p.shape[0] != spec.n_nodes:
        raise SchemaError(f'load shapes {p.shape}, {q.shape} do not match {spec.n_nodes} nodes')

    order = spec.topological_order()
    p_flow, q_flow = p.copy(), q.copy()
    for j in reversed(order[1:]):
        parent = spec.parents[j]
        p_flow[parent] += p_flow[j]
        q_flow[parent] += q_flow[j]

    v_sq = np.empty_like(p)
    v_sq[0] = 1.0
    for j in order[1:]:
        v_sq[j] = v_sq[spec.parents[j]] - 2.0 * (spec.r[j] * p_flow[j] + spec.x[j] * q_flow[j])
        bad = np.flatnonzero(v_sq[j] <= 0)
        if bad.size:
            raise InfeasibleLoadingError(
                f'squared voltage {v_sq[j][bad[0]]:.4g} <= 0, loading too heavy for the feeder', j, int(bad[0])
            )
    v = np.sqrt(v_sq)
    return v[:, 0] if vector else v


def generate_profiles(spec: FeederSpec, day_minutes: int = DAY_MINUTES, seed: int = 0) -> FeederTruth:
    '''
    Synthesize 1-minute truth series for every node: residential loads get a
    morning and an evening peak, commercial loads a midday plateau, and
    `Q = P * tan(acos(0.9))`. Voltages come from `lindistflow_voltages`.

    Args:
        spec: the feeder
        day_minutes: horizon length in minutes
        seed: run seed (uses the `data` stream for profile jitter)
    '''
    if day_minutes < 1:
        raise ContractError(f'day_minutes must be positive, not {day_minutes}')
    rng = rng_stream(seed, 'data')
    times = np.arange(day_minutes, dtype=np.float64)
    p = np.zeros((spec.n_nodes, day_minutes))
    for j in range(spec.n_nodes):
        # draw jitter for every node so one node's class never shifts another's stream
        shape = _load_shape(spec.load_class[j], times, rng)
        p[j] = spec.base_kw[j] * shape
    q = p * Q_PER_P
    v = lindistflow_voltages(spec, p / spec.base_kva, q / spec.base_kva)
    _logger.info(
        f'generated {day_minutes} min of truth for {spec.n_nodes} nodes, '
        f'V range [{v.min():.4f}, {v.max():.4f}] p.u.'
    )
    return FeederTruth(tuple(spec.node_ids), spec.load_class, times, p, q, v)


# ---------------------------------------------------------------- sampling

def scada_nodes(node_ids: Sequence[str], every: int = 4) -> List[str]:
    '''Node ids carrying a SCADA voltage sensor: every `every`-th node after the substation'''
    if every < 1:
        raise ContractError(f'scada_every must be at least 1, not {every}')
    return [n for i, n in enumerate(node_ids) if i > 0 and i % every == 0]


def _block_average(series: FloatArray, rate: int) -> FloatArray:
    return series.reshape(-1, rate).mean(axis=1)


def sample_multirate(
    truth: FeederTruth,
    smart_meter_rate: int = 15,
    scada_rate: int = 1,
    noise_frac: float = 0.10,
    missing_prob: float = 0.05,
    seed: int = 0,
    scada_every: int = 4,
    voltage_nodes: Optional[Sequence[str]] = None
) -> List[Record]:
    '''
    Turn truth series into sensor records.

    Smart meters report P and Q of every load node as averages over
    `smart_meter_rate`-minute windows (stamped at the window start) with
    Gaussian noise of standard deviation `noise_frac * |value|`. SCADA reports
    noise-free voltage samples every `scada_rate` minutes at `voltage_nodes`.
    Each observation is then dropped independently with `missing_prob`.

    Args:
        truth: the 1-minute truth
        smart_meter_rate: P/Q averaging interval (minutes)
        scada_rate: voltage sampling interval (minutes)
        noise_frac: relative noise level of P/Q
        missing_prob: per-observation dropout probability
        seed: run seed (`noise` and `dropout` streams)
        scada_every: sensor spacing used when `voltage_nodes` is not given
        voltage_nodes: explicit SCADA node ids

    Raises:
        ContractError: if a rate does not divide the horizon or a probability is out of range
    '''
    horizon = len(truth.times)
    for name, rate in (('smart_meter_rate', smart_meter_rate), ('scada_rate', scada_rate)):
        if rate < 1 or horizon % rate:
            raise ContractError(f'{name}={rate} must be a positive divisor of the {horizon} min horizon')
    if not 0 <= missing_prob < 1:
        raise ContractError(f'missing_prob must be in [0, 1), not {missing_prob}')
    if noise_frac < 0:
        raise ContractError(f'noise_frac must not be negative, not {noise_frac}')

    noise_rng = rng_stream(seed, 'noise')
    dropout_rng = rng_stream(seed, 'dropout')
    meter_times = truth.times[::smart_meter_rate]
    scada_times = truth.times[::scada_rate]
    if voltage_nodes is None:
        voltage_nodes = scada_nodes(truth.node_ids, scada_every)
    sensors = set(map(str, voltage_nodes))

    def dropout(n: int) -> MaskArray:
        if missing_prob == 0:
            return np.ones(n, dtype=np.int8)
        return (dropout_rng.random(n) >= missing_prob).astype(np.int8)

    records: List[Record] = []
    for i in truth.load_rows():
        node = truth.node_ids[i]
        for kind, series in (('P', truth.p[i]), ('Q', truth.q[i])):
            clean = _block_average(series, smart_meter_rate)
            noisy = clean + noise_rng.normal(0.0, 1.0, size=clean.shape) * (noise_frac * np.abs(clean))
            mask = dropout(len(clean))
            records.append(Record(node, kind, np.where(mask == 1, noisy, np.nan), meter_times, mask))
    for i, node in enumerate(truth.node_ids):
        if node not in sensors:
            continue
        samples = truth.v[i, ::scada_rate]
        mask = dropout(len(samples))
        records.append(Record(node, 'V', np.where(mask == 1, samples, np.nan), scada_times, mask))

    n_obs = sum(r.n_observed for r in records)
    _logger.info(f'sampled {len(records)} records ({n_obs} observations) from {len(truth.node_ids)} nodes')
    return records


# ---------------------------------------------------------------- grid / normalization

def unify_time_grid(records: Union[Sequence[Record], Dataset]) -> Dataset:
    '''
    Re-express records on the sorted union of all their times. Each record
    keeps its own mask at its original times and is unobserved everywhere else.
    '''
    if isinstance(records, Dataset):
        records = records.records
    grid = sorted_union(r.times for r in records)
    out = []
    for rec in records:
        idx = np.searchsorted(grid, rec.times)
        values = np.full(len(grid), np.nan)
        mask = np.zeros(len(grid), dtype=np.int8)
        values[idx] = rec.values
        mask[idx] = rec.mask
        out.append(Record(rec.node_id, rec.measurement_type, values, grid, mask))
    return Dataset(tuple(out))


def compact_grid(dataset: Dataset) -> Dataset:
    '''
    Drop the grid times at which no record is observed. Masks, values and
    normalization statistics are kept for the remaining times, so a
    smart-meter-only selection of a unified dataset goes back to its
    meter grid.
    '''
    if not dataset.records:
        return dataset
    keep = np.any(np.stack([rec.mask == 1 for rec in dataset.records]), axis=0)
    if keep.all() or not keep.any():
        return dataset
    records = tuple(
        Record(rec.node_id, rec.measurement_type, rec.values[keep], rec.times[keep], rec.mask[keep])
        for rec in dataset.records
    )
    _logger.debug(f'compacted grid from {len(keep)} to {int(keep.sum())} times')
    return Dataset(records, dataset.norm_stats, dict(dataset.metadata))


def meter_records(dataset: Dataset, node_ids: Optional[Iterable[str]] = None) -> Dataset:
    '''The smart-meter (`P` and `Q`) records of `node_ids`, on the times they observe'''
    return compact_grid(dataset.select(node_ids=node_ids, measurement_types=('P', 'Q')))


def normalize(dataset: Dataset) -> Dataset:
    '''
    Min-max scale each record's observed values to [0, 1]. A record whose
    observed values are all equal maps to 0.

    Raises:
        EmptyRecordError: if a record has no observed values
        ContractError: if the dataset is already normalized
    '''
    if dataset.normalized:
        raise ContractError('dataset is already normalized')
    stats, records = [], []
    for rec in dataset.records:
        _, observed = rec.observed()
        if observed.size == 0:
            raise EmptyRecordError(f'record {rec.key} has no observed values')
        st = NormStats(float(observed.min()), float(observed.max()))
        if st.range == 0:
            _logger.warning(f'record {rec.key} has zero range, normalizing to 0')
            scaled = np.where(rec.mask == 1, 0.0, np.nan)
        else:
            scaled = (rec.values - st.min) / st.range
        stats.append(st)
        records.append(replace(rec, values=scaled))
    return Dataset(tuple(records), tuple(stats), dict(dataset.metadata))


def normalize_values(values: ArrayLike, stats: NormStats) -> FloatArray:
    '''Scale engineering-unit values with existing statistics'''
    arr = np.asarray(values, dtype=np.float64)
    if stats.range == 0:
        return np.zeros_like(arr)
    return (arr - stats.min) / stats.range


def denormalize(values: ArrayLike, stats: NormStats) -> FloatArray:
    '''Map normalized values back to engineering units'''
    arr = np.asarray(values, dtype=np.float64)
    if stats.range == 0:
        return np.full_like(arr, stats.min)
    return arr * stats.range + stats.min


def split_nodes(dataset: Dataset, holdout_frac: float = 0.2, seed: int = 0) -> Tuple[List[str], List[str]]:
    '''
    Split the nodes with smart-meter records into training and held-out
    sets, using the `split` random stream.

    Returns:
        `(train_ids, held_out_ids)`, each sorted
    '''
    if not 0 <= holdout_frac < 1:
        raise ContractError(f'holdout_frac must be in [0, 1), not {holdout_frac}')
    candidates = _sorted_ids({r.node_id for r in dataset.records if r.measurement_type in ('P', 'Q')})
    n_hold = int(round(holdout_frac * len(candidates)))
    if holdout_frac > 0 and candidates:
        n_hold = min(max(n_hold, 1), len(candidates) - 1) if len(candidates) > 1 else 0
    order = rng_stream(seed, 'split').permutation(len(candidates))
    held = {candidates[i] for i in order[:n_hold]}
    train = [n for n in candidates if n not in held]
    return train, _sorted_ids(held)


# ---------------------------------------------------------------- CSV

def _format_times(times: FloatArray) -> np.ndarray:
    if np.all(times == np.round(times)):
        return times.astype(np.int64)
    return times


def to_frame(dataset: Dataset) -> pd.DataFrame:
    '''Long-format frame with one row per (record, grid time)'''
    if not dataset.records:
        return pd.DataFrame(columns=CSV_COLUMNS)
    times = _format_times(dataset.times)
    frames = [
        pd.DataFrame({
            'node_id': rec.node_id,
            'measurement_type': rec.measurement_type,
            'time_min': times,
            'value': rec.values,
            'mask': rec.mask.astype(np.int64),
        })
        for rec in dataset.records
    ]
    return pd.concat(frames, ignore_index=True)


def save_dataset(path: PathLike, dataset: Dataset):
    '''
    Write a dataset as CSV (`node_id,measurement_type,time_min,value,mask`,
    UTF-8, LF line endings, empty value where unobserved).

    Raises:
        ContractError: for normalized datasets, whose statistics the format cannot hold
    '''
    if dataset.normalized:
        raise ContractError('save the raw dataset; normalization statistics are not part of the CSV format')
    frame = to_frame(dataset)
    frame.to_csv(path, index=False, lineterminator='\n', na_rep='', encoding='utf-8', float_format=None)
    _logger.info(f'wrote {len(dataset)} records ({len(frame)} rows) to {path}')


def _first_bad(bad: pd.Series) -> int:
    # header is line 1
    return int(np.flatnonzero(bad.to_numpy())[0]) + 2


def load_dataset(path: PathLike) -> Dataset:
    '''
    Read a dataset CSV written by `save_dataset`. An empty file is an empty dataset.

    Raises:
        DatasetParseError: malformed row (carries the line number)
        SchemaError: invalid mask values or records on different grids
    '''
    if os.path.getsize(path) == 0:
        return Dataset(())
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise DatasetParseError(f'malformed CSV row: {e}', line=int(found.group(1)) if found else 0) from e
    except pd.errors.EmptyDataError:
        return Dataset(())
    if list(frame.columns) != CSV_COLUMNS:
        raise DatasetParseError(f'expected header {",".join(CSV_COLUMNS)}, got {",".join(frame.columns)}', line=1)
    if frame.empty:
        return Dataset(())

    bad_type = ~frame['measurement_type'].isin(MEASUREMENT_TYPES)
    if bad_type.any():
        line = _first_bad(bad_type)
        raise DatasetParseError(f'invalid measurement type {frame["measurement_type"].iloc[line - 2]!r}', line)
    bad_node = frame['node_id'].str.strip() == ''
    if bad_node.any():
        raise DatasetParseError('empty node_id', _first_bad(bad_node))

    times = pd.to_numeric(frame['time_min'], errors='coerce')
    bad_time = times.isna() | ~np.isfinite(times)
    if bad_time.any():
        line = _first_bad(bad_time)
        raise DatasetParseError(f'invalid time {frame["time_min"].iloc[line - 2]!r}', line)

    mask_num = pd.to_numeric(frame['mask'], errors='coerce')
    bad_mask = ~mask_num.isin([0, 1])
    if bad_mask.any():
        line = _first_bad(bad_mask)
        raise DatasetParseError(f'mask must be 0 or 1, got {frame["mask"].iloc[line - 2]!r}', line)

    raw_values = frame['value'].str.strip()
    values = pd.to_numeric(raw_values.where(raw_values != '', 'nan'), errors='coerce')
    bad_value = (mask_num == 1) & (values.isna() | ~np.isfinite(values))
    if bad_value.any():
        line = _first_bad(bad_value)
        raise DatasetParseError(f'observed value {frame["value"].iloc[line - 2]!r} is not a finite number', line)

    parsed = pd.DataFrame({
        'node_id': frame['node_id'],
        'measurement_type': frame['measurement_type'],
        'time_min': times.astype(np.float64),
        'value': values.astype(np.float64),
        'mask': mask_num.astype(np.int8),
    })
    records = []
    for (node, kind), group in parsed.groupby(['node_id', 'measurement_type'], sort=False):
        records.append(Record(
            str(node), kind, group['value'].to_numpy(), group['time_min'].to_numpy(), group['mask'].to_numpy()
        ))
    dataset = Dataset(tuple(records), metadata={'source': str(path)})
    _logger.info(f'read {len(dataset)} records from {path}')
    return dataset
