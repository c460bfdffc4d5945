from typing import Optional, Sequence

import numpy as np

from grid_lode import diffcore as dc
from grid_lode.griddata import Dataset, Record, unify_time_grid
from grid_lode.helpers import rng_stream
from grid_lode.lode import LodeModel
from grid_lode.odesolve import OdeFunc


def make_record(
    values: Sequence[float],
    times: Optional[Sequence[float]] = None,
    mask: Optional[Sequence[int]] = None,
    node_id: str = '1',
    kind: str = 'P'
) -> Record:
    '''Build a record, defaulting to 1-minute spacing and everything observed'''
    values = np.asarray(values, dtype=np.float64)
    times = np.arange(len(values), dtype=np.float64) if times is None else times
    mask = np.ones(len(values), dtype=np.int8) if mask is None else mask
    return Record(node_id, kind, values, times, mask)  # type: ignore


def tiny_model(seed: int = 0, latent_dim: int = 3, hidden_dim: int = 4, units: int = 5, layers: int = 2) -> LodeModel:
    return LodeModel.init(1, latent_dim, hidden_dim, units, layers, rng_stream(seed, 'init'))


def zero_parameters(model: LodeModel) -> LodeModel:
    for p in model.parameters().values():
        p.data[...] = 0.0
    return model


def linear_dynamics(matrix: np.ndarray) -> OdeFunc:
    '''
    `dz/dt = A z` for vector states, `dZ/dt = Z A^T` for row-batched states.
    The transposed matrix is the single trainable parameter.
    '''
    a_t = dc.Tensor(np.asarray(matrix, dtype=np.float64).T, requires_grad=True)
    n = a_t.shape[0]

    def fn(z: dc.Tensor) -> dc.Tensor:
        if z.ndim == 1:
            return dc.reshape(dc.matmul(dc.reshape(z, (1, n)), a_t), (n,))
        return dc.matmul(z, a_t)

    return OdeFunc(fn, [a_t])


def scaled_dynamics(rate: float) -> OdeFunc:
    '''`dz/dt = rate * z`, no parameters'''
    return OdeFunc(lambda z: dc.mul(z, rate))


def sine_phases(n_records: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0, 2 * np.pi, size=n_records)


def sine_dataset(
    n_records: int = 10,
    n_points: int = 50,
    step_min: float = 15.0,
    seed: int = 0,
    period_min: float = 1440.0
) -> Dataset:
    '''
    Sine waves with a random phase per record (see `sine_phases`), on a
    shared grid, fully observed. Values are in [-1, 1] before normalization.
    '''
    times = np.arange(n_points) * step_min
    return unify_time_grid([
        make_record(np.sin(2 * np.pi * times / period_min + phase), times, node_id=str(i + 1))
        for i, phase in enumerate(sine_phases(n_records, seed))
    ])


def sine_truth(n_records: int, end_min: float, seed: int = 0, period_min: float = 1440.0) -> Dataset:
    '''The waves of `sine_dataset` at every minute up to `end_min`'''
    minutes = np.arange(end_min + 1.0)
    return Dataset(tuple(
        make_record(np.sin(2 * np.pi * minutes / period_min + phase), minutes, node_id=str(i + 1))
        for i, phase in enumerate(sine_phases(n_records, seed))
    ))
