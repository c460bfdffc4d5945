'''
Helper functions for the library
'''
from __future__ import annotations

import logging
import zlib
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ContractError
from .types import FloatArray

_logger = logging.getLogger(__name__)

RNG_STREAMS = ('data', 'noise', 'dropout', 'split', 'init', 'training')
'''
Names of the random sub-streams derived from a run seed.

Keeping every consumer on its own stream means that, for example, changing
the dropout probability does not change the measurement noise drawn for the
same seed.
'''


def rng_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    '''
    Derive an independent, reproducible random generator for one consumer
    of randomness.

    Args:
        seed: the run seed
        name: the sub-stream name, usually one of `RNG_STREAMS`
        *keys: extra non-negative integers mixed into the seed, eg: an
            iteration index so a resumed run draws what an uninterrupted run would

    Returns:
        A `numpy.random.Generator` seeded from `(seed, crc32(name), *keys)`

    Example:
        ```python
        from grid_lode.helpers import rng_stream

        noise_rng = rng_stream(42, 'noise')
        print(noise_rng.normal())
        ```
    '''
    if seed < 0:
        raise ContractError(f'seed must be non-negative, not {seed!r}')
    if name not in RNG_STREAMS:
        _logger.debug(f'deriving rng from unregistered stream name {name!r}')
    key = zlib.crc32(name.encode('utf-8'))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, keys)]))


def check_strictly_increasing(times: Sequence[float] | FloatArray, what: str = 'times') -> FloatArray:
    '''
    Validate a time grid.

    Args:
        times: the time values to check
        what: name used in the error message

    Returns:
        The times as a 1-D float array

    Raises:
        ContractError: if the times are not 1-D, not finite or not strictly increasing
    '''
    arr = np.asarray(times, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f'{what} must be one dimensional, got shape {arr.shape}')
    if not np.all(np.isfinite(arr)):
        raise ContractError(f'{what} must be finite')
    if arr.size > 1 and not np.all(np.diff(arr) > 0):
        raise ContractError(f'{what} must be strictly increasing')
    return arr


def sorted_union(grids: Iterable[FloatArray]) -> FloatArray:
    '''Sorted, de-duplicated union of several time grids'''
    grids = [np.asarray(g, dtype=np.float64) for g in grids]
    if not grids:
        return np.zeros(0, dtype=np.float64)
    return np.unique(np.concatenate(grids))
