'''
Submodule containing types and type aliases used throughout the library.

Splitting these definitions into a seperate submodule allows for detailed
explanations and verbose type definitions, without cluttering up the rest
of the library.
'''
import os
from typing import Literal, Sequence, Union

import numpy as np
import numpy.typing as npt


FloatArray = npt.NDArray[np.float64]
'''
A numpy array of 64-bit floats. Every numeric buffer in this library is
`float64`, including tensor data, gradients and time grids.
'''

MaskArray = npt.NDArray[np.int8]
'''
A numpy array of `0`/`1` availability flags. `1` means the value at the same
position was observed, `0` means it was not and the value is a sentinel
(`NaN`) that must never be read.
'''

ArrayLike = Union[FloatArray, Sequence[float], float]
'''Anything `numpy.asarray` can turn into a float array'''

PathLike = Union[str, os.PathLike]
'''A filesystem path accepted by the readers and writers'''

MeasurementType = Literal['P', 'Q', 'V']
'''
The kind of sensor a record comes from:
- `'P'`: active power (kW), smart meter, interval averaged
- `'Q'`: reactive power (kvar), smart meter, interval averaged
- `'V'`: voltage magnitude (p.u.), SCADA, instantaneous
'''

LoadClass = Literal['residential', 'commercial', 'substation']
'''
Load profile class of a feeder node. The substation (tree root) carries no load.
'''

GradMode = Literal['backprop', 'adjoint']
'''
How gradients flow through the ODE solver:
- `'backprop'`: record every solver stage on the tape and differentiate the
    discrete computation exactly
- `'adjoint'`: integrate the adjoint system backwards in time, keeping only the
    trajectory instead of the whole solver tape
'''

Task = Literal['imputation', 'prediction']
'''
- `'imputation'`: reconstruct values at finer times inside the observed window
- `'prediction'`: condition on the first part of the day and extrapolate the rest
'''

Activation = Literal['tanh', 'identity']
'''Activation applied after an MLP layer'''

MEASUREMENT_TYPES = ('P', 'Q', 'V')
GRAD_MODES = ('backprop', 'adjoint')
TASKS = ('imputation', 'prediction')
