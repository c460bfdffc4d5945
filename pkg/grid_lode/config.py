'''
Contains globally applicable configuration variables.
'''
import inspect
from functools import wraps
from typing import TYPE_CHECKING, Callable, Optional

from .types import GradMode

if TYPE_CHECKING:
    from .odesolve import SolverConfig


def default_params(func: Callable):
    '''
    This decorator sets default kwarg values using global configuration variables.
    Only parameters that the decorated function accepts are set.
    '''
    accepted = inspect.signature(func).parameters

    @wraps(func)
    def wrapper(*args, **kwargs):
        if 'grad_mode' in accepted:
            kwargs.setdefault('grad_mode', GRAD_MODE)
        if 'solver' in accepted:
            kwargs.setdefault('solver', SOLVER)
        return func(*args, **kwargs)
    return wrapper


GRAD_MODE: Optional[GradMode] = None
'''
Default value for the `grad_mode` parameter in top-level functions.
`None` defers to the `TrainConfig` in use, which defaults to `'backprop'`.

For available values, see `grid_lode.types.GRAD_MODES`
'''

SOLVER: Optional['SolverConfig'] = None
'''
Default value for the `solver` parameter in top-level functions.
`None` defers to the `TrainConfig` (training) or to a default
`grid_lode.odesolve.SolverConfig` (inference).
'''
