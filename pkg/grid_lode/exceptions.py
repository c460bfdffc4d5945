from typing import Optional


def format_exc(e: Exception) -> str:
    '''@private'''
    return f'{type(e).__name__}: {e}'


class GridLodeError(Exception):
    '''
    Generic error class designed to make catching errors under one umbrella easy.
    '''
    ...


class ShapeError(GridLodeError, ValueError):
    '''Tensor or array dimensions do not agree'''
    ...


class DomainError(GridLodeError, ValueError):
    '''A function was evaluated outside of its domain (eg: log of a non-positive value)'''
    ...


class ContractError(GridLodeError, ValueError):
    '''A precondition of an operation was violated'''
    ...


class EmptyRecordError(GridLodeError, ValueError):
    '''A record, batch or conditioning window contains no observed values'''
    ...


class DivergenceError(GridLodeError, ArithmeticError):
    '''Umbrella class for numerical divergence'''
    ...


class IntegrationDivergedError(DivergenceError):
    '''
    The ODE solver could not continue.

    Example:
        ```python
        raise IntegrationDivergedError('non-finite stage value', t=0.25, h=0.01)
        ```
    '''
    def __init__(self, message: str, t: float, h: float):
        self.message: str = message
        self.t: float = t
        self.h: float = h
        super().__init__(message)

    def __str__(self):
        return f'{self.message} (t={self.t!r}, h={self.h!r})'


class TrainingDivergedError(DivergenceError):
    '''
    The training loss became non-finite.

    Carries the iteration at which it happened and the last finite
    negative ELBO, so runs can be inspected or resumed from a checkpoint.
    '''
    def __init__(self, message: str, iteration: int, last_finite_loss: Optional[float]):
        self.message: str = message
        self.iteration: int = iteration
        self.last_finite_loss: Optional[float] = last_finite_loss
        super().__init__(message)

    def __str__(self):
        string = f'{self.message} at iteration {self.iteration}'
        string += f'\n\t-> last finite loss: {self.last_finite_loss!r}'
        return string


class InfeasibleLoadingError(GridLodeError, ValueError):
    '''The linearized power flow produced a non-positive squared voltage'''
    def __init__(self, message: str, node: int, time_index: int):
        self.message: str = message
        self.node: int = node
        self.time_index: int = time_index
        super().__init__(message)

    def __str__(self):
        return f'node {self.node}, time index {self.time_index}: {self.message}'


class SchemaError(GridLodeError, ValueError):
    '''Data does not follow the expected schema'''
    ...


class DatasetParseError(SchemaError):
    '''A dataset file row could not be parsed'''
    def __init__(self, message: str, line: int):
        self.message: str = message
        self.line: int = line
        super().__init__(message)

    def __str__(self):
        return f'line {self.line}: {self.message}'


class CheckpointError(GridLodeError):
    '''Unreadable or invalid checkpoint file'''
    ...


class CheckpointVersionError(CheckpointError):
    '''Checkpoint format version or data dimension does not match'''
    ...


class ConfigError(GridLodeError, ValueError):
    '''Invalid run configuration'''
    ...
