'''
Adaptive Dormand-Prince 5(4) integration of time-invariant dynamics at
arbitrary output times, with two ways to differentiate through it:

* backprop-through-solver: pass `Tensor` states to `integrate` inside an
  active `grid_lode.diffcore.Tape`; every stage combination is recorded
  and the accepted step sizes become constants of the computation.
* adjoint: `odeint_adjoint` records a single tape operation whose gradient
  rule integrates the augmented adjoint system backward in time
  (`adjoint_backward`), so no forward tape is kept across steps.

```python
import numpy as np
from grid_lode import diffcore as dc
from grid_lode.odesolve import OdeFunc, integrate

decay = OdeFunc(lambda z: dc.mul(z, -2.0))
traj = integrate(decay, np.array([1.0]), [0.0, 0.5, 1.0])
print(traj.values[:, 0])  # [1.        0.36787944 0.13533528]
```
'''
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import MlpParams, Tensor
from .exceptions import ContractError, IntegrationDivergedError, ShapeError, format_exc
from .helpers import check_strictly_increasing
from .types import ArrayLike, FloatArray, GradMode

_logger = logging.getLogger(__name__)
_adjoint_logger = _logger.getChild('adjoint')

State = Union[FloatArray, Tensor]

# Dormand-Prince 5(4) tableau
C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# 5th minus 4th order weights
E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# dense output: coefficient of stage i is sum_j P[i][j] * theta**(j + 1)
P = (
    (1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799),
    (0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072),
    (0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632),
    (0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844),
    (0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423),
)

STAGES = 7
'''Stage evaluations counted per attempted step'''


class OdeFunc:
    '''
    Time-invariant dynamics `z -> f(z, theta)`.

    Called with a `Tensor` the evaluation is recorded on the active tape;
    called with a numpy array it runs with recording paused and returns an
    array.

    Args:
        fn: maps a state tensor to a same-shaped derivative tensor
        params: the tensors `fn` closes over (theta), in a fixed order
    '''

    def __init__(self, fn: Callable[[Tensor], Tensor], params: Sequence[Tensor] = ()):
        self.fn = fn
        self.params: List[Tensor] = list(params)

    @classmethod
    def from_mlp(cls, mlp: MlpParams) -> 'OdeFunc':
        return cls(lambda z: dc.mlp_forward(mlp, z), mlp.tensors())

    @property
    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params], dtype=int))

    def __call__(self, z: State) -> State:
        if isinstance(z, Tensor):
            out = self.fn(z)
            if out.shape != z.shape:
                raise ShapeError(f'dynamics returned shape {out.shape} for state shape {z.shape}')
            return out
        with dc.no_grad():
            return self(Tensor(z)).data


@dataclass(frozen=True)
class SolverConfig:
    '''
    Step control settings. Step bounds left as `None` are derived from the
    integration span by `resolve`.
    '''
    rtol: float = 1e-6
    atol: float = 1e-7
    h_init: Optional[float] = None
    '''Defaults to `span / 100`'''
    h_min: Optional[float] = None
    '''Defaults to `1e-10 * span`'''
    h_max: Optional[float] = None
    '''Defaults to `span`'''
    max_steps: int = 100000
    safety: float = 0.9

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ContractError(f'rtol and atol must be positive, got rtol={self.rtol}, atol={self.atol}')
        if self.max_steps <= 0:
            raise ContractError(f'max_steps must be positive, not {self.max_steps}')
        if not 0 < self.safety <= 1:
            raise ContractError(f'safety must be in (0, 1], not {self.safety}')
        for name in ('h_init', 'h_min', 'h_max'):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ContractError(f'{name} must be positive, not {value}')
        if self.h_min is not None and self.h_max is not None and self.h_min > self.h_max:
            raise ContractError(f'h_min ({self.h_min}) must not exceed h_max ({self.h_max})')

    def resolve(self, span: float) -> 'SolverConfig':
        '''Fill unset step bounds for an integration over `span` time units'''
        if not span > 0:
            raise ContractError(f'integration span must be positive, not {span}')
        h_max = self.h_max if self.h_max is not None else span
        h_min = self.h_min if self.h_min is not None else min(1e-10 * span, h_max)
        h_init = self.h_init if self.h_init is not None else span / 100
        return replace(self, h_init=min(max(h_init, h_min), h_max), h_min=h_min, h_max=h_max)


@dataclass
class Trajectory:
    '''States at the requested times plus step diagnostics'''
    times: FloatArray
    states: List[State]
    accepted: int = 0
    rejected: int = 0
    nfev: int = 0

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ContractError(f'{len(self.times)} times but {len(self.states)} states')

    @property
    def values(self) -> FloatArray:
        '''States stacked along a new leading time axis'''
        return np.stack([s.data if isinstance(s, Tensor) else s for s in self.states])


@dataclass
class AdjointState:
    '''
    Augmented backward state: the forward state `z`, its adjoint
    `a = dL/dz` and the running `dL/dtheta` accumulator (flat).
    '''
    z: FloatArray
    a: FloatArray
    theta_grad: FloatArray

    def __post_init__(self):
        if self.z.shape != self.a.shape:
            raise ShapeError(f'adjoint shape {self.a.shape} does not match state shape {self.z.shape}')

    def pack(self) -> FloatArray:
        return np.concatenate([self.z.reshape(-1), self.a.reshape(-1), self.theta_grad.reshape(-1)])

    @classmethod
    def unpack(cls, vector: FloatArray, shape: Tuple[int, ...], n_theta: int) -> 'AdjointState':
        n = int(np.prod(shape, dtype=int))
        if vector.shape != (2 * n + n_theta,):
            raise ShapeError(f'augmented vector shape {vector.shape} does not match {2 * n + n_theta}')
        return cls(vector[:n].reshape(shape), vector[n:2 * n].reshape(shape), vector[2 * n:])


@dataclass
class StepResult:
    z_next: State
    err_norm: float
    h_next: float
    accepted: bool
    stages: List[State]
    nfev: int = STAGES


def _data(x: State) -> FloatArray:
    return x.data if isinstance(x, Tensor) else x


def _combine(z: State, h: float, coeffs: Sequence[float], stages: Sequence[State]) -> State:
    '''`z + h * sum(coeffs[i] * stages[i])`, skipping zero coefficients'''
    cs = [1.0]
    items = [z]
    for c, k in zip(coeffs, stages):
        if c != 0.0:
            cs.append(h * c)
            items.append(k)
    if any(isinstance(x, Tensor) for x in items):
        return dc.lincomb(cs, items)
    out = z.copy()
    for c, k in zip(cs[1:], items[1:]):
        out += c * k
    return out


def _check_finite(value: State, t: float, h: float, what: str):
    if not np.all(np.isfinite(_data(value))):
        _logger.error(f'non-finite {what} at t={t}, h={h}')
        raise IntegrationDivergedError(f'non-finite {what}', t=t, h=h)


def _stages(f: OdeFunc, t: float, z: State, h: float, k1: Optional[State] = None) -> Tuple[List[State], State]:
    stages = [k1 if k1 is not None else f(z)]
    _check_finite(stages[0], t, h, 'stage value')
    with np.errstate(over='ignore', invalid='ignore'):
        for i in range(1, 6):
            k = f(_combine(z, h, A[i], stages))
            _check_finite(k, t, h, 'stage value')
            stages.append(k)
        z_next = _combine(z, h, B, stages)
        _check_finite(z_next, t, h, 'state')
    return stages, z_next


def dopri5_step(
    f: OdeFunc,
    t: float,
    z: State,
    h: float,
    cfg: Optional[SolverConfig] = None,
    k1: Optional[State] = None
) -> StepResult:
    '''
    Attempt one Dormand-Prince 5(4) step.

    Args:
        f: the dynamics
        t: current time (diagnostics only, `f` is time-invariant)
        z: current state
        h: step size
        cfg: tolerances and step bounds. Unset bounds do not clamp `h_next`
        k1: `f(z)` if already known (first-same-as-last reuse)

    Returns:
        `StepResult` with the 5th-order proposal `z_next`, the scaled RMS error
        `err_norm`, whether the step is accepted (`err_norm <= 1`), the
        suggested next step `h_next` and all seven stages

    Raises:
        IntegrationDivergedError: if a stage or the state is not finite
    '''
    cfg = cfg or SolverConfig()
    if not (np.isfinite(h) and h > 0):
        raise ContractError(f'step size must be positive and finite, not {h}')
    _check_finite(z, t, h, 'state')

    stages, z_next = _stages(f, t, z, h, k1)
    with np.errstate(over='ignore', invalid='ignore'):
        k7 = f(z_next)
        _check_finite(k7, t, h, 'stage value')
        stages.append(k7)

        z_data, next_data = _data(z), _data(z_next)
        err = h * np.sum([e * _data(k) for e, k in zip(E, stages) if e != 0.0], axis=0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z_data), np.abs(next_data))
        err_norm = float(np.sqrt(np.mean(np.square(err / scale))))
    if not np.isfinite(err_norm):
        raise IntegrationDivergedError('non-finite error estimate', t=t, h=h)

    factor = 5.0 if err_norm == 0 else min(5.0, max(0.2, cfg.safety * err_norm ** -0.2))
    h_next = h * factor
    if cfg.h_max is not None:
        h_next = min(h_next, cfg.h_max)
    if cfg.h_min is not None:
        h_next = max(h_next, cfg.h_min)
    return StepResult(z_next, err_norm, h_next, err_norm <= 1.0, stages)


def _dense(z: State, h: float, stages: Sequence[State], theta: float) -> State:
    coeffs = [sum(p * theta ** (j + 1) for j, p in enumerate(row)) for row in P]
    return _combine(z, h, coeffs, stages)


def integrate(
    f: OdeFunc,
    z0: Union[State, ArrayLike],
    times: ArrayLike,
    cfg: Optional[SolverConfig] = None
) -> Trajectory:
    '''
    Integrate `dz/dt = f(z)` from `z(times[0]) = z0` and report the state at
    every requested time.

    Steps are chosen by error control alone and never overshoot the last
    requested time; intermediate times are filled in with the dopri5
    interpolation polynomial.

    Args:
        f: the dynamics
        z0: the initial state. A `Tensor` inside an active tape records the
            whole integration for backprop
        times: strictly increasing output times, `times[0]` being the epoch
            of `z0`
        cfg: solver settings

    Returns:
        Trajectory whose first state is `z0` itself

    Raises:
        ContractError: if `times` is empty or not strictly increasing
        IntegrationDivergedError: non-finite values, step size underflow or
            `max_steps` exceeded

    Example:
        ```python
        from grid_lode import diffcore as dc
        from grid_lode.odesolve import OdeFunc, integrate

        growth = OdeFunc(lambda z: dc.mul(z, 1.0))
        print(integrate(growth, [1.0], [0, 1]).values[-1])  # [2.71828183]
        ```
    '''
    cfg = cfg or SolverConfig()
    grid = check_strictly_increasing(times, 'times')
    if len(grid) == 0:
        raise ContractError('integrate needs at least one output time')
    if not isinstance(z0, Tensor):
        z0 = np.array(z0, dtype=np.float64)
    states: List[State] = [z0]
    if len(grid) == 1:
        return Trajectory(grid, states)

    t_end = float(grid[-1])
    run = cfg.resolve(t_end - float(grid[0]))
    t, z, k1, h = float(grid[0]), z0, None, run.h_init
    accepted = rejected = 0
    idx = 1
    while idx < len(grid):
        if accepted + rejected >= run.max_steps:
            _logger.error(f'max_steps={run.max_steps} exceeded at t={t}')
            raise IntegrationDivergedError(f'max_steps={run.max_steps} exceeded', t=t, h=h)
        remaining = t_end - t
        last = h >= remaining
        step_h = remaining if last else h
        step = dopri5_step(f, t, z, step_h, run, k1=k1)
        if not step.accepted:
            rejected += 1
            _logger.debug(f'rejected step t={t:.6g} h={step_h:.3g} err={step.err_norm:.3g}')
            if step_h <= run.h_min:
                _logger.error(f'step size {step_h} fell below h_min={run.h_min} at t={t}')
                raise IntegrationDivergedError('step size fell below h_min', t=t, h=step_h)
            h = step.h_next
            continue

        accepted += 1
        t_new = t_end if last else t + step_h
        while idx < len(grid) and grid[idx] <= t_new:
            if grid[idx] == t_new:
                states.append(step.z_next)
            else:
                states.append(_dense(z, step_h, step.stages, (grid[idx] - t) / step_h))
            idx += 1
        t, z, k1, h = t_new, step.z_next, step.stages[-1], step.h_next

    return Trajectory(grid, states, accepted, rejected, STAGES * (accepted + rejected))


def fixed_step_integrate(f: OdeFunc, z0: ArrayLike, t0: float, t1: float, n_steps: int) -> FloatArray:
    '''
    Apply the 5th-order Dormand-Prince formula `n_steps` times with a constant
    step and no error control. Returns the state at `t1`.
    '''
    if n_steps < 1 or not t1 > t0:
        raise ContractError(f'need n_steps >= 1 and t1 > t0, got n_steps={n_steps}, t0={t0}, t1={t1}')
    h = (t1 - t0) / n_steps
    z = np.array(z0, dtype=np.float64)
    for i in range(n_steps):
        _, z = _stages(f, t0 + i * h, z, h)
    return z


class _ArrayDynamics(OdeFunc):
    '''Dynamics defined directly on numpy arrays (no parameters, never taped)'''

    def __init__(self, fn: Callable[[FloatArray], FloatArray]):
        super().__init__(lambda z: z)
        self.array_fn = fn

    def __call__(self, z: State) -> State:
        if isinstance(z, Tensor):
            raise ContractError('augmented adjoint dynamics only run on arrays')
        return self.array_fn(z)


def _augmented(f: OdeFunc, shape: Tuple[int, ...]) -> Callable[[FloatArray], FloatArray]:
    n_theta = f.n_params

    def dynamics(s: FloatArray) -> FloatArray:
        st = AdjointState.unpack(s, shape, n_theta)
        with dc.Tape() as tape:
            z = Tensor(st.z, requires_grad=True)
            out = f(z)
            grads = tape.gradients(out, [z, *f.params], seed=st.a)
        theta = np.concatenate([g.reshape(-1) for g in grads[1:]]) if f.params else np.zeros(0)
        # reversed time: dz/dtau = -f, da/dtau = a^T df/dz, dg/dtau = a^T df/dtheta
        return AdjointState(-out.data, grads[0], theta).pack()

    return dynamics


def adjoint_backward(
    f: OdeFunc,
    traj: Trajectory,
    dL_dz: Sequence[ArrayLike],
    cfg: Optional[SolverConfig] = None
) -> Tuple[FloatArray, List[FloatArray]]:
    '''
    Gradients of a loss on `traj.states` with respect to the initial state
    and the dynamics parameters, by integrating the adjoint system backward
    one segment at a time.

    Args:
        f: the dynamics the trajectory was produced with
        traj: the forward trajectory
        dL_dz: loss gradient at each trajectory time
        cfg: solver settings for the backward segments

    Returns:
        `(dL/dz0, [dL/dtheta_k for each parameter of f])`
    '''
    if len(dL_dz) != len(traj.times):
        raise ContractError(f'{len(dL_dz)} gradients for {len(traj.times)} trajectory times')
    states = [np.asarray(_data(s), dtype=np.float64) for s in traj.states]
    shape = states[0].shape
    grads = [np.asarray(g, dtype=np.float64) for g in dL_dz]
    for g in grads:
        if g.shape != shape:
            raise ShapeError(f'gradient shape {g.shape} does not match state shape {shape}')

    n_theta = f.n_params
    aug = _ArrayDynamics(_augmented(f, shape))
    a, theta = grads[-1].copy(), np.zeros(n_theta)
    nfev = 0
    for i in range(len(states) - 1, 0, -1):
        s0 = AdjointState(states[i], a, theta).pack()
        segment = integrate(aug, s0, [-traj.times[i], -traj.times[i - 1]], cfg)
        nfev += segment.nfev
        st = AdjointState.unpack(segment.states[-1], shape, n_theta)
        a, theta = st.a + grads[i - 1], st.theta_grad
    _adjoint_logger.debug(f'adjoint pass over {len(states) - 1} segments, nfev={nfev}')

    out, offset = [], 0
    for p in f.params:
        out.append(theta[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    return a, out


def odeint_adjoint(
    f: OdeFunc,
    z0: Tensor,
    times: ArrayLike,
    cfg: Optional[SolverConfig] = None
) -> Tuple[Tensor, Trajectory]:
    '''
    Integrate without recording the steps, then register one tape operation
    (states stacked along a leading time axis) whose gradient comes from
    `adjoint_backward`.
    '''
    with dc.no_grad():
        traj = integrate(f, z0.data, times, cfg)
    data = traj.values

    def vjp(g: FloatArray):
        try:
            dz0, dtheta = adjoint_backward(f, traj, list(g), cfg)
        except IntegrationDivergedError as e:
            _adjoint_logger.error(f'backward pass diverged: {format_exc(e)}')
            raise
        return [dz0, *dtheta]

    return dc.custom_op('odeint_adjoint', data, (z0, *f.params), vjp), traj


def odeint(
    f: OdeFunc,
    z0: Tensor,
    times: ArrayLike,
    cfg: Optional[SolverConfig] = None,
    grad_mode: GradMode = 'backprop'
) -> Tuple[Tensor, Trajectory]:
    '''
    Differentiable integration returning the states stacked along a leading
    time axis, using the requested gradient mode.

    Raises:
        ValueError: if `grad_mode` is unknown
    '''
    if grad_mode == 'adjoint':
        return odeint_adjoint(f, z0, times, cfg)
    if grad_mode != 'backprop':
        raise ValueError(f'invalid grad_mode {grad_mode!r}, must be "backprop" or "adjoint"')
    traj = integrate(f, z0, times, cfg)
    states = [s if isinstance(s, Tensor) else Tensor(s) for s in traj.states]
    return dc.stack(states), traj
