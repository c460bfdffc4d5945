'''
Reverse-mode automatic differentiation over dense float64 tensors, plus the
neural building blocks used by every learned component (MLP, GRU cell,
parameter initialization and the Adam optimizer).

Differentiation is define-by-run. Operations executed inside an active
`Tape` whose inputs require gradients are recorded in execution order,
each with its local gradient rule. `backward` walks the tape in reverse.

```python
import numpy as np
from grid_lode import diffcore as dc

x = dc.Tensor([1.0, 2.0, 3.0], requires_grad=True)
with dc.Tape():
    loss = dc.sum(dc.mul(x, x))
dc.backward(loss)
print(x.grad)  # [2. 4. 6.]
```
'''
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import (Callable, Dict, Iterator, List, Mapping, Optional,
                    Sequence, Tuple, Union)

import numpy as np

from .exceptions import ContractError, DomainError, ShapeError
from .types import Activation, ArrayLike, FloatArray

_logger = logging.getLogger(__name__)

Scalar = Union[int, float]
Operand = Union['Tensor', Scalar]
VjpRule = Callable[[FloatArray], Sequence[Optional[FloatArray]]]

_local = threading.local()


def _tape_stack() -> List[Optional['Tape']]:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional['Tape']:
    '''The innermost tape recording on this thread, or None'''
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    '''
    Context manager that pauses recording on this thread. Operations inside
    only compute values, even when their inputs require gradients.
    '''
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    '''
    A dense float64 array that can take part in reverse-mode differentiation.
    '''
    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_tape')

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data: FloatArray = np.array(data, dtype=np.float64)
        '''Row-major values'''
        self.requires_grad: bool = requires_grad
        self.grad: Optional[FloatArray] = None
        '''Same-shape gradient buffer, populated by `backward`'''
        self.name: Optional[str] = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: FloatArray, requires_grad: bool = False) -> 'Tensor':
        # no copy, for op outputs
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f'only single element tensors can be converted to float, shape is {self.shape}')
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f', name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})'

    def __add__(self, other: Operand) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Tensor':
        return mul(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)


@dataclass
class TapeEntry:
    '''One executed operation: its output, its inputs and its local gradient rule'''
    name: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: VjpRule


class Tape:
    '''
    Ordered record of executed operations (the computation tape).

    Entries are appended as operations run, so every operation's inputs
    precede it. Use as a context manager to make it the recording tape of
    the current thread; tapes nest.
    '''

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        # tolerate misuse without corrupting other tapes on the stack
        for i in range(len(stack) - 1, -1, -1):
            if stack[i] is self:
                del stack[i]
                break

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, name: str, data: FloatArray, inputs: Sequence[Tensor], vjp: VjpRule) -> Tensor:
        '''
        Append an operation to the tape.

        Args:
            name: operation name, for debugging
            data: the already computed output value
            inputs: the tensors the output depends on
            vjp: maps the output gradient to one gradient (or None) per input

        Returns:
            The output tensor, marked as requiring gradients
        '''
        out = Tensor._wrap(data, requires_grad=True)
        out._tape = self
        self.entries.append(TapeEntry(name, out, tuple(inputs), vjp))
        return out

    def reset(self):
        self.entries.clear()

    def _accumulate(self, output: Tensor, seed: FloatArray) -> Dict[int, FloatArray]:
        grads: Dict[int, FloatArray] = {id(output): seed}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            for tensor, g_in in zip(entry.inputs, entry.vjp(g)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        return grads

    def gradients(
        self,
        output: Tensor,
        wrt: Sequence[Tensor],
        seed: Optional[ArrayLike] = None
    ) -> List[FloatArray]:
        '''
        Vector-Jacobian product of `output` with respect to `wrt`, without
        touching any `.grad` buffer and without resetting the tape.

        Args:
            output: a tensor recorded on this tape
            wrt: tensors to differentiate with respect to
            seed: the output cotangent. Defaults to ones

        Returns:
            One gradient array per tensor in `wrt` (zeros when unreachable)
        '''
        if seed is None:
            seed_arr = np.ones_like(output.data)
        else:
            seed_arr = np.asarray(seed, dtype=np.float64)
            if seed_arr.shape != output.shape:
                raise ShapeError(f'seed shape {seed_arr.shape} does not match output shape {output.shape}')
        grads = self._accumulate(output, seed_arr)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _record(name: str, data: FloatArray, inputs: Sequence[Tensor], vjp: VjpRule) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape.record(name, data, inputs, vjp)
    return Tensor._wrap(data)


def custom_op(name: str, data: ArrayLike, inputs: Sequence[Tensor], vjp: VjpRule) -> Tensor:
    '''
    Wrap an externally computed value as an operation with a user supplied
    gradient rule. Recorded on the active tape when any input requires
    gradients, otherwise returned as a plain tensor.

    Args:
        name: operation name, for debugging
        data: the output value
        inputs: tensors the value depends on
        vjp: maps the output gradient to one gradient (or None) per input
    '''
    return _record(name, np.asarray(data, dtype=np.float64), tuple(inputs), vjp)


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(float(value), dtype=np.float64))


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _reduce_to(g: FloatArray, t: Tensor) -> FloatArray:
    '''gradient of a scalar operand is the sum of the broadcast gradient'''
    if _is_scalar(t):
        return np.asarray(g.sum())
    return g


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f'{op}: shapes {a.shape} and {b.shape} do not match')


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    '''
    Matrix product of two 2-D tensors.

    Raises:
        ShapeError: if the tensors are not 2-D or the inner dimensions differ
    '''
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f'matmul: cannot multiply shapes {a.shape} and {b.shape}')
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return _record('matmul', a_data @ b_data, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    '''
    Affine map `x @ weight + bias` applied to every row of `x`.

    The bias is added row by row as part of this one operation, which is the
    only place a vector is repeated over rows.
    '''
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f'linear: cannot multiply shapes {x.shape} and {weight.shape}')
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f'linear: bias shape {bias.shape} does not match weight shape {weight.shape}')
    x_data, w_data = x.data, weight.data

    def vjp(g):
        return g @ w_data.T, x_data.T @ g, g.sum(axis=0)

    return _record('linear', x_data @ w_data + bias.data, (x, weight, bias), vjp)


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes('add', a, b)

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _record('add', a.data + b.data, (a, b), vjp)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes('sub', a, b)

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _record('sub', a.data - b.data, (a, b), vjp)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes('mul', a, b)
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _reduce_to(g * b_data, a), _reduce_to(g * a_data, b)

    return _record('mul', a_data * b_data, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    return _record('neg', -x.data, (x,), lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    x_data = x.data
    return _record('square', x_data * x_data, (x,), lambda g: (2.0 * x_data * g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record('tanh', y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: FloatArray) -> FloatArray:
    # tanh form is overflow free and exact at 0
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record('sigmoid', y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over='ignore'):
        y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise DomainError('exp: overflow for input values above ~709')
    return _record('exp', y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    '''
    Raises:
        DomainError: if any input value is not strictly positive
    '''
    x_data = x.data
    if np.any(~(x_data > 0)):
        raise DomainError('log: input must be strictly positive')
    return _record('log', np.log(x_data), (x,), lambda g: (g / x_data,))


def softplus(x: Tensor) -> Tensor:
    x_data = x.data
    return _record('softplus', np.logaddexp(0.0, x_data), (x,), lambda g: (g * _sigmoid(x_data),))


_UNARY: Dict[str, Callable[[Tensor], Tensor]] = {
    'tanh': tanh, 'sigmoid': sigmoid, 'exp': exp, 'log': log, 'softplus': softplus,
    'neg': neg, 'square': square,
}
_BINARY: Dict[str, Callable[[Operand, Operand], Tensor]] = {'add': add, 'sub': sub, 'mul': mul}


def elementwise(op: str, *args: Operand) -> Tensor:
    '''
    Apply a named elementwise operation.

    Args:
        op: one of `add`, `sub`, `mul` (two operands) or `tanh`, `sigmoid`,
            `exp`, `log`, `softplus`, `neg`, `square` (one operand)
        *args: the operands. Binary operations need equal shapes unless one
            side is a scalar

    Raises:
        ValueError: if the op name is unknown
        ShapeError: on mismatched shapes
        DomainError: eg: log of a non-positive value
    '''
    if op in _BINARY:
        if len(args) != 2:
            raise ContractError(f'{op} takes 2 operands, got {len(args)}')
        return _BINARY[op](args[0], args[1])
    if op in _UNARY:
        if len(args) != 1 or not isinstance(args[0], Tensor):
            raise ContractError(f'{op} takes 1 tensor operand')
        return _UNARY[op](args[0])
    raise ValueError(f'invalid op {op!r}, must be one of: {sorted([*_BINARY, *_UNARY])}')


# ---------------------------------------------------------------- reductions and structure

def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _record('sum', np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, max(x.size, 1)
    return _record('mean', np.asarray(x.data.sum() / n), (x,), lambda g: (np.full(shape, float(g) / n),))


def lincomb(coeffs: Sequence[float], tensors: Sequence[Union[Tensor, FloatArray]]) -> Tensor:
    '''
    Linear combination `sum(c_i * t_i)` of same-shaped tensors as one tape
    operation. Used for Runge-Kutta stage sums and dense output.
    '''
    if len(coeffs) != len(tensors) or not tensors:
        raise ContractError('lincomb needs one coefficient per tensor')
    items = [t if isinstance(t, Tensor) else Tensor._wrap(np.asarray(t, dtype=np.float64)) for t in tensors]
    shape = items[0].shape
    for t in items[1:]:
        if t.shape != shape:
            raise ShapeError(f'lincomb: shapes {shape} and {t.shape} do not match')
    cs = [float(c) for c in coeffs]
    data = cs[0] * items[0].data
    for c, t in zip(cs[1:], items[1:]):
        data = data + c * t.data

    def vjp(g):
        return [c * g for c in cs]

    return _record('lincomb', data, items, vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f'reshape: cannot reshape {old} into {tuple(shape)}') from e
    return _record('reshape', data, (x,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError('stack needs at least one tensor')
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f'stack: shapes {shape} and {t.shape} do not match')
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _record('stack', data, tensors, vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError('concat needs at least one tensor')
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f'concat: incompatible shapes {[t.shape for t in tensors]}') from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return _record('concat', data, tensors, vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    '''Columns `start:stop` of a 2-D tensor'''
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f'slice_cols: invalid column range {start}:{stop} for shape {x.shape}')
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record('slice_cols', x.data[:, start:stop].copy(), (x,), vjp)


def select_rows(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    '''
    Row `i` of the result is row `i` of `a` where the constant boolean
    `cond[i]` holds and row `i` of `b` elsewhere. Unselected values never
    reach the result, not even multiplied by zero.
    '''
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f'select_rows: shapes {a.shape} and {b.shape} must be equal and 2-D')
    rows = np.asarray(cond, dtype=bool)
    if rows.shape != (a.shape[0],):
        raise ShapeError(f'select_rows: condition shape {rows.shape} does not match {a.shape[0]} rows')
    cond2 = np.broadcast_to(rows[:, None], a.shape)

    def vjp(g):
        zero = np.zeros_like(g)
        return np.where(cond2, g, zero), np.where(cond2, zero, g)

    return _record('select_rows', np.where(cond2, a.data, b.data), (a, b), vjp)


# ---------------------------------------------------------------- backward / grad check

def backward(loss: Tensor):
    '''
    Populate `.grad` on every leaf tensor that requires gradients and that
    `loss` depends on. Existing gradients are accumulated into, so call
    `zero_grad` between steps. The tape is reset afterwards.

    Args:
        loss: a single-element tensor recorded on a tape

    Raises:
        ContractError: if the loss is not scalar or not connected to a tape
    '''
    if loss.size != 1:
        raise ContractError(f'backward needs a scalar loss, got shape {loss.shape}')
    tape = loss._tape
    if tape is None or not any(e.output is loss for e in reversed(tape.entries)):
        raise ContractError('loss is not connected to a tape (was it computed outside `Tape()`?)')

    grads = tape._accumulate(loss, np.ones_like(loss.data))
    produced = {id(e.output) for e in tape.entries}
    seen = set()
    for entry in tape.entries:
        for t in entry.inputs:
            key = id(t)
            if key in produced or key in seen or not t.requires_grad:
                continue
            seen.add(key)
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
    _logger.debug(f'backward over {len(tape.entries)} tape entries, {len(seen)} leaves')
    tape.reset()


@dataclass
class GradCheckReport:
    '''Outcome of comparing `backward` gradients with central finite differences'''
    max_rel_error: float
    passed: bool
    per_parameter: Dict[str, float] = field(default_factory=dict)
    '''Maximum relative error per parameter (keyed by name or index)'''


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Sequence[Tensor], Mapping[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8
) -> GradCheckReport:
    '''
    Compare reverse-mode gradients of a scalar function with central finite
    differences.

    Args:
        f: deterministic function of the current parameter values returning a
            scalar tensor
        params: the tensors to check
        h: finite difference step
        tol: pass threshold on the maximum relative error
        floor: smallest denominator used for the relative error
            `|a - n| / max(|a|, |n|, floor)`

    Returns:
        A `GradCheckReport`. No exception is raised for a failed check.
    '''
    if h <= 0:
        raise ContractError(f'h must be positive, not {h!r}')
    named = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
    saved = {k: p.grad for k, p in named.items()}
    for p in named.values():
        p.grad = None

    with Tape():
        loss = f()
    if loss.requires_grad:
        backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}

    errors: Dict[str, float] = {}
    for key, p in named.items():
        worst = 0.0
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            with no_grad():
                f_plus = f().item()
            p.data[idx] = orig - h
            with no_grad():
                f_minus = f().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[key][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
        errors[key] = worst

    for k, p in named.items():
        p.grad = saved[k]
    max_err = max(errors.values(), default=0.0)
    return GradCheckReport(max_rel_error=max_err, passed=max_err <= tol, per_parameter=errors)


# ---------------------------------------------------------------- neural building blocks

@dataclass
class MlpParams:
    '''
    A feed-forward network: a stack of affine layers, each followed by an
    activation. `weights[l]` has shape `(in_dim, out_dim)`.
    '''
    weights: List[Tensor]
    biases: List[Tensor]
    activations: List[Activation]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ShapeError('MlpParams needs one weight, bias and activation per layer')
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f'layer {i}: weight {w.shape} and bias {b.shape} do not chain')
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f'layer {i}: input dim {w.shape[0]} != previous output dim {self.weights[i - 1].shape[1]}'
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named_tensors(self, prefix: str = '') -> Dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f'{prefix}{i}.W'] = w
            out[f'{prefix}{i}.b'] = b
        return out

    def tensors(self) -> List[Tensor]:
        return list(self.named_tensors().values())


@dataclass
class GruParams:
    '''
    Gated recurrent unit parameters. `W_*` map the input (`input_dim x hidden_dim`),
    `U_*` map the previous hidden state (`hidden_dim x hidden_dim`); `r`, `u`, `h`
    are the reset gate, update gate and candidate state.
    '''
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_u: Tensor
    U_u: Tensor
    b_u: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    def __post_init__(self):
        in_dim, hid = self.W_r.shape
        for gate in 'ruh':
            w, u, b = (getattr(self, f'{k}_{gate}') for k in ('W', 'U', 'b'))
            if w.shape != (in_dim, hid) or u.shape != (hid, hid) or b.shape != (hid,):
                raise ShapeError(
                    f'gate {gate!r}: shapes W{w.shape} U{u.shape} b{b.shape} do not match '
                    f'input_dim={in_dim}, hidden_dim={hid}'
                )

    @property
    def input_dim(self) -> int:
        return self.W_r.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_r.shape[1]

    def named_tensors(self, prefix: str = '') -> Dict[str, Tensor]:
        return {
            f'{prefix}{k}': getattr(self, k)
            for k in ('W_r', 'U_r', 'b_r', 'W_u', 'U_u', 'b_u', 'W_h', 'U_h', 'b_h')
        }

    def tensors(self) -> List[Tensor]:
        return list(self.named_tensors().values())


def _uniform_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def init_mlp(dims: Sequence[int], activations: Sequence[Activation], rng: np.random.Generator) -> MlpParams:
    '''
    Initialize an MLP with `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights
    and zero biases.

    Args:
        dims: layer widths including input and output, eg: `[16, 100, 100, 16]`
        activations: one activation per layer (`len(dims) - 1` entries)
        rng: the generator to draw weights from
    '''
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise ShapeError(f'{len(dims)} dims need {len(dims) - 1} activations, got {len(activations)}')
    weights = [_uniform_weight(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    biases = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]
    return MlpParams(weights, biases, list(activations))


def init_gru(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> GruParams:
    '''Initialize a GRU cell the same way as `init_mlp`'''
    blocks = {}
    for gate in 'ruh':
        blocks[f'W_{gate}'] = _uniform_weight(rng, input_dim, hidden_dim)
        blocks[f'U_{gate}'] = _uniform_weight(rng, hidden_dim, hidden_dim)
        blocks[f'b_{gate}'] = Tensor(np.zeros(hidden_dim), requires_grad=True)
    return GruParams(**blocks)


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    '''
    Run an MLP on a batch of rows (`batch x in_dim`) or on a single vector.

    Raises:
        ShapeError: if the last dimension of `x` is not the first layer's input dim
    '''
    if x.shape[-1] != p.in_dim or x.ndim not in (1, 2):
        raise ShapeError(f'mlp_forward: input shape {x.shape} does not match in_dim={p.in_dim}')
    vector = x.ndim == 1
    h = reshape(x, (1, p.in_dim)) if vector else x
    for w, b, act in zip(p.weights, p.biases, p.activations):
        h = linear(h, w, b)
        if act == 'tanh':
            h = tanh(h)
    return reshape(h, (p.out_dim,)) if vector else h


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    '''
    One GRU update on a batch of rows:

    ```
    r = sigmoid(x W_r + h U_r + b_r)
    u = sigmoid(x W_u + h U_u + b_u)
    h~ = tanh(x W_h + (r * h) U_h + b_h)
    h_new = (1 - u) * h + u * h~
    ```
    '''
    if x_t.ndim != 2 or h_prev.ndim != 2 or x_t.shape[0] != h_prev.shape[0]:
        raise ShapeError(f'gru_step: input {x_t.shape} and hidden {h_prev.shape} must be 2-D with equal rows')
    if x_t.shape[1] != p.input_dim or h_prev.shape[1] != p.hidden_dim:
        raise ShapeError(
            f'gru_step: input {x_t.shape} / hidden {h_prev.shape} do not match '
            f'input_dim={p.input_dim}, hidden_dim={p.hidden_dim}'
        )
    r = sigmoid(add(linear(x_t, p.W_r, p.b_r), matmul(h_prev, p.U_r)))
    u = sigmoid(add(linear(x_t, p.W_u, p.b_u), matmul(h_prev, p.U_u)))
    candidate = tanh(add(linear(x_t, p.W_h, p.b_h), matmul(mul(r, h_prev), p.U_h)))
    return add(mul(sub(1.0, u), h_prev), mul(u, candidate))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    '''Moment buffers and hyperparameters of the Adam optimizer'''
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, FloatArray] = field(default_factory=dict)
    v: Dict[str, FloatArray] = field(default_factory=dict)


def adam_update(
    state: AdamState,
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, FloatArray]] = None
) -> AdamState:
    '''
    One bias-corrected Adam step, updating `params` in place.

    Args:
        state: optimizer state, mutated and returned
        params: named parameters
        grads: named gradients. Defaults to each parameter's `.grad`
            (a missing gradient counts as zero)
    '''
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f'gradient for {name!r} has shape {g.shape}, parameter has {p.shape}')
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state
