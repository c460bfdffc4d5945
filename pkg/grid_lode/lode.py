'''
The latent ODE model: a reverse-time GRU encoder produces a Gaussian
posterior over the initial latent state, learned dynamics carry it through
time, and a single affine layer decodes every latent state back to data
space. Training maximizes the evidence lower bound (ELBO) with Adam.

Time enters the model in model units, `(t_min - t_epoch) / time_unit_min`,
where the epoch is the first time of the record (or batch) grid.

```python
from grid_lode import griddata, lode
from grid_lode.helpers import rng_stream

records = griddata.sample_multirate(griddata.generate_profiles(griddata.default_feeder()))
dataset = griddata.normalize(griddata.meter_records(griddata.unify_time_grid(records)))
model = lode.LodeModel.init(data_dim=1, rng=rng_stream(0, 'init'))
result = lode.train(model, dataset, lode.TrainConfig(iterations=20))
print(result.log[-1])
```
'''
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import config
from . import diffcore as dc
from .diffcore import AdamState, GruParams, MlpParams, Tensor
from .exceptions import (CheckpointError, CheckpointVersionError, ContractError,
                         EmptyRecordError, IntegrationDivergedError,
                         ShapeError, TrainingDivergedError, format_exc)
from .griddata import Dataset, NormStats, Record, denormalize, normalize_values
from .helpers import check_strictly_increasing, rng_stream, sorted_union
from .odesolve import OdeFunc, SolverConfig, integrate, odeint
from .types import GRAD_MODES, TASKS, ArrayLike, FloatArray, GradMode, PathLike, Task

_logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
'''Format version written into checkpoint metadata'''
_META_KEY = '__meta__'

INIT_SIGMA = 0.01
'''Posterior standard deviation reported by a freshly initialized encoder'''


@dataclass(frozen=True)
class TrainConfig:
    '''
    Training settings.

    Args:
        batch_size: records per iteration
        iterations: optimizer steps in this call
        lr_init: learning rate at iteration 0
        lr_decay: the learning rate at iteration `t` is `lr_init * lr_decay ** t`
        sigma_obs: standard deviation of the Gaussian observation likelihood (normalized units)
        kl_weight: multiplier of the KL term
        seed: run seed (`training` stream)
        grad_mode: how gradients pass through the ODE solver
        task: `'prediction'` conditions the encoder on `t <= split_min` and scores
            only `t > split_min`
        split_min: prediction conditioning cutoff (minutes)
        time_unit_min: minutes per model time unit
        log_every: iterations between info log lines
        solver: ODE solver settings
    '''
    batch_size: int = 10
    iterations: int = 200
    lr_init: float = 0.01
    lr_decay: float = 0.999
    sigma_obs: float = 0.05
    kl_weight: float = 1.0
    seed: int = 0
    grad_mode: GradMode = 'backprop'
    task: Task = 'imputation'
    split_min: float = 720.0
    time_unit_min: float = 60.0
    log_every: int = 10
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f'batch_size must be at least 1, not {self.batch_size}')
        if self.iterations < 0:
            raise ContractError(f'iterations must not be negative, not {self.iterations}')
        if not self.lr_init > 0:
            raise ContractError(f'lr_init must be positive, not {self.lr_init}')
        if not 0 < self.lr_decay <= 1:
            raise ContractError(f'lr_decay must be in (0, 1], not {self.lr_decay}')
        if not self.sigma_obs > 0:
            raise ContractError(f'sigma_obs must be positive, not {self.sigma_obs}')
        if self.kl_weight < 0:
            raise ContractError(f'kl_weight must not be negative, not {self.kl_weight}')
        if self.seed < 0:
            raise ContractError(f'seed must not be negative, not {self.seed}')
        if self.grad_mode not in GRAD_MODES:
            raise ContractError(f'invalid grad_mode {self.grad_mode!r}, must be one of {GRAD_MODES}')
        if self.task not in TASKS:
            raise ContractError(f'invalid task {self.task!r}, must be one of {TASKS}')
        if not self.time_unit_min > 0:
            raise ContractError(f'time_unit_min must be positive, not {self.time_unit_min}')
        if self.log_every < 1:
            raise ContractError(f'log_every must be at least 1, not {self.log_every}')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'TrainConfig':
        data = dict(data)
        if isinstance(data.get('solver'), Mapping):
            data['solver'] = SolverConfig(**data['solver'])
        return cls(**data)


@dataclass
class PosteriorStats:
    '''Mean and standard deviation of the approximate posterior over z0'''
    mu_z0: Tensor
    sigma_z0: Tensor

    def __post_init__(self):
        if self.mu_z0.shape != self.sigma_z0.shape:
            raise ShapeError(f'mu shape {self.mu_z0.shape} does not match sigma shape {self.sigma_z0.shape}')

    @property
    def latent_dim(self) -> int:
        return self.mu_z0.shape[-1]


@dataclass
class LodeModel:
    '''
    Encoder (GRU plus affine posterior head), latent dynamics and decoder.

    `norm_stats` maps `(node_id, measurement_type)` of the training records to
    the statistics their values were normalized with.
    '''
    gru: GruParams
    head: MlpParams
    dynamics: MlpParams
    decoder: MlpParams
    time_unit_min: float = 60.0
    norm_stats: Dict[Tuple[str, str], NormStats] = field(default_factory=dict)

    def __post_init__(self):
        L = self.decoder.in_dim
        if not (self.dynamics.in_dim == self.dynamics.out_dim == L):
            raise ShapeError(
                f'dynamics maps {self.dynamics.in_dim} -> {self.dynamics.out_dim}, decoder expects latent dim {L}'
            )
        if self.head.in_dim != self.gru.hidden_dim or self.head.out_dim != 2 * L:
            raise ShapeError(
                f'head maps {self.head.in_dim} -> {self.head.out_dim}, expected {self.gru.hidden_dim} -> {2 * L}'
            )
        if self.gru.input_dim != 2 * self.decoder.out_dim + 1:
            raise ShapeError(f'encoder input dim {self.gru.input_dim} != 2 * data_dim + 1')
        if not self.time_unit_min > 0:
            raise ContractError(f'time_unit_min must be positive, not {self.time_unit_min}')

    @classmethod
    def init(
        cls,
        data_dim: int = 1,
        latent_dim: int = 16,
        hidden_dim: int = 40,
        dynamics_units: int = 100,
        dynamics_layers: int = 3,
        rng: Optional[np.random.Generator] = None,
        time_unit_min: float = 60.0,
        init_sigma: float = INIT_SIGMA
    ) -> 'LodeModel':
        '''
        Randomly initialize a model.

        Args:
            data_dim: channels per observation
            latent_dim: latent state size
            hidden_dim: GRU hidden size
            dynamics_units: width of the hidden dynamics layers
            dynamics_layers: affine layers in the dynamics network (at least 1)
            rng: generator for the weights, defaults to the `init` stream of seed 0
            time_unit_min: minutes per model time unit
            init_sigma: posterior standard deviation the untrained encoder reports
        '''
        if min(data_dim, latent_dim, hidden_dim, dynamics_units, dynamics_layers) < 1:
            raise ContractError('all model dimensions must be at least 1')
        if not init_sigma > 0:
            raise ContractError(f'init_sigma must be positive, not {init_sigma}')
        rng = rng if rng is not None else rng_stream(0, 'init')
        gru = dc.init_gru(2 * data_dim + 1, hidden_dim, rng)
        head = dc.init_mlp([hidden_dim, 2 * latent_dim], ['identity'], rng)
        head.biases[0].data[latent_dim:] = math.log(math.expm1(init_sigma))
        dims = [latent_dim] + [dynamics_units] * (dynamics_layers - 1) + [latent_dim]
        dynamics = dc.init_mlp(dims, ['tanh'] * (dynamics_layers - 1) + ['identity'], rng)
        decoder = dc.init_mlp([latent_dim, data_dim], ['identity'], rng)
        return cls(gru, head, dynamics, decoder, time_unit_min)

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_dim

    @property
    def data_dim(self) -> int:
        return self.decoder.out_dim

    @property
    def hidden_dim(self) -> int:
        return self.gru.hidden_dim

    @property
    def dynamics_units(self) -> int:
        return self.dynamics.weights[0].shape[1] if len(self.dynamics.weights) > 1 else self.latent_dim

    @property
    def dynamics_layers(self) -> int:
        return len(self.dynamics.weights)

    def parameters(self) -> Dict[str, Tensor]:
        '''All trainable tensors by name, in a fixed order'''
        out = self.gru.named_tensors('encoder.gru.')
        out.update(self.head.named_tensors('encoder.head.'))
        out.update(self.dynamics.named_tensors('dynamics.'))
        out.update(self.decoder.named_tensors('decoder.'))
        return out

    def copy(self) -> 'LodeModel':
        '''An independent copy with fresh parameter tensors'''
        return copy.deepcopy(self)

    def ode_func(self) -> OdeFunc:
        return OdeFunc.from_mlp(self.dynamics)


def _as_batch(values: ArrayLike, mask: ArrayLike) -> Tuple[FloatArray, np.ndarray]:
    '''values and mask as `B x N x D` float / bool arrays'''
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask)
    if v.shape != m.shape:
        raise ShapeError(f'values shape {v.shape} does not match mask shape {m.shape}')
    if v.ndim == 2:
        v, m = v[:, :, None], m[:, :, None]
    if v.ndim != 3:
        raise ShapeError(f'values must be B x N or B x N x D, got shape {v.shape}')
    return v, m == 1


def _model_times(model: LodeModel, times: ArrayLike) -> FloatArray:
    grid = check_strictly_increasing(times, 'times')
    if grid.size == 0:
        raise ContractError('times must not be empty')
    return (grid - grid[0]) / model.time_unit_min


def encode_batch(model: LodeModel, values: ArrayLike, mask: ArrayLike, times: ArrayLike) -> PosteriorStats:
    '''
    Run the encoder on `B` records sharing one time grid.

    The GRU consumes grid times in reverse order. At each time, the rows
    observed there are updated from `[values * mask, mask, dt]` where `dt` is
    the model-time gap to that row's next later observation (0 for the
    row's first consumed step); the other rows keep their hidden state.

    Args:
        model: the model
        values: `B x N` (or `B x N x D`) normalized values. Unobserved entries are ignored
        mask: same shape, `1` where observed
        times: the `N` grid times in minutes

    Returns:
        PosteriorStats with `B x latent_dim` tensors

    Raises:
        EmptyRecordError: if a row has no observation
    '''
    v, m = _as_batch(values, mask)
    t_model = _model_times(model, times)
    B, N, D = v.shape
    if N != len(t_model) or D != model.data_dim:
        raise ShapeError(f'batch shape {v.shape} does not match {len(t_model)} times and data_dim={model.data_dim}')
    row_observed = m.any(axis=2)
    empty = np.flatnonzero(~row_observed.any(axis=1))
    if empty.size:
        raise EmptyRecordError(f'batch rows {empty.tolist()} have no observed values')

    x_all = np.where(m, v, 0.0)
    m_all = m.astype(np.float64)
    h = Tensor(np.zeros((B, model.hidden_dim)))
    next_time = np.full(B, np.nan)
    for n in np.flatnonzero(row_observed.any(axis=0))[::-1]:
        rows = row_observed[:, n]
        dt = np.where(rows & ~np.isnan(next_time), next_time - t_model[n], 0.0)
        x = Tensor(np.concatenate([x_all[:, n], m_all[:, n], dt[:, None]], axis=1))
        h = dc.select_rows(rows, dc.gru_step(model.gru, x, h), h)
        next_time = np.where(rows, t_model[n], next_time)

    out = dc.linear(h, model.head.weights[0], model.head.biases[0])
    L = model.latent_dim
    return PosteriorStats(dc.slice_cols(out, 0, L), dc.softplus(dc.slice_cols(out, L, 2 * L)))


def encode(model: LodeModel, values: ArrayLike, mask: ArrayLike, times: ArrayLike) -> PosteriorStats:
    '''
    Posterior over z0 for one record (`values`, `mask` of length `N`, or
    `N x D`). Returns vectors of length `latent_dim`.
    '''
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask)
    v, m = (v[None, :], m[None, :]) if v.ndim == 1 else (v[None], m[None])
    ps = encode_batch(model, v, m, times)
    L = model.latent_dim
    return PosteriorStats(dc.reshape(ps.mu_z0, (L,)), dc.reshape(ps.sigma_z0, (L,)))


def sample_latent(ps: PosteriorStats, eps: ArrayLike) -> Tensor:
    '''Reparameterized draw `mu + sigma * eps`'''
    noise = np.asarray(eps, dtype=np.float64)
    if noise.shape != ps.mu_z0.shape:
        raise ShapeError(f'eps shape {noise.shape} does not match posterior shape {ps.mu_z0.shape}')
    return dc.add(ps.mu_z0, dc.mul(ps.sigma_z0, Tensor(noise)))


def decode_states(model: LodeModel, states: Tensor) -> Tensor:
    '''Apply the decoder to every latent state of a `... x latent_dim` tensor'''
    lead = states.shape[:-1]
    rows = int(np.prod(lead, dtype=int))
    flat = dc.reshape(states, (rows, model.latent_dim))
    return dc.reshape(dc.mlp_forward(model.decoder, flat), (*lead, model.data_dim))


def decode(model: LodeModel, traj) -> Tensor:
    '''
    Decoded means at every trajectory time: `len(times) x D` for vector
    states, `len(times) x B x D` for batched states.
    '''
    states = [s if isinstance(s, Tensor) else Tensor(s) for s in traj.states]
    return decode_states(model, dc.stack(states))


def kl_divergence(mu: Tensor, sigma: Tensor) -> Tensor:
    '''
    `KL(N(mu, sigma^2) || N(0, 1))` summed over every element:
    `0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2)`.
    '''
    if mu.shape != sigma.shape:
        raise ShapeError(f'mu shape {mu.shape} does not match sigma shape {sigma.shape}')
    inner = dc.sub(dc.sub(dc.add(dc.square(mu), dc.square(sigma)), 1.0), dc.mul(dc.log(sigma), 2.0))
    return dc.mul(dc.sum(inner), 0.5)


@dataclass
class ElboResult:
    '''
    Per-record averages over a batch: `elbo = recon - kl_weight * kl`.
    `mse` is the mean squared error over scored entries (normalized units).
    '''
    elbo: Tensor
    recon: float
    kl: float
    mse: float
    n_scored: int


@config.default_params
def elbo_batch(
    model: LodeModel,
    values: ArrayLike,
    mask: ArrayLike,
    times: ArrayLike,
    eps: ArrayLike,
    sigma_obs: float = 0.05,
    kl_weight: float = 1.0,
    split_min: Optional[float] = None,
    grad_mode: Optional[GradMode] = None,
    solver: Optional[SolverConfig] = None
) -> ElboResult:
    '''
    Single-sample ELBO estimate for `B` records sharing a grid.

    Args:
        model: the model
        values: `B x N` normalized values
        mask: `B x N` availability
        times: grid times in minutes
        eps: `B x latent_dim` standard normal draws
        sigma_obs: observation noise standard deviation
        kl_weight: multiplier of the KL term
        split_min: when given, the encoder sees only `t <= split_min` and the
            reconstruction scores only `t > split_min`
        grad_mode: gradient path through the solver, default `'backprop'`
        solver: solver settings

    Raises:
        EmptyRecordError: if a row has nothing to encode or the batch nothing to score
        IntegrationDivergedError: if the latent trajectory diverges
    '''
    v, m = _as_batch(values, mask)
    grid = check_strictly_increasing(times, 'times')
    if split_min is None:
        enc_mask, score_mask = m, m
    else:
        before = (grid <= split_min)[None, :, None]
        enc_mask, score_mask = m & before, m & ~before
    n_scored = int(score_mask.sum())
    if n_scored == 0:
        raise EmptyRecordError('batch has no observations to score')

    ps = encode_batch(model, v, enc_mask, grid)
    z0 = sample_latent(ps, eps)
    t_model = _model_times(model, grid)
    states, _ = odeint(model.ode_func(), z0, t_model, solver, grad_mode=grad_mode or 'backprop')
    pred = decode_states(model, states)  # N x B x D

    target = np.transpose(np.where(score_mask, v, 0.0), (1, 0, 2))
    weight = np.transpose(score_mask, (1, 0, 2)).astype(np.float64)
    resid = dc.mul(dc.sub(pred, Tensor(target)), Tensor(weight))
    sse = dc.sum(dc.square(resid))
    const = -n_scored * (math.log(sigma_obs) + 0.5 * math.log(2.0 * math.pi))
    recon = dc.add(dc.mul(sse, -0.5 / sigma_obs ** 2), const)
    kl = kl_divergence(ps.mu_z0, ps.sigma_z0)
    B = v.shape[0]
    elbo = dc.mul(dc.sub(recon, dc.mul(kl, kl_weight)), 1.0 / B)
    return ElboResult(elbo, recon.item() / B, kl.item() / B, sse.item() / n_scored, n_scored)


def elbo(
    model: LodeModel,
    values: ArrayLike,
    mask: ArrayLike,
    times: ArrayLike,
    eps: ArrayLike,
    **kwargs
) -> ElboResult:
    '''`elbo_batch` for a single record; `eps` has length `latent_dim`'''
    noise = np.asarray(eps, dtype=np.float64).reshape(1, -1)
    return elbo_batch(model, np.asarray(values)[None], np.asarray(mask)[None], times, noise, **kwargs)


@dataclass(frozen=True)
class LossRecord:
    '''
    One training iteration. The `test_` fields are the held-out -ELBO and
    MSE% at the same parameters, `None` when training ran without a held-out set.
    '''
    iteration: int
    neg_elbo: float
    mse_pct: float
    test_neg_elbo: Optional[float] = None
    test_mse_pct: Optional[float] = None


@dataclass
class TrainState:
    '''Everything needed to continue training where it stopped'''
    iteration: int = 0
    adam: AdamState = field(default_factory=AdamState)
    log: List[LossRecord] = field(default_factory=list)
    config: Optional[TrainConfig] = None


@dataclass
class TrainResult:
    model: LodeModel
    log: List[LossRecord]
    state: TrainState


def _training_pool(dataset: Dataset, split_min: Optional[float]) -> List[int]:
    pool = []
    times = dataset.times
    for i, rec in enumerate(dataset.records):
        obs = rec.mask == 1
        if split_min is None:
            ok = obs.any()
        else:
            ok = (obs & (times <= split_min)).any() and (obs & (times > split_min)).any()
        if ok:
            pool.append(i)
    return pool


def held_out_loss(model: LodeModel, dataset: Dataset, pool: List[int], cfg: TrainConfig) -> Tuple[float, float]:
    '''
    -ELBO per record and MSE% of the records `pool` of a normalized dataset,
    encoded with zero reparameterization noise (the posterior mean).
    '''
    values, mask = dataset.batch_arrays(pool)
    eps = np.zeros((len(pool), model.latent_dim))
    split = cfg.split_min if cfg.task == 'prediction' else None
    with dc.no_grad():
        res = elbo_batch(
            model, values, mask, dataset.times, eps, sigma_obs=cfg.sigma_obs, kl_weight=cfg.kl_weight,
            split_min=split, grad_mode='backprop', solver=cfg.solver
        )
    return -res.elbo.item(), 100.0 * res.mse


@config.default_params
def train(
    model: LodeModel,
    dataset: Dataset,
    cfg: Optional[TrainConfig] = None,
    state: Optional[TrainState] = None,
    grad_mode: Optional[GradMode] = None,
    solver: Optional[SolverConfig] = None,
    holdout: Optional[Dataset] = None
) -> TrainResult:
    '''
    Maximize the ELBO with Adam on random record batches.

    Each iteration draws a batch and reparameterization noise from the
    `training` stream keyed by the iteration index, so a resumed run repeats
    exactly what an uninterrupted run would have done.

    Args:
        model: the starting model. It is copied, never modified
        dataset: a normalized dataset
        cfg: training settings
        state: a previous `TrainState` to resume from
        grad_mode: overrides `cfg.grad_mode`
        solver: overrides `cfg.solver`
        holdout: a normalized held-out dataset. When given, every iteration
            also logs its -ELBO and MSE% (see `held_out_loss`) before the update

    Returns:
        TrainResult with the trained model, the full loss log and the state to resume from

    Raises:
        ContractError: if a dataset is not normalized
        EmptyRecordError: if no record can be trained (or scored) on
        TrainingDivergedError: if the loss becomes non-finite or the solver diverges
    '''
    cfg = cfg or TrainConfig()
    if grad_mode is not None or solver is not None:
        cfg = replace(cfg, grad_mode=grad_mode or cfg.grad_mode, solver=solver or cfg.solver)
    if not dataset.normalized or (holdout is not None and not holdout.normalized):
        raise ContractError('train needs normalized datasets, see `griddata.normalize`')

    split = cfg.split_min if cfg.task == 'prediction' else None
    pool = _training_pool(dataset, split)
    if not pool:
        raise EmptyRecordError(f'no record in the dataset has observations usable for {cfg.task}')
    test_pool = _training_pool(holdout, split) if holdout is not None else []
    if holdout is not None and not test_pool:
        raise EmptyRecordError(f'no record in the held-out dataset has observations usable for {cfg.task}')

    model = model.copy()
    model.time_unit_min = cfg.time_unit_min
    model.norm_stats = {rec.key: st for rec, st in zip(dataset.records, dataset.norm_stats or ())}
    params = model.parameters()
    if state is None:
        state = TrainState(adam=AdamState(lr=cfg.lr_init), config=cfg)
    else:
        state = TrainState(state.iteration, copy.deepcopy(state.adam), list(state.log), cfg)
    last_finite = state.log[-1].neg_elbo if state.log else None
    batch_size = min(cfg.batch_size, len(pool))
    times = dataset.times

    start = state.iteration
    for it in range(start, start + cfg.iterations):
        rng = rng_stream(cfg.seed, 'training', it)
        batch = rng.choice(pool, size=batch_size, replace=False)
        eps = rng.standard_normal((batch_size, model.latent_dim))
        values, mask = dataset.batch_arrays(batch)
        state.adam.lr = cfg.lr_init * cfg.lr_decay ** it
        for p in params.values():
            p.zero_grad()

        try:
            with dc.Tape():
                res = elbo_batch(
                    model, values, mask, times, eps, sigma_obs=cfg.sigma_obs, kl_weight=cfg.kl_weight,
                    split_min=split, grad_mode=cfg.grad_mode, solver=cfg.solver
                )
                loss = dc.neg(res.elbo)
            neg_elbo = loss.item()
            if not np.isfinite(neg_elbo):
                raise TrainingDivergedError('non-finite loss', it, last_finite)
            dc.backward(loss)
        except IntegrationDivergedError as e:
            _logger.error(f'iteration {it}: {format_exc(e)}')
            raise TrainingDivergedError(f'solver diverged ({e})', it, last_finite) from e
        except TrainingDivergedError:
            _logger.error(f'iteration {it}: non-finite loss, last finite loss {last_finite}')
            raise
        if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values()):
            _logger.error(f'iteration {it}: non-finite gradient')
            raise TrainingDivergedError('non-finite gradient', it, last_finite)

        test_neg_elbo = test_mse = None
        if holdout is not None:
            try:
                test_neg_elbo, test_mse = held_out_loss(model, holdout, test_pool, cfg)
            except IntegrationDivergedError as e:
                _logger.warning(f'iteration {it}: held-out evaluation diverged, {format_exc(e)}')
                test_neg_elbo = test_mse = float('nan')

        dc.adam_update(state.adam, params)
        state.log.append(LossRecord(it, neg_elbo, 100.0 * res.mse, test_neg_elbo, test_mse))
        last_finite = neg_elbo
        if (it + 1) % cfg.log_every == 0:
            held = '' if test_neg_elbo is None else f' test -ELBO={test_neg_elbo:.4f} test MSE={test_mse:.4f}%'
            _logger.info(
                f'iteration {it + 1}: -ELBO={neg_elbo:.4f} MSE={100.0 * res.mse:.4f}%{held} lr={state.adam.lr:.5f}'
            )
        else:
            _logger.debug(f'iteration {it}: batch={batch.tolist()} -ELBO={neg_elbo:.4f}')

    state.iteration = start + cfg.iterations
    return TrainResult(model, state.log, state)


# ---------------------------------------------------------------- inference

def _record_stats(model: LodeModel, record: Record, stats: Optional[NormStats]) -> NormStats:
    if stats is not None:
        return stats
    if record.key in model.norm_stats:
        return model.norm_stats[record.key]
    _, observed = record.observed()
    if observed.size == 0:
        raise EmptyRecordError(f'record {record.key} has no observed values')
    return NormStats(float(observed.min()), float(observed.max()))


def _infer(
    model: LodeModel,
    record: Record,
    query_times: FloatArray,
    stats: Optional[NormStats],
    solver: Optional[SolverConfig]
) -> FloatArray:
    if record.n_observed == 0:
        raise EmptyRecordError(f'record {record.key} has no observed values')
    st = _record_stats(model, record, stats)
    norm = normalize_values(np.where(record.mask == 1, record.values, 0.0), st)
    epoch = float(record.times[0])
    with dc.no_grad():
        ps = encode(model, norm, record.mask, record.times)
        grid = sorted_union([record.times, query_times])
        traj = integrate(model.ode_func(), ps.mu_z0.data, (grid - epoch) / model.time_unit_min, solver)
        decoded = decode(model, traj).data[:, 0]
    rows = np.searchsorted(grid, query_times)
    return denormalize(decoded[rows], st)


@config.default_params
def impute(
    model: LodeModel,
    record: Record,
    query_times: ArrayLike,
    stats: Optional[NormStats] = None,
    solver: Optional[SolverConfig] = None
) -> FloatArray:
    '''
    Reconstruct a record at arbitrary times inside (or after) its window.

    The whole record is encoded, the posterior mean is used as z0 and the
    latent trajectory is integrated from the record's first time.

    Args:
        model: a trained model
        record: the observed record, in engineering units
        query_times: strictly increasing minutes, none before `record.times[0]`
        stats: normalization statistics. Defaults to the ones the model was trained
            with for this record, else the record's own observed min / max
        solver: solver settings

    Returns:
        Values at `query_times`, in engineering units

    Raises:
        EmptyRecordError: if the record has no observations
        ContractError: if a query time precedes the record
    '''
    query = check_strictly_increasing(query_times, 'query_times')
    if query.size == 0:
        return np.zeros(0)
    if query[0] < record.times[0]:
        raise ContractError(f'query time {query[0]} precedes the record start {record.times[0]}')
    return _infer(model, record, query, stats, solver)


@config.default_params
def predict(
    model: LodeModel,
    record: Record,
    horizon_times: ArrayLike,
    stats: Optional[NormStats] = None,
    solver: Optional[SolverConfig] = None
) -> FloatArray:
    '''
    Extrapolate a conditioning window into the future.

    Args:
        model: a trained model
        record: the conditioning window (see `condition_window`)
        horizon_times: strictly increasing minutes, all after the window
        stats: normalization statistics, as for `impute`
        solver: solver settings

    Returns:
        Values at `horizon_times`, in engineering units (empty for an empty horizon)

    Raises:
        EmptyRecordError: if the window has no observations
        ContractError: if a horizon time is not after the window
    '''
    horizon = check_strictly_increasing(horizon_times, 'horizon_times')
    if record.n_observed == 0:
        raise EmptyRecordError(f'conditioning window of {record.key} has no observed values')
    if horizon.size == 0:
        return np.zeros(0)
    if horizon[0] <= record.times[-1]:
        raise ContractError(f'horizon time {horizon[0]} does not exceed the last conditioning time {record.times[-1]}')
    return _infer(model, record, horizon, stats, solver)


def condition_window(record: Record, split_min: float) -> Record:
    '''The part of a record at or before `split_min`'''
    keep = record.times <= split_min
    if not keep.any():
        raise EmptyRecordError(f'record {record.key} has no grid time at or before {split_min}')
    return Record(record.node_id, record.measurement_type, record.values[keep], record.times[keep], record.mask[keep])


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: LodeModel
    state: Optional[TrainState] = None
    seed: Optional[int] = None


def save_checkpoint(path: PathLike, model: LodeModel, state: Optional[TrainState] = None, seed: Optional[int] = None):
    '''
    Write a model (and optionally its training state) to a `.npz` file.

    Every parameter is stored as a named float64 array; the format version,
    dimensions, normalization statistics, training config, Adam moments and
    loss log go along as JSON metadata.
    '''
    arrays: Dict[str, np.ndarray] = {f'param/{k}': v.data for k, v in model.parameters().items()}
    meta: Dict[str, Any] = {
        'format_version': CHECKPOINT_VERSION,
        'data_dim': model.data_dim,
        'latent_dim': model.latent_dim,
        'hidden_dim': model.hidden_dim,
        'dynamics_units': model.dynamics_units,
        'dynamics_layers': model.dynamics_layers,
        'time_unit_min': model.time_unit_min,
        'norm_stats': [[k[0], k[1], s.min, s.max] for k, s in model.norm_stats.items()],
        'seed': seed,
        'state': None,
    }
    if state is not None:
        for k, arr in state.adam.m.items():
            arrays[f'adam_m/{k}'] = arr
            arrays[f'adam_v/{k}'] = state.adam.v[k]
        meta['state'] = {
            'iteration': state.iteration,
            'adam': {k: getattr(state.adam, k) for k in ('lr', 'beta1', 'beta2', 'eps', 'step')},
            'log': [[r.iteration, r.neg_elbo, r.mse_pct, r.test_neg_elbo, r.test_mse_pct] for r in state.log],
            'config': state.config.to_dict() if state.config is not None else None,
        }
    arrays[_META_KEY] = np.array(json.dumps(meta))
    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    _logger.info(f'wrote checkpoint to {path} ({len(arrays) - 1} arrays)')


def _loss_record(row: List[Any]) -> LossRecord:
    held = [None if x is None else float(x) for x in row[3:5]]
    return LossRecord(int(row[0]), float(row[1]), float(row[2]), *held)


def load_checkpoint(path: PathLike, data_dim: Optional[int] = None) -> Checkpoint:
    '''
    Read a checkpoint written by `save_checkpoint`.

    Args:
        path: the file
        data_dim: if given, the data dimension the caller expects

    Raises:
        FileNotFoundError: if the file does not exist
        CheckpointError: if the file is not a readable checkpoint
        CheckpointVersionError: on a format version or data dimension mismatch
    '''
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f'cannot read checkpoint {path}: {format_exc(e)}') from e
    if _META_KEY not in arrays:
        raise CheckpointError(f'{path} has no checkpoint metadata')
    try:
        meta = json.loads(str(arrays.pop(_META_KEY)))
    except json.JSONDecodeError as e:
        raise CheckpointError(f'corrupt checkpoint metadata in {path}') from e

    version = meta.get('format_version')
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f'checkpoint format version {version!r}, expected {CHECKPOINT_VERSION}')
    if data_dim is not None and meta['data_dim'] != data_dim:
        raise CheckpointVersionError(f'checkpoint data_dim {meta["data_dim"]} does not match {data_dim}')

    try:
        model = LodeModel.init(
            meta['data_dim'], meta['latent_dim'], meta['hidden_dim'], meta['dynamics_units'],
            meta['dynamics_layers'], np.random.default_rng(0), meta['time_unit_min']
        )
        for name, tensor in model.parameters().items():
            stored = arrays[f'param/{name}']
            if stored.shape != tensor.shape:
                raise CheckpointError(f'parameter {name} has shape {stored.shape}, expected {tensor.shape}')
            tensor.data = np.array(stored, dtype=np.float64)
        model.norm_stats = {(n, t): NormStats(lo, hi) for n, t, lo, hi in meta['norm_stats']}

        state = None
        if meta.get('state') is not None:
            raw = meta['state']
            adam = AdamState(**raw['adam'])
            for key in arrays:
                if key.startswith('adam_m/'):
                    name = key[len('adam_m/'):]
                    adam.m[name] = np.array(arrays[key])
                    adam.v[name] = np.array(arrays[f'adam_v/{name}'])
            state = TrainState(
                raw['iteration'], adam,
                [_loss_record(row) for row in raw['log']],
                TrainConfig.from_dict(raw['config']) if raw.get('config') is not None else None,
            )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f'incomplete checkpoint {path}: {format_exc(e)}') from e
    return Checkpoint(model, state, meta.get('seed'))
