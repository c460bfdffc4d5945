'''
Command-line front end: `generate`, `train`, `impute`, `predict` and
`evaluate`, configured by a flat `key = value` file whose keys are the
`RunConfig` field names, with a few command-line overrides.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
3 numerical divergence.
'''
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Union, get_args, get_origin, get_type_hints

import numpy as np

from . import evaluation, griddata, lode
from ._version import __version__
from .exceptions import (CheckpointError, CheckpointVersionError, ConfigError,
                         ContractError, DivergenceError, EmptyRecordError,
                         GridLodeError, InfeasibleLoadingError, SchemaError,
                         format_exc)
from .helpers import rng_stream
from .odesolve import SolverConfig
from .types import GRAD_MODES, TASKS, GradMode, Task

_logger = logging.getLogger(__name__)

COMMANDS = ('generate', 'train', 'impute', 'predict', 'evaluate')

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


@dataclass(frozen=True)
class RunConfig:
    '''
    Everything one command needs. Paths left empty default to files inside `out`.
    '''
    out: str = 'run'
    seed: int = 0
    feeder: Optional[str] = None
    '''Feeder file, the built-in 37-node feeder when unset'''
    dataset: Optional[str] = None
    truth: Optional[str] = None
    checkpoint: Optional[str] = None

    # generate
    day_minutes: int = griddata.DAY_MINUTES
    smart_meter_rate: int = 15
    scada_rate: int = 1
    scada_every: int = 4
    noise_frac: float = 0.10
    missing_prob: float = 0.05

    # train
    holdout_frac: float = 0.2
    batch_size: int = 10
    iterations: int = 200
    lr_init: float = 0.01
    lr_decay: float = 0.999
    sigma_obs: float = 0.05
    kl_weight: float = 1.0
    grad_mode: GradMode = 'backprop'
    task: Task = 'imputation'
    time_unit_min: float = 60.0
    log_every: int = 10
    latent_dim: int = 16
    hidden_dim: int = 40
    dynamics_units: int = 100
    dynamics_layers: int = 3
    rtol: float = 1e-6
    atol: float = 1e-7
    max_steps: int = 100000
    resume: bool = False

    # impute / predict / evaluate
    split_min: float = 720.0
    query_step_min: float = 1.0
    '''Spacing of the query grid; 0 queries the dataset's own grid'''
    horizon_end_min: Optional[float] = None
    '''Last prediction time, defaults to the last time of the dataset'''

    @property
    def dataset_path(self) -> str:
        return self.dataset or os.path.join(self.out, 'dataset.csv')

    @property
    def truth_path(self) -> str:
        return self.truth or os.path.join(self.out, 'truth.csv')

    @property
    def checkpoint_path(self) -> str:
        return self.checkpoint or os.path.join(self.out, 'model.npz')

    @classmethod
    def from_mapping(cls, values: Dict[str, str], base: Optional['RunConfig'] = None) -> 'RunConfig':
        '''
        Build a config from string values, converting each to its field type.

        Raises:
            ConfigError: on unknown keys or unconvertible values
        '''
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f'unknown config keys: {", ".join(unknown)}')
        converted = {}
        for key, raw in values.items():
            try:
                converted[key] = _convert(hints[key], raw)
            except ValueError as e:
                raise ConfigError(f'invalid value for {key!r}: {raw!r} ({e})') from e
        return replace(base or cls(), **converted)

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        '''
        Read a flat `key = value` file (`#` comments allowed, no sections).

        Raises:
            ConfigError: if the file is missing or invalid
        '''
        if not os.path.isfile(path):
            raise ConfigError(f'config file not found: {path}')
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=('#', ';'))
        try:
            with open(path, encoding='utf-8') as f:
                parser.read_string('[run]\n' + f.read(), source=path)
        except configparser.Error as e:
            raise ConfigError(f'invalid config file {path}: {e}') from e
        return cls.from_mapping(dict(parser['run']))

    def train_config(self) -> lode.TrainConfig:
        return lode.TrainConfig(
            batch_size=self.batch_size, iterations=self.iterations, lr_init=self.lr_init,
            lr_decay=self.lr_decay, sigma_obs=self.sigma_obs, kl_weight=self.kl_weight, seed=self.seed,
            grad_mode=self.grad_mode, task=self.task, split_min=self.split_min,
            time_unit_min=self.time_unit_min, log_every=self.log_every, solver=self.solver_config(),
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(rtol=self.rtol, atol=self.atol, max_steps=self.max_steps)

    def validate(self, command: str):
        '''
        Check values and referenced input files for `command` without touching
        the filesystem otherwise.

        Raises:
            ConfigError: describing the first problem found
        '''
        if command not in COMMANDS:
            raise ConfigError(f'unknown command {command!r}, must be one of {COMMANDS}')
        if self.seed < 0:
            raise ConfigError(f'seed must not be negative, not {self.seed}')
        if not self.out:
            raise ConfigError('out must not be empty')
        if os.path.exists(self.out) and not os.path.isdir(self.out):
            raise ConfigError(f'out {self.out!r} exists and is not a directory')
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f'invalid grad_mode {self.grad_mode!r}, must be one of {GRAD_MODES}')
        if self.task not in TASKS:
            raise ConfigError(f'invalid task {self.task!r}, must be one of {TASKS}')
        if self.query_step_min < 0:
            raise ConfigError(f'query_step_min must not be negative, not {self.query_step_min}')
        if not 0 <= self.holdout_frac < 1:
            raise ConfigError(f'holdout_frac must be in [0, 1), not {self.holdout_frac}')
        try:
            # library types validate their own fields
            self.train_config()
        except ContractError as e:
            raise ConfigError(str(e)) from e

        if command == 'generate':
            if self.feeder is not None and not os.path.isfile(self.feeder):
                raise ConfigError(f'feeder file not found: {self.feeder}')
            for name in ('day_minutes', 'smart_meter_rate', 'scada_rate', 'scada_every'):
                if getattr(self, name) < 1:
                    raise ConfigError(f'{name} must be at least 1, not {getattr(self, name)}')
            for name in ('smart_meter_rate', 'scada_rate'):
                if self.day_minutes % getattr(self, name):
                    raise ConfigError(f'{name}={getattr(self, name)} does not divide day_minutes={self.day_minutes}')
            if not 0 <= self.missing_prob < 1:
                raise ConfigError(f'missing_prob must be in [0, 1), not {self.missing_prob}')
            if self.noise_frac < 0:
                raise ConfigError(f'noise_frac must not be negative, not {self.noise_frac}')
            return

        _require_file(self.dataset_path, 'dataset')
        if command == 'train':
            if self.resume:
                _require_file(self.checkpoint_path, 'checkpoint')
            for name in ('latent_dim', 'hidden_dim', 'dynamics_units', 'dynamics_layers'):
                if getattr(self, name) < 1:
                    raise ConfigError(f'{name} must be at least 1, not {getattr(self, name)}')
            return

        _require_file(self.checkpoint_path, 'checkpoint')
        if command == 'evaluate':
            _require_file(self.truth_path, 'truth')
        if self.horizon_end_min is not None and not self.horizon_end_min > self.split_min:
            raise ConfigError(f'horizon_end_min ({self.horizon_end_min}) must exceed split_min ({self.split_min})')


def _require_file(path: str, what: str):
    if not os.path.isfile(path):
        raise ConfigError(f'{what} file not found: {path}')


def _convert(kind: Any, raw: str) -> Any:
    raw = raw.strip()
    if get_origin(kind) is Union:
        if raw.lower() in ('', 'none'):
            return None
        kind = next(a for a in get_args(kind) if a is not type(None))
    if get_origin(kind) is not None:
        # Literal types
        return raw
    if kind is bool:
        lowered = raw.lower()
        if lowered in ('1', 'true', 'yes', 'on'):
            return True
        if lowered in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError('expected a boolean')
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


# ---------------------------------------------------------------- commands

def _node_split(cfg: RunConfig, dataset: griddata.Dataset):
    if cfg.holdout_frac == 0:
        ids = dataset.node_ids
        return ids, ids
    return griddata.split_nodes(dataset, cfg.holdout_frac, cfg.seed)


def cmd_generate(cfg: RunConfig) -> Dict[str, Any]:
    '''Write `dataset.csv`, `truth.csv` and `feeder.txt` into `cfg.out`'''
    spec = griddata.load_feeder(cfg.feeder) if cfg.feeder else griddata.default_feeder()
    truth = griddata.generate_profiles(spec, cfg.day_minutes, cfg.seed)
    records = griddata.sample_multirate(
        truth, cfg.smart_meter_rate, cfg.scada_rate, cfg.noise_frac, cfg.missing_prob, cfg.seed, cfg.scada_every
    )
    dataset = griddata.unify_time_grid(records)

    os.makedirs(cfg.out, exist_ok=True)
    griddata.save_dataset(os.path.join(cfg.out, 'dataset.csv'), dataset)
    griddata.save_dataset(os.path.join(cfg.out, 'truth.csv'), truth.to_dataset())
    griddata.save_feeder(os.path.join(cfg.out, 'feeder.txt'), spec)

    rows = {r.measurement_type: len(r.values) for r in records}
    summary = {
        'nodes': spec.n_nodes,
        'records': len(records),
        'observations': sum(r.n_observed for r in records),
        'rows_per_type': rows,
    }
    print(
        f'generated {summary["nodes"]} nodes, {summary["records"]} records, '
        f'{summary["observations"]} observations '
        f'({", ".join(f"{k}: {v} rows" for k, v in sorted(rows.items()))})'
    )
    return summary


def cmd_train(cfg: RunConfig) -> lode.TrainResult:
    '''
    Train on the smart-meter records of the non held-out nodes, tracking the
    held-out nodes' loss; write `model.npz` and `loss_log.csv`
    '''
    dataset = griddata.load_dataset(cfg.dataset_path)
    if not dataset.records:
        raise EmptyRecordError(f'dataset {cfg.dataset_path} is empty')
    train_ids, held_out = _node_split(cfg, dataset)
    train_set = griddata.normalize(griddata.meter_records(dataset, train_ids))
    holdout = None
    if cfg.holdout_frac > 0:
        holdout = griddata.normalize(griddata.meter_records(dataset, held_out))

    state = None
    if cfg.resume:
        ckpt = lode.load_checkpoint(cfg.checkpoint_path, data_dim=1)
        trained_on = set(ckpt.model.norm_stats)
        if trained_on and trained_on != {r.key for r in train_set.records}:
            raise CheckpointVersionError(
                f'checkpoint {cfg.checkpoint_path} was trained on other records than this run would resume on'
            )
        model, state = ckpt.model, ckpt.state
    else:
        model = lode.LodeModel.init(
            1, cfg.latent_dim, cfg.hidden_dim, cfg.dynamics_units, cfg.dynamics_layers,
            rng_stream(cfg.seed, 'init'), cfg.time_unit_min
        )

    os.makedirs(cfg.out, exist_ok=True)
    result = lode.train(model, train_set, cfg.train_config(), state, holdout=holdout)
    lode.save_checkpoint(cfg.checkpoint_path, result.model, result.state, seed=cfg.seed)
    evaluation.save_loss_log(os.path.join(cfg.out, 'loss_log.csv'), result.log)
    if result.log:
        first, last = result.log[0], result.log[-1]
        print(
            f'trained {len(result.log)} iterations: -ELBO {first.neg_elbo:.4f} -> {last.neg_elbo:.4f}, '
            f'MSE {first.mse_pct:.4f}% -> {last.mse_pct:.4f}%'
        )
    else:
        print('trained 0 iterations')
    return result


def check_checkpoint(ckpt: lode.Checkpoint, dataset: griddata.Dataset, path: str):
    '''
    Raise `CheckpointVersionError` unless every record the checkpoint was
    trained on is in the dataset
    '''
    available = {r.key for r in dataset.records}
    missing = sorted(set(ckpt.model.norm_stats) - available)
    if missing:
        shown = ', '.join(f'{n}/{t}' for n, t in missing[:5]) + (' ...' if len(missing) > 5 else '')
        raise CheckpointVersionError(
            f'checkpoint {path} was trained on {len(missing)} records this dataset does not have ({shown})'
        )


def _load_inputs(cfg: RunConfig):
    dataset = griddata.load_dataset(cfg.dataset_path)
    ckpt = lode.load_checkpoint(cfg.checkpoint_path, data_dim=1)
    check_checkpoint(ckpt, dataset, cfg.checkpoint_path)
    truth = griddata.load_dataset(cfg.truth_path) if os.path.isfile(cfg.truth_path) else None
    return dataset, ckpt, truth


def _warn_task(ckpt: lode.Checkpoint, task: str):
    trained = ckpt.state.config.task if ckpt.state is not None and ckpt.state.config is not None else None
    if trained is not None and trained != task:
        _logger.warning(f'evaluating {task} with a model trained for {trained}')


def _query_grid(cfg: RunConfig, dataset: griddata.Dataset, start: float, end: float, after: bool = False):
    if cfg.query_step_min == 0:
        grid = dataset.times
    else:
        grid = np.arange(dataset.times[0], end + cfg.query_step_min / 2, cfg.query_step_min)
    grid = grid[grid <= end]
    return grid[grid > start] if after else grid[grid >= start]


def _values_dataset(keys: List, times: np.ndarray, values: List[np.ndarray]) -> griddata.Dataset:
    ones = np.ones(len(times), dtype=np.int8)
    return griddata.Dataset(tuple(griddata.Record(node, kind, v, times, ones) for (node, kind), v in zip(keys, values)))


def _write_report(cfg: RunConfig, report: evaluation.EvalReport):
    report.save(os.path.join(cfg.out, f'report_{report.task}.csv'))
    folder = os.path.join(cfg.out, f'series_{report.task}')
    os.makedirs(folder, exist_ok=True)
    for (node, kind), frame in report.series.items():
        evaluation.save_series(os.path.join(folder, f'{node}_{kind}.csv'), frame)
    print(
        f'{report.task}: lode MSE {report.lode_mse_pct:.4f}%, {report.baseline} MSE '
        f'{report.baseline_mse_pct:.4f}%' + (' (extrapolation)' if report.extrapolation else '')
    )


def cmd_impute(cfg: RunConfig) -> Optional[evaluation.EvalReport]:
    '''Impute every smart-meter record on the query grid; report against truth when available'''
    dataset, ckpt, truth = _load_inputs(cfg)
    _warn_task(ckpt, 'imputation')
    solver = cfg.solver_config()
    targets = dataset.select(measurement_types=('P', 'Q')).records
    if not targets:
        raise EmptyRecordError('dataset has no smart-meter records to impute')
    grid = _query_grid(cfg, dataset, dataset.times[0], dataset.times[-1])
    values = [lode.impute(ckpt.model, rec, grid, stats=evaluation.record_stats(rec), solver=solver) for rec in targets]
    imputed = _values_dataset([r.key for r in targets], grid, values)

    report = None
    if truth is not None:
        _, held_out = _node_split(cfg, dataset)
        report = evaluation.evaluate_imputation(ckpt.model, dataset, truth, held_out, solver=solver)
        report.loss_log = ckpt.state.log if ckpt.state else None

    os.makedirs(cfg.out, exist_ok=True)
    griddata.save_dataset(os.path.join(cfg.out, 'imputed.csv'), imputed)
    print(f'imputed {len(targets)} records at {len(grid)} times')
    if report is not None:
        _write_report(cfg, report)
    return report


def cmd_predict(cfg: RunConfig) -> Optional[evaluation.EvalReport]:
    '''Predict every smart-meter record past `split_min`; report against truth when available'''
    dataset, ckpt, truth = _load_inputs(cfg)
    _warn_task(ckpt, 'prediction')
    solver = cfg.solver_config()
    targets = dataset.select(measurement_types=('P', 'Q')).records
    if not targets:
        raise EmptyRecordError('dataset has no smart-meter records to predict')
    end = cfg.horizon_end_min if cfg.horizon_end_min is not None else float(dataset.times[-1])

    windows = [lode.condition_window(rec, cfg.split_min) for rec in targets]
    horizon = _query_grid(cfg, dataset, max(float(w.times[-1]) for w in windows), end, after=True)
    values = []
    for rec, window in zip(targets, windows):
        stats = evaluation.record_stats(rec)
        values.append(lode.predict(ckpt.model, window, horizon, stats=stats, solver=solver))
    predicted = _values_dataset([r.key for r in targets], horizon, values)

    report = None
    if truth is not None:
        _, held_out = _node_split(cfg, dataset)
        report = evaluation.evaluate_prediction(
            ckpt.model, dataset, truth, held_out, cfg.split_min, horizon_times=horizon, solver=solver
        )
        report.loss_log = ckpt.state.log if ckpt.state else None

    os.makedirs(cfg.out, exist_ok=True)
    griddata.save_dataset(os.path.join(cfg.out, 'predicted.csv'), predicted)
    print(f'predicted {len(targets)} records at {len(horizon)} times up to t={end:g} min')
    if report is not None:
        _write_report(cfg, report)
    return report


def cmd_evaluate(cfg: RunConfig) -> List[evaluation.EvalReport]:
    '''
    Evaluate both tasks on the held-out nodes and write their reports. The
    prediction horizon runs from `split_min` to `horizon_end_min` (default:
    the end of the truth) on the query grid
    '''
    dataset, ckpt, truth = _load_inputs(cfg)
    if truth is None:
        raise FileNotFoundError(f'evaluate needs a truth file, {cfg.truth_path} does not exist')
    solver = cfg.solver_config()
    _, held_out = _node_split(cfg, dataset)
    horizon = None
    if cfg.horizon_end_min is not None:
        horizon = _query_grid(cfg, truth, cfg.split_min, cfg.horizon_end_min, after=True)
    if ckpt.state is not None and ckpt.state.config is not None:
        _logger.info(f'evaluating a model trained for {ckpt.state.config.task}')
    reports = [
        evaluation.evaluate_imputation(ckpt.model, dataset, truth, held_out, solver=solver),
        evaluation.evaluate_prediction(
            ckpt.model, dataset, truth, held_out, cfg.split_min, horizon_times=horizon, solver=solver
        ),
    ]
    os.makedirs(cfg.out, exist_ok=True)
    for report in reports:
        report.loss_log = ckpt.state.log if ckpt.state else None
        report.config = {**report.config, **asdict(cfg)}
        _write_report(cfg, report)
    return reports


_HANDLERS: Dict[str, Callable[[RunConfig], Any]] = {
    'generate': cmd_generate,
    'train': cmd_train,
    'impute': cmd_impute,
    'predict': cmd_predict,
    'evaluate': cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='grid_lode',
        description='latent ODE imputation and prediction for multi-rate grid measurements'
    )
    parser.add_argument('command', nargs='?', choices=COMMANDS, help='what to run')
    parser.add_argument('-c', '--config', help='flat key = value config file', metavar='PATH')
    parser.add_argument('-s', '--seed', type=int, help='run seed (overrides the config file)')
    parser.add_argument('-o', '--out', help='output directory', metavar='DIR')
    parser.add_argument('--checkpoint', help='model checkpoint path', metavar='PATH')
    parser.add_argument('--grad-mode', choices=GRAD_MODES, help='gradient path through the ODE solver')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='more log output (repeatable)')
    parser.add_argument('-V', '--version', action='store_true', help='print the current version')
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        'seed': args.seed, 'out': args.out, 'checkpoint': args.checkpoint, 'grad_mode': args.grad_mode,
    }
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def main(argv: Optional[Sequence[str]] = None) -> int:
    '''
    Run the command line interface.

    Returns:
        The process exit code
    '''
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format='%(levelname)s %(name)s: %(message)s'
    )

    if args.version:
        print(__version__)
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print('grid_lode: error: a command is required', file=sys.stderr)
        return EXIT_CONFIG

    try:
        cfg = load_run_config(args)
        cfg.validate(args.command)
        _HANDLERS[args.command](cfg)
    except (ConfigError, CheckpointVersionError, SchemaError, ContractError,
            EmptyRecordError, InfeasibleLoadingError) as e:
        print(f'grid_lode: error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f'grid_lode: diverged: {e}', file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as e:
        print(f'grid_lode: I/O error: {e}', file=sys.stderr)
        return EXIT_IO
    except GridLodeError as e:
        _logger.error(format_exc(e))
        print(f'grid_lode: error: {e}', file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
