import logging
from typing import Optional

from ._version import __author__, __version__  # noqa: F401
from . import config
from .evaluation import (EvalReport, evaluate_imputation,  # noqa: F401
                         evaluate_prediction, hold_last, linear_interp,
                         mse_percent)
from .exceptions import GridLodeError, format_exc  # noqa: F401
from .griddata import (Dataset, FeederSpec, NormStats, Record,  # noqa: F401
                       default_feeder, generate_profiles, load_dataset,
                       meter_records, normalize, sample_multirate, save_dataset,
                       split_nodes, unify_time_grid)
from .helpers import rng_stream
from .lode import (LodeModel, TrainConfig, TrainResult, impute,  # noqa: F401
                   load_checkpoint, predict, save_checkpoint, train)
from .odesolve import SolverConfig, integrate, odeint  # noqa: F401
from .types import GradMode

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())


@config.default_params
def fit(
    dataset: Dataset,
    cfg: Optional[TrainConfig] = None,
    latent_dim: int = 16,
    hidden_dim: int = 40,
    grad_mode: Optional[GradMode] = None,
    solver: Optional[SolverConfig] = None
) -> TrainResult:
    '''
    Initialize a model and train it on a dataset in one call.

    Args:
        dataset: records on a shared grid, normalized or not. Only the
            smart-meter records are trained on, on the times they observe
        cfg: training settings. Its seed also seeds the initial weights
        latent_dim: size of the latent state
        hidden_dim: size of the encoder's recurrent state
        grad_mode: see `grid_lode.config.GRAD_MODE`
        solver: see `grid_lode.config.SOLVER`

    Returns:
        The `TrainResult` of `grid_lode.lode.train`

    Example:
        ```python
        import grid_lode

        truth = grid_lode.generate_profiles(grid_lode.default_feeder(), seed=1)
        dataset = grid_lode.unify_time_grid(grid_lode.sample_multirate(truth, seed=1))
        result = grid_lode.fit(dataset, grid_lode.TrainConfig(iterations=20, seed=1))
        print(result.log[-1])
        ```
    '''
    cfg = cfg or TrainConfig()
    dataset = meter_records(dataset)
    if not dataset.normalized:
        dataset = normalize(dataset)
    model = LodeModel.init(
        latent_dim=latent_dim, hidden_dim=hidden_dim,
        rng=rng_stream(cfg.seed, 'init'), time_unit_min=cfg.time_unit_min
    )
    _logger.debug(f'fitting a latent_dim={latent_dim} model on {len(dataset.records)} records')
    return train(model, dataset, cfg, grad_mode=grad_mode, solver=solver)
