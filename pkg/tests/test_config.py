from pytest import MonkeyPatch

from grid_lode import config
from grid_lode.odesolve import SolverConfig


def test_default_params(monkeypatch: MonkeyPatch):
    func = config.default_params(lambda grad_mode=None, solver=None: {'grad_mode': grad_mode, 'solver': solver})

    assert func() == {
        'grad_mode': config.GRAD_MODE,
        'solver': config.SOLVER,
    }, 'sets default kwarg values'

    solver = SolverConfig(rtol=1e-3)
    monkeypatch.setattr(config, 'GRAD_MODE', 'adjoint')
    monkeypatch.setattr(config, 'SOLVER', solver)
    assert func() == {'grad_mode': 'adjoint', 'solver': solver}

    assert func(grad_mode=None, solver=None) == {
        'grad_mode': None, 'solver': None
    }, 'should not override kwargs'


def test_only_accepted_params_are_set(monkeypatch: MonkeyPatch):
    monkeypatch.setattr(config, 'SOLVER', SolverConfig())
    func = config.default_params(lambda solver=None: solver)
    # would raise TypeError if grad_mode were passed
    assert func() is config.SOLVER
