import numpy as np
import pytest
from scipy.linalg import expm

from grid_lode import diffcore as dc
from grid_lode.exceptions import ContractError, IntegrationDivergedError, ShapeError
from grid_lode.odesolve import (STAGES, AdjointState, OdeFunc, SolverConfig, adjoint_backward, dopri5_step,
                                fixed_step_integrate, integrate, odeint)

from .helpers import linear_dynamics, scaled_dynamics

ZERO = OdeFunc(lambda z: dc.mul(z, 0.0))


class TestSolverConfig:
    def test_resolve_defaults(self):
        cfg = SolverConfig().resolve(2.0)
        assert cfg.h_init == 0.02
        assert cfg.h_min == 2e-10
        assert cfg.h_max == 2.0

    def test_explicit_bounds_kept(self):
        cfg = SolverConfig(h_init=0.5, h_max=0.25).resolve(10.0)
        assert cfg.h_init == 0.25 and cfg.h_max == 0.25

    @pytest.mark.parametrize('kwargs', [
        {'rtol': 0}, {'atol': -1}, {'max_steps': 0}, {'safety': 1.5}, {'h_min': 2.0, 'h_max': 1.0}, {'h_init': 0}
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ContractError):
            SolverConfig(**kwargs)


class TestDopri5Step:
    def test_zero_dynamics(self):
        step = dopri5_step(ZERO, 0.0, np.array([1.0, -2.0]), 0.1)
        assert step.z_next.tolist() == [1.0, -2.0]
        assert step.err_norm == 0.0 and step.accepted
        assert step.h_next == 0.5, 'zero error grows the step by the maximum factor'

    def test_exponential_growth(self):
        step = dopri5_step(scaled_dynamics(1.0), 0.0, np.array([1.0]), 0.1)
        assert abs(step.z_next[0] - np.exp(0.1)) < 1e-8
        assert step.accepted and len(step.stages) == STAGES

    def test_stiff_step_is_rejected(self):
        cfg = SolverConfig(rtol=1e-6, atol=1e-6)
        step = dopri5_step(scaled_dynamics(-1000.0), 0.0, np.array([1.0]), 0.1, cfg)
        assert not step.accepted
        assert step.h_next < 0.1
        assert step.h_next == pytest.approx(0.02), 'shrink factor is clamped at 0.2'

    def test_non_finite_stage(self):
        blowup = OdeFunc(lambda z: dc.mul(z, float('inf')))
        with pytest.raises(IntegrationDivergedError) as info:
            dopri5_step(blowup, 3.0, np.array([1.0]), 0.1)
        assert info.value.t == 3.0 and info.value.h == 0.1

    def test_invalid_step(self):
        with pytest.raises(ContractError):
            dopri5_step(ZERO, 0.0, np.array([1.0]), 0.0)


class TestIntegrate:
    def test_zero_dynamics(self):
        traj = integrate(ZERO, [3.0, 4.0], [0.0, 0.3, 7.0])
        assert all(s.tolist() == [3.0, 4.0] for s in traj.states)

    def test_first_state_is_z0(self):
        traj = integrate(scaled_dynamics(1.0), [1.5], [2.0, 3.0])
        assert traj.states[0].tolist() == [1.5]

    def test_exponential(self):
        traj = integrate(scaled_dynamics(1.0), [1.0], [0.0, 1.0])
        assert abs(traj.states[-1][0] - 2.718282) < 1e-6

    def test_decay_at_several_times(self):
        traj = integrate(scaled_dynamics(-2.0), [1.0], [0.0, 0.5, 1.0])
        assert np.allclose(traj.values[:, 0], [1.0, 0.367879, 0.135335], atol=1e-6)

    def test_extra_output_times_do_not_change_values(self):
        f = linear_dynamics(np.array([[0.0, 1.0], [-1.0, -0.1]]))
        base = [0.0, 0.7, 2.0, 5.0]
        extra = sorted(base + [0.1, 1.3, 1.31, 4.9])
        a = integrate(f, [1.0, 0.0], base)
        b = integrate(f, [1.0, 0.0], extra)
        for t, state in zip(a.times, a.states):
            assert np.max(np.abs(state - b.states[extra.index(t)])) < 1e-9

    def test_diagnostics(self):
        traj = integrate(scaled_dynamics(-50.0), [1.0], [0.0, 1.0], SolverConfig(h_init=0.5))
        assert traj.rejected > 0
        assert traj.nfev == STAGES * (traj.accepted + traj.rejected)

    @pytest.mark.parametrize('rate', [1.0, -2.0, -0.5])
    def test_tighter_tolerance_is_no_less_accurate(self, rate: float):
        def error(tol: float) -> float:
            traj = integrate(scaled_dynamics(rate), [1.0], [0.0, 1.0], SolverConfig(rtol=tol, atol=tol / 10))
            return abs(traj.states[-1][0] - np.exp(rate))

        errors = [error(tol) for tol in (1e-3, 1e-4, 1e-5, 1e-6)]
        assert all(b <= a for a, b in zip(errors, errors[1:])), errors

    @pytest.mark.parametrize('times', [[0.0, 0.0], [1.0, 0.5], []])
    def test_invalid_times(self, times):
        with pytest.raises(ContractError):
            integrate(ZERO, [1.0], times)

    def test_max_steps(self):
        with pytest.raises(IntegrationDivergedError):
            integrate(scaled_dynamics(1.0), [1.0], [0.0, 10.0], SolverConfig(max_steps=3))

    def test_shape_changing_dynamics(self):
        bad = OdeFunc(lambda z: dc.sum(z))
        with pytest.raises(ShapeError):
            integrate(bad, [1.0, 2.0], [0.0, 1.0])


def test_fixed_step_order_of_convergence():
    # global error of dz/dt = z over [0, 1] shrinks like h^5
    steps = [0.1, 0.05, 0.025, 0.0125]
    errors = [
        abs(fixed_step_integrate(scaled_dynamics(1.0), [1.0], 0.0, 1.0, int(round(1 / h)))[0] - np.e)
        for h in steps
    ]
    slope = np.polyfit(np.log2(steps), np.log2(errors), 1)[0]
    assert abs(slope - 5.0) <= 0.3, (slope, errors)


class TestAdjoint:
    def test_state_packing(self):
        st = AdjointState(np.ones((2, 3)), np.zeros((2, 3)), np.arange(4.0))
        back = AdjointState.unpack(st.pack(), (2, 3), 4)
        assert np.array_equal(back.z, st.z) and np.array_equal(back.theta_grad, st.theta_grad)
        with pytest.raises(ShapeError):
            AdjointState.unpack(st.pack(), (2, 3), 5)

    def test_zero_dynamics(self):
        f = linear_dynamics(np.zeros((2, 2)))
        traj = integrate(f, [1.0, 2.0], [0.0, 1.0, 2.0])
        grads = [np.array([1.0, 0.0]), np.array([0.5, 0.5]), np.array([0.0, 2.0])]
        dz0, (dtheta,) = adjoint_backward(f, traj, grads)
        assert np.allclose(dz0, [1.5, 2.5], atol=1e-12)
        # dL/dA^T = sum_i t_i * outer(z0, g_i) while the state stays put
        assert np.allclose(dtheta, [[0.5, 4.5], [1.0, 9.0]], atol=1e-12)

    def test_matrix_exponential(self):
        A = np.array([[-0.5, 1.0], [-1.0, -0.2]])
        T = 1.5
        f = linear_dynamics(A)
        traj = integrate(f, [1.0, -1.0], [0.0, T])
        g = np.array([0.3, -0.8])
        dz0, _ = adjoint_backward(f, traj, [np.zeros(2), g])
        assert np.max(np.abs(dz0 - expm(A.T * T) @ g)) < 1e-5

    def test_misaligned_gradients(self):
        traj = integrate(ZERO, [1.0], [0.0, 1.0])
        with pytest.raises(ContractError):
            adjoint_backward(ZERO, traj, [np.zeros(1)])

    def test_matches_backprop_through_solver(self):
        rng = np.random.default_rng(0)
        mlp = dc.init_mlp([3, 8, 3], ['tanh', 'identity'], rng)
        f = OdeFunc.from_mlp(mlp)
        cfg = SolverConfig(rtol=1e-9, atol=1e-10)
        times = [0.0, 0.4, 1.1, 2.0]
        z0_values = rng.normal(size=3)
        weights = dc.Tensor(rng.normal(size=(len(times), 3)))

        def grads(mode: str):
            z0 = dc.Tensor(z0_values, requires_grad=True)
            for p in f.params:
                p.zero_grad()
            with dc.Tape():
                states, _ = odeint(f, z0, times, cfg, grad_mode=mode)
                loss = dc.sum(dc.mul(states, weights))
            dc.backward(loss)
            return [z0.grad, *[p.grad for p in f.params]]

        for adj, bp in zip(grads('adjoint'), grads('backprop')):
            rel = np.max(np.abs(adj - bp)) / max(np.max(np.abs(bp)), 1e-12)
            assert rel <= 1e-4

    def test_invalid_grad_mode(self):
        with pytest.raises(ValueError):
            odeint(ZERO, dc.Tensor([1.0]), [0.0, 1.0], grad_mode='forward')  # type: ignore
