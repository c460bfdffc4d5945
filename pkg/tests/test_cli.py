import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from grid_lode import __version__, cli
from grid_lode.cli import RunConfig
from grid_lode.exceptions import ConfigError, TrainingDivergedError
from grid_lode.griddata import NormStats
from grid_lode.lode import LodeModel, save_checkpoint

SMALL_RUN = {
    'day_minutes': 120,
    'split_min': 60,
    'latent_dim': 2,
    'hidden_dim': 3,
    'dynamics_units': 4,
    'dynamics_layers': 2,
    'iterations': 2,
    'batch_size': 2,
    'rtol': 1e-4,
    'atol': 1e-5,
}


def write_config(path, **values) -> str:
    path.write_text(''.join(f'{k} = {v}\n' for k, v in values.items()))
    return str(path)


@pytest.fixture(scope='module')
def run_dir(tmp_path_factory):
    '''A small generated and trained run shared by the inference tests'''
    root = tmp_path_factory.mktemp('pipeline')
    config = write_config(root / 'run.ini', out=root / 'out', **SMALL_RUN)
    assert cli.main(['generate', '-c', config]) == cli.EXIT_OK
    assert cli.main(['train', '-c', config]) == cli.EXIT_OK
    return root


class TestRunConfig:
    def test_from_file(self, tmp_path):
        path = tmp_path / 'run.ini'
        path.write_text(
            '# a comment\n'
            'seed = 5\n'
            'grad_mode = adjoint\n'
            'resume = yes\n'
            'horizon_end_min = 900\n'
            'noise_frac = 0.2\n'
            'feeder =\n'
        )
        cfg = RunConfig.from_file(str(path))
        assert cfg.seed == 5 and cfg.grad_mode == 'adjoint' and cfg.resume is True
        assert cfg.horizon_end_min == 900.0 and cfg.noise_frac == 0.2
        assert cfg.feeder is None
        assert cfg.iterations == RunConfig().iterations

    @pytest.mark.parametrize('text', ['bogus = 1\n', 'seed = abc\n', 'resume = maybe\n', 'seed = 1\nseed = 2\n'])
    def test_invalid_file(self, tmp_path, text: str):
        path = tmp_path / 'run.ini'
        path.write_text(text)
        with pytest.raises(ConfigError):
            RunConfig.from_file(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(str(tmp_path / 'nope.ini'))

    def test_default_paths(self):
        cfg = RunConfig(out='somewhere')
        assert cfg.dataset_path == os.path.join('somewhere', 'dataset.csv')
        assert cfg.checkpoint_path == os.path.join('somewhere', 'model.npz')
        assert replace(cfg, checkpoint='m.npz').checkpoint_path == 'm.npz'

    def test_train_config(self):
        tc = RunConfig(seed=3, rtol=1e-3, task='prediction').train_config()
        assert tc.seed == 3 and tc.task == 'prediction' and tc.solver.rtol == 1e-3

    def test_flags_override_file(self, tmp_path):
        config = write_config(tmp_path / 'run.ini', seed=1, out='a', grad_mode='backprop')
        args = cli.build_parser().parse_args(['train', '-c', config, '-s', '9', '--grad-mode', 'adjoint', '-o', 'b'])
        cfg = cli.load_run_config(args)
        assert (cfg.seed, cfg.grad_mode, cfg.out) == (9, 'adjoint', 'b')

    @pytest.mark.parametrize('command, kwargs', [
        ('generate', {'grad_mode': 'forward'}),
        ('generate', {'missing_prob': 1.0}),
        ('generate', {'smart_meter_rate': 7}),
        ('generate', {'seed': -1}),
        ('generate', {'lr_decay': 0.0}),
        ('train', {}),
        ('impute', {'query_step_min': -1.0}),
    ])
    def test_validate(self, tmp_path, command: str, kwargs):
        cfg = replace(RunConfig(out=str(tmp_path / 'out')), **kwargs)
        with pytest.raises(ConfigError):
            cfg.validate(command)

    def test_validate_horizon(self, tmp_path):
        for name in ('dataset.csv', 'model.npz'):
            (tmp_path / name).write_text('')
        cfg = RunConfig(out=str(tmp_path), split_min=60, horizon_end_min=30)
        with pytest.raises(ConfigError, match='horizon_end_min'):
            cfg.validate('predict')
        replace(cfg, horizon_end_min=90).validate('predict')


class TestMain:
    def test_version(self, capsys):
        assert cli.main(['-V']) == cli.EXIT_OK
        assert capsys.readouterr().out.strip() == __version__

    def test_no_command(self, capsys):
        assert cli.main([]) == cli.EXIT_CONFIG
        assert 'command is required' in capsys.readouterr().err

    def test_missing_feeder(self, tmp_path, capsys):
        config = write_config(tmp_path / 'run.ini', out=tmp_path / 'out', feeder=tmp_path / 'feeder.txt')
        assert cli.main(['generate', '-c', config]) == cli.EXIT_CONFIG
        assert 'feeder file not found' in capsys.readouterr().err
        assert not (tmp_path / 'out').exists()

    def test_output_under_a_file(self, tmp_path):
        (tmp_path / 'blocker').write_text('')
        config = write_config(tmp_path / 'run.ini', out=tmp_path / 'blocker' / 'out', day_minutes=120)
        assert cli.main(['generate', '-c', config]) == cli.EXIT_IO

    def test_output_is_a_file(self, tmp_path):
        (tmp_path / 'blocker').write_text('')
        config = write_config(tmp_path / 'run.ini', out=tmp_path / 'blocker', day_minutes=120)
        assert cli.main(['generate', '-c', config]) == cli.EXIT_CONFIG


class TestGenerate:
    def test_summary(self, tmp_path, capsys):
        summary = cli.cmd_generate(RunConfig(out=str(tmp_path)))
        assert summary['nodes'] == 37
        assert summary['records'] == 81
        assert summary['rows_per_type'] == {'P': 96, 'Q': 96, 'V': 1440}
        assert 'generated 37 nodes' in capsys.readouterr().out
        for name in ('dataset.csv', 'truth.csv', 'feeder.txt'):
            assert (tmp_path / name).is_file()

    def test_deterministic(self, tmp_path):
        for name in ('a', 'b'):
            config = write_config(tmp_path / f'{name}.ini', out=tmp_path / name, day_minutes=120, seed=3)
            assert cli.main(['generate', '-c', config]) == cli.EXIT_OK
        for name in ('dataset.csv', 'truth.csv', 'feeder.txt'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_feeder_file_is_reusable(self, tmp_path):
        config = write_config(tmp_path / 'a.ini', out=tmp_path / 'a', day_minutes=120)
        assert cli.main(['generate', '-c', config]) == cli.EXIT_OK
        config = write_config(tmp_path / 'b.ini', out=tmp_path / 'b', day_minutes=120,
                              feeder=tmp_path / 'a' / 'feeder.txt')
        assert cli.main(['generate', '-c', config]) == cli.EXIT_OK
        assert (tmp_path / 'a' / 'dataset.csv').read_bytes() == (tmp_path / 'b' / 'dataset.csv').read_bytes()


class TestPipeline:
    def config(self, run_dir, **extra) -> str:
        return write_config(run_dir / 'extra.ini', out=run_dir / 'out', **{**SMALL_RUN, **extra})

    def test_train_outputs(self, run_dir):
        log = pd.read_csv(run_dir / 'out' / 'loss_log.csv')
        assert log['iteration'].tolist() == [0, 1]
        assert log[['test_neg_elbo', 'test_mse_pct']].notna().all().all()
        assert (run_dir / 'out' / 'model.npz').is_file()

    def test_impute_on_dataset_grid(self, run_dir):
        assert cli.main(['impute', '-c', self.config(run_dir, query_step_min=0)]) == cli.EXIT_OK
        imputed = pd.read_csv(run_dir / 'out' / 'imputed.csv')
        assert len(imputed) == 72 * 120
        assert imputed['mask'].eq(1).all()
        assert (run_dir / 'out' / 'report_imputation.csv').is_file()
        assert len(os.listdir(run_dir / 'out' / 'series_imputation')) == 14

    def test_predict_beyond_data(self, run_dir):
        assert cli.main(['predict', '-c', self.config(run_dir, horizon_end_min=180)]) == cli.EXIT_OK
        predicted = pd.read_csv(run_dir / 'out' / 'predicted.csv')
        assert predicted['time_min'].min() == 61 and predicted['time_min'].max() == 180
        report = pd.read_csv(run_dir / 'out' / 'report_prediction.csv')
        assert report['extrapolation'].eq(1).all()

    def test_evaluate(self, run_dir):
        assert cli.main(['evaluate', '-c', self.config(run_dir)]) == cli.EXIT_OK
        for task in ('imputation', 'prediction'):
            report = pd.read_csv(run_dir / 'out' / f'report_{task}.csv', dtype={'node_id': str})
            assert {'lode_mse_pct', 'baseline_mse_pct'} <= set(report.columns)
            assert report['node_id'].iloc[-1] == 'ALL'
            assert report['lode_mse_pct'].notna().all()

    def test_resume(self, run_dir, tmp_path):
        config = write_config(
            tmp_path / 'resume.ini', out=tmp_path, dataset=run_dir / 'out' / 'dataset.csv',
            checkpoint=tmp_path / 'model.npz', resume='true', **SMALL_RUN
        )
        assert cli.main(['train', '-c', config]) == cli.EXIT_CONFIG, 'nothing to resume from yet'
        (tmp_path / 'model.npz').write_bytes((run_dir / 'out' / 'model.npz').read_bytes())
        assert cli.main(['train', '-c', config]) == cli.EXIT_OK
        log = pd.read_csv(tmp_path / 'loss_log.csv')
        assert log['iteration'].tolist() == [0, 1, 2, 3]

    def test_divergence_exit_code(self, run_dir, tmp_path, mocker, capsys):
        mocker.patch('grid_lode.lode.train', side_effect=TrainingDivergedError('non-finite loss', 1, 12.5))
        config = write_config(tmp_path / 'run.ini', out=tmp_path, dataset=run_dir / 'out' / 'dataset.csv', **SMALL_RUN)
        assert cli.main(['train', '-c', config]) == cli.EXIT_DIVERGED
        assert 'iteration 1' in capsys.readouterr().err
        assert not (tmp_path / 'model.npz').exists()

    def test_checkpoint_for_other_data_dim(self, run_dir, tmp_path):
        save_checkpoint(tmp_path / 'wide.npz', LodeModel.init(data_dim=2, latent_dim=2, hidden_dim=3,
                                                                dynamics_units=4, dynamics_layers=2))
        config = self.config(run_dir)
        assert cli.main(['impute', '-c', config, '--checkpoint', str(tmp_path / 'wide.npz')]) == cli.EXIT_CONFIG

    def elsewhere(self, run_dir, tmp_path, **extra) -> str:
        '''Config reading the shared run's inputs and writing into `tmp_path / out`'''
        values = {name: run_dir / 'out' / f'{name}.csv' for name in ('dataset', 'truth')}
        values['checkpoint'] = run_dir / 'out' / 'model.npz'
        return write_config(tmp_path / 'run.ini', out=tmp_path / 'out', **{**values, **SMALL_RUN, **extra})

    def test_checkpoint_for_other_records(self, run_dir, tmp_path, capsys):
        model = LodeModel.init(latent_dim=2, hidden_dim=3, dynamics_units=4, dynamics_layers=2)
        model.norm_stats = {('99', 'P'): NormStats(0.0, 1.0)}
        save_checkpoint(tmp_path / 'other.npz', model)
        config = self.elsewhere(run_dir, tmp_path)
        for command in ('impute', 'predict', 'evaluate'):
            assert cli.main([command, '-c', config, '--checkpoint', str(tmp_path / 'other.npz')]) == cli.EXIT_CONFIG
            assert '99/P' in capsys.readouterr().err
        assert not (tmp_path / 'out').exists()

    def test_resume_on_other_records(self, run_dir, tmp_path):
        (tmp_path / 'model.npz').write_bytes((run_dir / 'out' / 'model.npz').read_bytes())
        config = self.elsewhere(run_dir, tmp_path, resume='true', holdout_frac=0.5, checkpoint=tmp_path / 'model.npz')
        assert cli.main(['train', '-c', config]) == cli.EXIT_CONFIG

    def test_failed_report_leaves_no_outputs(self, run_dir, tmp_path, mocker):
        mocker.patch('grid_lode.evaluation.evaluate_imputation', side_effect=OSError('disk full'))
        assert cli.main(['impute', '-c', self.elsewhere(run_dir, tmp_path)]) == cli.EXIT_IO
        assert not (tmp_path / 'out').exists()

    def test_evaluate_without_truth(self, run_dir, tmp_path, capsys):
        config = self.elsewhere(run_dir, tmp_path, truth=tmp_path / 'missing.csv')
        assert cli.main(['evaluate', '-c', config]) == cli.EXIT_IO
        assert 'truth' in capsys.readouterr().err
        assert not (tmp_path / 'out').exists()

    def test_evaluate_horizon_end(self, run_dir, tmp_path):
        assert cli.main(['evaluate', '-c', self.elsewhere(run_dir, tmp_path, horizon_end_min=90)]) == cli.EXIT_OK
        folder = tmp_path / 'out' / 'series_prediction'
        for name in os.listdir(folder):
            series = pd.read_csv(folder / name)
            assert series['time_min'].min() == 61 and series['time_min'].max() == 90


@pytest.mark.slow
class TestDefaultFeederDay:
    '''The built-in feeder over a full day with the default model and training settings'''

    @pytest.fixture(scope='class')
    def root(self, tmp_path_factory):
        root = tmp_path_factory.mktemp('feeder_day')
        inputs = {'dataset': root / 'data' / 'dataset.csv', 'truth': root / 'data' / 'truth.csv'}
        assert cli.main(['generate', '-c', write_config(root / 'data.ini', out=root / 'data')]) == cli.EXIT_OK
        for task in ('imputation', 'prediction'):
            config = write_config(root / f'{task}.ini', out=root / task, task=task, **inputs)
            assert cli.main(['train', '-c', config]) == cli.EXIT_OK
        assert cli.main(['impute', '-c', str(root / 'imputation.ini')]) == cli.EXIT_OK
        assert cli.main(['predict', '-c', str(root / 'prediction.ini')]) == cli.EXIT_OK
        return root

    def overall(self, root, task: str) -> pd.Series:
        report = pd.read_csv(root / task / f'report_{task}.csv', dtype={'node_id': str})
        return report.set_index('node_id').loc['ALL']

    def test_imputation(self, root):
        total = self.overall(root, 'imputation')
        assert total['lode_mse_pct'] < total['baseline_mse_pct']
        assert total['lode_mse_pct'] <= 1.0

    def test_prediction(self, root):
        total = self.overall(root, 'prediction')
        assert total['lode_mse_pct'] < total['baseline_mse_pct']
        assert total['lode_mse_pct'] <= 2.0

    @pytest.mark.parametrize('task', ['imputation', 'prediction'])
    def test_losses_converge(self, root, task: str):
        log = pd.read_csv(root / task / 'loss_log.csv')
        assert len(log) == 200
        assert np.all(np.isfinite(log.drop(columns='iteration').to_numpy()))
        assert log['neg_elbo'].tail(5).mean() < 0.5 * log['neg_elbo'].head(5).mean()
