import logging

import numpy as np
import pytest

from grid_lode import griddata
from grid_lode.exceptions import (ContractError, DatasetParseError, EmptyRecordError, InfeasibleLoadingError,
                                  SchemaError)
from grid_lode.griddata import Dataset, FeederSpec, FeederTruth, NormStats, Record

from .helpers import make_record

HEADER = 'node_id,measurement_type,time_min,value,mask\n'


def single_line(r: float = 0.01, x: float = 0.01, base_kw: float = 1.0) -> FeederSpec:
    return FeederSpec((None, 0), (0.0, r), (0.0, x), ('substation', 'residential'), (0.0, base_kw))


class TestRecord:
    def test_unobserved_values_become_nan(self):
        rec = Record('3', 'P', [1.0, 7.0, 2.0], [0, 15, 30], [1, 0, 1])
        assert np.isnan(rec.values[1])
        assert rec.n_observed == 2
        assert rec.key == ('3', 'P')
        times, values = rec.observed()
        assert times.tolist() == [0.0, 30.0] and values.tolist() == [1.0, 2.0]

    def test_read_only(self):
        rec = make_record([1.0, 2.0])
        with pytest.raises(ValueError):
            rec.values[0] = 5.0

    @pytest.mark.parametrize('kwargs', [
        {'measurement_type': 'I'},
        {'mask': [1, 2]},
        {'times': [0.0, 0.0]},
        {'values': [1.0, np.nan]},
        {'values': [1.0, 2.0, 3.0]},
    ])
    def test_invalid(self, kwargs):
        args = {'node_id': '1', 'measurement_type': 'P', 'values': [1.0, 2.0], 'times': [0.0, 1.0], 'mask': [1, 1]}
        with pytest.raises(SchemaError):
            Record(**{**args, **kwargs})


class TestDataset:
    def test_records_must_share_grid(self):
        with pytest.raises(SchemaError):
            Dataset((make_record([1.0, 2.0]), make_record([1.0, 2.0], times=[0.0, 2.0], node_id='2')))

    def test_select_keeps_stats(self):
        ds = griddata.normalize(Dataset((
            make_record([1.0, 3.0], node_id='1'),
            make_record([2.0, 6.0], node_id='2'),
            make_record([0.9, 1.0], node_id='2', kind='V'),
        )))
        sub = ds.select(node_ids=['2'], measurement_types=['P'])
        assert [r.key for r in sub.records] == [('2', 'P')]
        assert sub.norm_stats == (NormStats(2.0, 6.0),)
        assert ds.index('2', 'V') == 2
        with pytest.raises(KeyError):
            ds.index('9', 'P')

    def test_batch_arrays(self):
        ds = Dataset((make_record([1.0, 2.0]), make_record([3.0, np.nan], mask=[1, 0], node_id='2')))
        values, mask = ds.batch_arrays([1, 0])
        assert values.shape == mask.shape == (2, 2)
        assert mask.tolist() == [[1, 0], [1, 1]]
        with pytest.raises(ContractError):
            ds.batch_arrays([])

    def test_node_ids_sort_numerically(self):
        ds = Dataset(tuple(make_record([1.0], node_id=n) for n in ('10', '2', '1')))
        assert ds.node_ids == ['1', '2', '10']


class TestFeeder:
    def test_default_feeder(self, feeder: FeederSpec):
        assert feeder.n_nodes == 37
        assert len(feeder.load_nodes()) == 36
        assert feeder.topological_order()[0] == 0

    def test_cycle_is_rejected(self):
        with pytest.raises(SchemaError):
            FeederSpec((None, 2, 1), (0.0, 0.01, 0.01), (0.0, 0.01, 0.01),
                       ('substation', 'residential', 'residential'), (0.0, 1.0, 1.0))

    @pytest.mark.parametrize('kwargs', [
        {'r': (0.0, 0.0)}, {'base_kw': (0.0, -1.0)},
        {'load_class': ('substation', 'industrial')}, {'parents': (None, 5)},
    ])
    def test_invalid(self, kwargs):
        args = dict(parents=(None, 0), r=(0.0, 0.01), x=(0.0, 0.01), load_class=('substation', 'residential'),
                    base_kw=(0.0, 1.0))
        with pytest.raises(SchemaError):
            FeederSpec(**{**args, **kwargs})

    def test_file_round_trip(self, feeder: FeederSpec, tmp_path):
        griddata.save_feeder(tmp_path / 'feeder.txt', feeder)
        assert griddata.load_feeder(tmp_path / 'feeder.txt') == feeder

    def test_load_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            griddata.load_feeder(tmp_path / 'missing.txt')
        gap = tmp_path / 'gap.txt'
        gap.write_text('[feeder]\nbase_kva = 100\n\n[node 0]\nparent = none\n\n[node 2]\nparent = 0\n')
        with pytest.raises(SchemaError):
            griddata.load_feeder(gap)


class TestVoltages:
    def test_single_line(self):
        v = griddata.lindistflow_voltages(single_line(), [0.0, 1.0], [0.0, griddata.Q_PER_P])
        assert v[0] == 1.0
        assert v[1] ** 2 == pytest.approx(0.970314, abs=1e-6)
        assert v[1] == pytest.approx(0.985045, abs=1e-6)

    def test_doubling_loads_doubles_the_drop(self, feeder: FeederSpec):
        rng = np.random.default_rng(0)
        p = np.r_[0.0, rng.uniform(0, 0.01, feeder.n_nodes - 1)]
        q = p * griddata.Q_PER_P
        one = griddata.lindistflow_voltages(feeder, p, q)
        two = griddata.lindistflow_voltages(feeder, 2 * p, 2 * q)
        assert np.allclose(1 - two ** 2, 2 * (1 - one ** 2), rtol=1e-12, atol=1e-15)

    def test_downstream_nodes_sag_more(self, feeder: FeederSpec):
        p = np.r_[0.0, np.full(feeder.n_nodes - 1, 0.005)]
        v = griddata.lindistflow_voltages(feeder, p, p * griddata.Q_PER_P)
        for j in range(1, feeder.n_nodes):
            assert v[j] < v[feeder.parents[j]]

    def test_infeasible_loading(self):
        loads = np.array([[0.0, 0.0, 0.0], [0.1, 50.0, 0.1]])
        with pytest.raises(InfeasibleLoadingError) as info:
            griddata.lindistflow_voltages(single_line(), loads, loads * griddata.Q_PER_P)
        assert info.value.node == 1
        assert info.value.time_index == 1
        assert 'node 1, time index 1' in str(info.value)

    def test_shape_mismatch(self):
        with pytest.raises(SchemaError):
            griddata.lindistflow_voltages(single_line(), [0.0, 1.0, 2.0], [0.0, 1.0, 2.0])


class TestGenerateProfiles:
    def test_power_factor(self, truth: FeederTruth):
        assert griddata.Q_PER_P == pytest.approx(0.484322, abs=1e-6)
        assert np.allclose(truth.q, truth.p * griddata.Q_PER_P, rtol=1e-12)

    def test_shapes_and_ranges(self, truth: FeederTruth):
        assert truth.p.shape == (37, 1440)
        assert truth.times[0] == 0 and truth.times[-1] == 1439
        assert np.all(truth.p[0] == 0)
        assert np.all(truth.p[1:] > 0)
        assert np.all((truth.v > 0.9) & (truth.v <= 1.0))
        assert np.all(truth.v[0] == 1.0)

    def test_zero_base_power(self):
        truth = griddata.generate_profiles(single_line(base_kw=0.0), day_minutes=60)
        assert np.all(truth.p == 0) and np.all(truth.v == 1.0)

    def test_deterministic(self, feeder: FeederSpec, truth: FeederTruth):
        again = griddata.generate_profiles(feeder, seed=0)
        assert np.array_equal(again.p, truth.p) and np.array_equal(again.v, truth.v)
        other = griddata.generate_profiles(feeder, seed=1)
        assert not np.array_equal(other.p, truth.p)

    def test_to_dataset(self, truth: FeederTruth):
        ds = truth.to_dataset()
        assert len(ds) == 36 * 2 + 37
        assert all(r.n_observed == 1440 for r in ds.records)


class TestSampleMultirate:
    def test_native_rates(self, records):
        by_type = {}
        for rec in records:
            by_type.setdefault(rec.measurement_type, set()).add(len(rec))
        assert by_type == {'P': {96}, 'Q': {96}, 'V': {1440}}
        assert sorted({r.node_id for r in records if r.measurement_type == 'V'}, key=int) == [
            str(j) for j in range(4, 37, 4)
        ]

    def test_missing_fraction(self, records):
        total = sum(len(r) for r in records)
        missing = sum(len(r) - r.n_observed for r in records)
        assert 0.04 < missing / total < 0.06

    def test_noise_free_constant_truth(self):
        times = np.arange(60.0)
        p = np.vstack([np.zeros(60), np.full(60, 100.0)])
        truth = FeederTruth(('0', '1'), ('substation', 'residential'), times, p, p * 0.5, np.ones((2, 60)))
        records = griddata.sample_multirate(truth, noise_frac=0.0, missing_prob=0.0, voltage_nodes=['1'])
        p_rec = next(r for r in records if r.key == ('1', 'P'))
        assert p_rec.times.tolist() == [0.0, 15.0, 30.0, 45.0]
        assert p_rec.values.tolist() == [100.0] * 4
        assert next(r for r in records if r.key == ('1', 'Q')).values.tolist() == [50.0] * 4
        assert next(r for r in records if r.key == ('1', 'V')).n_observed == 60

    def test_relative_noise_level(self):
        n = 150000
        p = np.vstack([np.zeros(n), np.full(n, 100.0)])
        truth = FeederTruth(('0', '1'), ('substation', 'residential'), np.arange(float(n)), p, p, np.ones((2, n)))
        records = griddata.sample_multirate(truth, missing_prob=0.0, voltage_nodes=[])
        noise = records[0].values - 100.0
        assert len(noise) == 10000
        assert abs(np.std(noise) - 10.0) < 0.3

    def test_deterministic(self, truth: FeederTruth, records):
        again = griddata.sample_multirate(truth, seed=0)
        assert all(a.equals(b) for a, b in zip(again, records))
        other = griddata.sample_multirate(truth, seed=1)
        assert not all(a.equals(b) for a, b in zip(other, records))

    @pytest.mark.parametrize('kwargs', [
        {'smart_meter_rate': 7}, {'scada_rate': 0}, {'missing_prob': 1.0}, {'noise_frac': -0.1}, {'scada_every': 0},
    ])
    def test_invalid(self, truth: FeederTruth, kwargs):
        with pytest.raises(ContractError):
            griddata.sample_multirate(truth, **kwargs)


class TestUnifyTimeGrid:
    def test_union_and_masks(self):
        a = make_record([1.0, 2.0, 3.0], times=[0.0, 15.0, 30.0])
        b = make_record([4.0, 5.0, 6.0], times=[0.0, 5.0, 10.0], node_id='2')
        ds = griddata.unify_time_grid([a, b])
        assert ds.times.tolist() == [0.0, 5.0, 10.0, 15.0, 30.0]
        assert ds.records[0].mask.tolist() == [1, 0, 0, 1, 1]
        assert ds.records[1].mask.tolist() == [1, 1, 1, 0, 0]
        assert np.isnan(ds.records[0].values[1])

    def test_idempotent(self, dataset: Dataset):
        assert griddata.unify_time_grid(dataset).equals(dataset)

    def test_observations_preserved(self, records, dataset: Dataset):
        assert len(dataset.times) == 1440
        assert sum(r.n_observed for r in dataset.records) == sum(r.n_observed for r in records)


class TestCompactGrid:
    def test_drops_unobserved_times(self):
        a = make_record([1.0, np.nan, 3.0], times=[0.0, 5.0, 10.0], mask=[1, 0, 1])
        b = make_record([np.nan, np.nan, 6.0], times=[0.0, 5.0, 10.0], mask=[0, 0, 1], node_id='2')
        ds = griddata.compact_grid(Dataset((a, b)))
        assert ds.times.tolist() == [0.0, 10.0]
        assert ds.records[0].values.tolist() == [1.0, 3.0]
        assert ds.records[1].mask.tolist() == [0, 1]

    def test_keeps_stats(self):
        a = make_record([1.0, np.nan, 3.0], times=[0.0, 5.0, 10.0], mask=[1, 0, 1])
        ds = griddata.compact_grid(griddata.normalize(Dataset((a,))))
        assert ds.norm_stats == (NormStats(1.0, 3.0),)
        assert ds.records[0].values.tolist() == [0.0, 1.0]

    def test_meter_records(self, dataset: Dataset):
        meters = griddata.meter_records(dataset)
        assert {r.measurement_type for r in meters.records} == {'P', 'Q'}
        assert len(meters) == 72
        assert meters.times.tolist() == list(np.arange(0.0, 1440.0, 15.0))
        assert sum(r.n_observed for r in meters.records) == sum(
            r.n_observed for r in dataset.records if r.measurement_type != 'V'
        )
        assert griddata.meter_records(dataset, ['1', '2']).node_ids == ['1', '2']


class TestNormalize:
    def test_min_max(self):
        ds = griddata.normalize(Dataset((make_record([2.0, 4.0, 6.0]),)))
        assert ds.records[0].values.tolist() == [0.0, 0.5, 1.0]
        assert ds.norm_stats == (NormStats(2.0, 6.0),)

    def test_constant_record(self, caplog):
        with caplog.at_level(logging.WARNING, logger='grid_lode.griddata'):
            ds = griddata.normalize(Dataset((make_record([5.0, 5.0]),)))
        assert ds.records[0].values.tolist() == [0.0, 0.0]
        assert 'zero range' in caplog.text
        assert griddata.denormalize([0.0, 0.3], ds.norm_stats[0]).tolist() == [5.0, 5.0]

    def test_round_trip(self, dataset: Dataset):
        normed = griddata.normalize(dataset)
        for raw, rec, st in zip(dataset.records, normed.records, normed.norm_stats):
            obs = rec.mask == 1
            assert np.nanmin(rec.values) == 0.0 or st.range == 0
            back = griddata.denormalize(rec.values[obs], st)
            assert np.max(np.abs(back - raw.values[obs])) <= 1e-12 * max(1.0, abs(st.max))

    def test_errors(self):
        with pytest.raises(EmptyRecordError):
            griddata.normalize(Dataset((make_record([np.nan], mask=[0]),)))
        once = griddata.normalize(Dataset((make_record([1.0, 2.0]),)))
        with pytest.raises(ContractError):
            griddata.normalize(once)


class TestSplitNodes:
    def test_partition(self, dataset: Dataset):
        train, held = griddata.split_nodes(dataset, 0.2, seed=0)
        assert len(held) == 7 and len(train) == 29
        assert not set(train) & set(held)
        assert griddata.split_nodes(dataset, 0.2, seed=0) == (train, held)
        assert griddata.split_nodes(dataset, 0.2, seed=1) != (train, held)

    def test_no_holdout(self, dataset: Dataset):
        train, held = griddata.split_nodes(dataset, 0.0)
        assert held == [] and len(train) == 36

    def test_invalid_fraction(self, dataset: Dataset):
        with pytest.raises(ContractError):
            griddata.split_nodes(dataset, 1.0)


class TestCsv:
    @pytest.fixture
    def small(self) -> Dataset:
        return griddata.unify_time_grid([
            make_record([0.1, 1 / 3, 250.75], times=[0.0, 15.0, 30.0], mask=[1, 0, 1]),
            make_record([1.0, 0.98], times=[0.0, 1.0], node_id='12', kind='V'),
        ])

    def test_byte_identical_round_trip(self, small: Dataset, tmp_path):
        first, second = tmp_path / 'a.csv', tmp_path / 'b.csv'
        griddata.save_dataset(first, small)
        loaded = griddata.load_dataset(first)
        assert loaded.equals(small)
        griddata.save_dataset(second, loaded)
        assert first.read_bytes() == second.read_bytes()

    def test_format(self, small: Dataset, tmp_path):
        path = tmp_path / 'a.csv'
        griddata.save_dataset(path, small)
        lines = path.read_text().split('\n')
        assert lines[0] + '\n' == HEADER
        assert lines[1] == '1,P,0,0.1,1'
        assert lines[2] == '1,P,1,,0'

    def test_normalized_datasets_are_refused(self, small: Dataset, tmp_path):
        with pytest.raises(ContractError):
            griddata.save_dataset(tmp_path / 'a.csv', griddata.normalize(small))

    @pytest.mark.parametrize('body, line', [
        ('1,P,0,1.5,1\n1,P,15,,2\n', 3),
        ('1,X,0,1.5,1\n', 2),
        ('1,P,0,1.5,1\n1,P,abc,1.0,1\n', 3),
        ('1,P,0,,1\n', 2),
    ])
    def test_parse_errors_carry_line(self, tmp_path, body: str, line: int):
        path = tmp_path / 'bad.csv'
        path.write_text(HEADER + body)
        with pytest.raises(DatasetParseError) as info:
            griddata.load_dataset(path)
        assert info.value.line == line
        assert isinstance(info.value, SchemaError)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text('node,type,t,v,m\n')
        with pytest.raises(DatasetParseError) as info:
            griddata.load_dataset(path)
        assert info.value.line == 1

    @pytest.mark.parametrize('text', ['', HEADER])
    def test_empty(self, tmp_path, text: str):
        path = tmp_path / 'empty.csv'
        path.write_text(text)
        assert len(griddata.load_dataset(path)) == 0
