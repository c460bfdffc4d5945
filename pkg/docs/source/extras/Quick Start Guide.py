'''
## Synthetic data
`grid_lode` ships a 37 node radial feeder and a generator for one day of per-minute load and voltage.
The generator's output is sampled the way real meters would see it: smart meters report
15 minute averages of `P` and `Q`, SCADA reports per-minute voltage at every 4th node.

```python
import grid_lode

feeder = grid_lode.default_feeder()
truth = grid_lode.generate_profiles(feeder, seed=1)
records = grid_lode.sample_multirate(truth, seed=1)
# put every record onto one shared, sorted time grid (unobserved points get mask=0)
dataset = grid_lode.unify_time_grid(records)
print(len(dataset.records), len(dataset.times))
```

## Train a model
`grid_lode.fit` initializes a model and trains it. Training happens on min-max normalized
values; `fit` normalizes the dataset for you when it hasn't been already.
Only the smart-meter `P`/`Q` records are trained on, on the times some meter reports
(`grid_lode.griddata.meter_records`).

```python
train_ids, test_ids = grid_lode.split_nodes(dataset, 0.2, seed=1)
train_set = dataset.select(node_ids=train_ids)

result = grid_lode.fit(train_set, grid_lode.TrainConfig(iterations=100, batch_size=10, seed=1))
for entry in result.log[::10]:
    print(entry.iteration, entry.neg_elbo, entry.mse_pct)
```

The ODE solver can be differentiated two ways:

* `backprop` - record every solver operation and backpropagate through them (default)
* `adjoint` - solve an augmented system backwards in time, constant memory in the number of steps

```python
result = grid_lode.fit(train_set, grid_lode.TrainConfig(iterations=100), grad_mode='adjoint')
```

The default can be changed for the whole session through `grid_lode.config`.

## Impute and predict
```python
model = result.model
record = dataset.select(node_ids=test_ids, measurement_types=['P']).records[0]

# fill in the gaps at every minute of the day
per_minute = grid_lode.impute(model, record, range(0, 1440))

# condition on the morning, predict the afternoon
morning = grid_lode.lode.condition_window(record, 720)
afternoon = grid_lode.predict(model, morning, range(721, 1440))
```

Outputs are in the record's original units.

## Evaluate
```python
report = grid_lode.evaluate_imputation(model, dataset, truth.to_dataset(), node_ids=test_ids)
print(report.lode_mse_pct, report.baseline_mse_pct)
report.save('report_imputation.csv')
```

## Saving your work
```python
grid_lode.save_dataset('dataset.csv', dataset)
grid_lode.save_checkpoint('model.npz', result.model, result.state)

ckpt = grid_lode.load_checkpoint('model.npz')
# pass ckpt.state back to train to carry on where it stopped
```

## Command line
Everything above is also available through `grid-lode` (or `python -m grid_lode`).
See the [README](../index.html) for the commands and config keys.
'''
