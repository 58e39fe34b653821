import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import pandas as pd
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from gpfa.exceptions import NumericalError

GENERATIVE_CONFIG = {
    'n_conditions': 3,
    'n_neurons': 3,
    'n_bins': 10,
    'n_latents': 1,
    'n_trials': 5,
    'time_lengthscales': [3.0],
    'condition_lengthscales': [0.5],
    'seed': 4,
}


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def call(self, name, **options):
        out = StringIO()
        call_command(name, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def write_json(self, name, payload):
        path = self.root / name
        path.write_text(json.dumps(payload))
        return path

    def generate(self, **overrides):
        config = self.write_json('generate.json', dict(GENERATIVE_CONFIG, **overrides))
        self.call('generate', config=str(config), out=str(self.root / 'data'))
        return self.root / 'data'

    def fit(self, data, out='fit', **options):
        options.setdefault('latents', 2)
        options.setdefault('max_iters', 2)
        options.setdefault('threads', 1)
        self.call('fit', data=str(data), out=str(self.root / out), **options)
        return self.root / out

    def assertExitCode(self, code, name, **options):
        with self.assertRaises(CommandError) as caught:
            self.call(name, **options)
        self.assertEqual(caught.exception.returncode, code)
        return caught.exception


class GenerateCommandTests(CommandTestCase):
    def test_writes_dataset_and_truth(self):
        data = self.generate()
        counts = pd.read_csv(data / 'counts.csv')
        self.assertEqual(list(counts.columns), ['condition', 'trial', 'neuron', 'bin', 'count'])
        self.assertEqual(len(counts), 3 * 5 * 3 * 10)
        conditions = pd.read_csv(data / 'conditions.csv')
        self.assertEqual(list(conditions.columns), ['condition', 'coord_0'])
        truth = json.loads((data / 'truth.json').read_text())
        self.assertEqual(len(truth['rates']), 3)
        self.assertEqual(json.loads((data / 'dataset.json').read_text()), {'bin_width': 0.02})

    def test_seed_override(self):
        first = self.generate()
        before = (first / 'counts.csv').read_text()
        config = self.write_json('generate.json', GENERATIVE_CONFIG)
        self.call('generate', config=str(config), seed=99, out=str(self.root / 'other'))
        self.assertNotEqual((self.root / 'other' / 'counts.csv').read_text(), before)

    def test_invalid_config(self):
        config = self.write_json('bad.json', {'n_neurons': -1})
        error = self.assertExitCode(2, 'generate', config=str(config), out=str(self.root / 'data'))
        self.assertIn('n_neurons', str(error))

    def test_missing_config(self):
        self.assertExitCode(2, 'generate', config=str(self.root / 'absent.json'))


class FitCommandTests(CommandTestCase):
    def test_outputs(self):
        out = self.fit(self.generate())
        report = json.loads((out / 'fit_report.json').read_text())
        self.assertEqual(report['iterations_run'], 2)
        self.assertEqual(len(report['monitor']), 2)
        self.assertNotIn('seconds', report)
        trace = pd.read_csv(out / 'monitor.csv')
        self.assertEqual(list(trace.columns), ['iter', 'monitor', 'seconds'])
        self.assertEqual(trace['iter'].tolist(), [1, 2])
        checkpoint = json.loads((out / 'checkpoint.json').read_text())
        self.assertEqual(checkpoint['format'], 'csgpfa-checkpoint')
        self.assertEqual(checkpoint['iteration'], 2)

    def test_same_seed_same_report(self):
        data = self.generate()
        first = self.fit(data, out='a', seed=1)
        second = self.fit(data, out='b', seed=1)
        self.assertEqual((first / 'fit_report.json').read_text(), (second / 'fit_report.json').read_text())

    def test_train_trials_split(self):
        out = self.fit(self.generate(), train_trials=3, split_seed=2)
        train = pd.read_csv(out / 'train' / 'counts.csv')
        test = pd.read_csv(out / 'test' / 'counts.csv')
        self.assertEqual(train['trial'].max(), 2)
        self.assertEqual(test['trial'].max(), 1)
        self.assertTrue((out / 'train' / 'truth.json').exists())
        self.assertTrue((out / 'test' / 'truth.json').exists())

    def test_split_keeps_bin_width(self):
        out = self.fit(self.generate(bin_width=0.05), train_trials=3)
        for split in ('train', 'test'):
            self.assertEqual(json.loads((out / split / 'dataset.json').read_text()), {'bin_width': 0.05})

    def test_identity_condition_kernel(self):
        data = self.generate()
        first = self.fit(data, out='first', condition_kernel='identity')
        checkpoint = json.loads((first / 'checkpoint.json').read_text())
        self.assertEqual(checkpoint['condition_kernel'], 'identity')
        self.assertExitCode(2, 'fit', data=str(data), latents=2, resume=str(first / 'checkpoint.json'),
                            out=str(self.root / 'second'))

    def test_model_file_and_resume(self):
        data = self.generate()
        model = self.write_json('model.json', {'n_latents': 2, 'max_iters': 2, 'mstep_steps': 1})
        first = self.fit(data, out='first', model=str(model), latents=None, max_iters=None)
        resumed = self.fit(data, out='resumed', model=str(model), latents=None, max_iters=3,
                           resume=str(first / 'checkpoint.json'))
        report = json.loads((resumed / 'fit_report.json').read_text())
        self.assertEqual(report['iterations_run'], 3)
        trace = pd.read_csv(resumed / 'monitor.csv')
        self.assertTrue(trace['seconds'][:2].isna().all())

    def test_resume_with_other_likelihood(self):
        data = self.generate()
        first = self.fit(data, out='first')
        self.assertExitCode(2, 'fit', data=str(data), likelihood='binomial', latents=2,
                            resume=str(first / 'checkpoint.json'), out=str(self.root / 'second'))

    def test_missing_data_directory(self):
        self.assertExitCode(2, 'fit', data=str(self.root / 'nowhere'), out=str(self.root / 'fit'))

    def test_bad_counts(self):
        data = self.generate()
        (data / 'counts.csv').write_text("condition,trial,neuron,bin,count\n0,0,0,0,-1\n")
        error = self.assertExitCode(2, 'fit', data=str(data), out=str(self.root / 'fit'))
        self.assertIn('negative count at line 2', str(error))

    def test_numerical_failure(self):
        data = self.generate()
        with mock.patch('gpfa.management.commands.fit.fit', side_effect=NumericalError('boom')):
            self.assertExitCode(1, 'fit', data=str(data), out=str(self.root / 'fit'))


class PredictAndEvaluateCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.out = self.fit(self.generate(), train_trials=3)
        self.checkpoint = str(self.out / 'checkpoint.json')

    def test_predict(self):
        conditions = self.root / 'new.csv'
        conditions.write_text("condition,coord_0\n0,0.25\n1,0.75\n")
        weights = self.root / 'weights.json'
        self.call('predict', checkpoint=self.checkpoint, conditions=str(conditions),
                  out=str(self.root / 'rates.csv'), weights=str(weights), with_covariance=True)
        rates = pd.read_csv(self.root / 'rates.csv')
        self.assertEqual(list(rates.columns), ['condition', 'neuron', 'bin', 'rate', 'rate_var_proxy'])
        self.assertEqual(len(rates), 2 * 3 * 10)
        self.assertTrue((rates['rate'] > 0).all())
        payload = json.loads(weights.read_text())
        self.assertEqual(payload['layout'], 'd-major')
        self.assertEqual(len(payload['neurons'][0]['mean']), 2 * 2)
        self.assertEqual(len(payload['neurons'][0]['cov']), 2 * 2)

    def test_predict_dimension_mismatch(self):
        conditions = self.root / 'new.csv'
        conditions.write_text("condition,coord_0,coord_1\n0,0.25,0.1\n")
        self.assertExitCode(2, 'predict', checkpoint=self.checkpoint, conditions=str(conditions),
                            out=str(self.root / 'rates.csv'))

    def test_corrupt_checkpoint(self):
        payload = json.loads(Path(self.checkpoint).read_text())
        del payload['cov_w']
        broken = self.write_json('broken.json', payload)
        conditions = self.root / 'new.csv'
        conditions.write_text("condition,coord_0\n0,0.5\n")
        error = self.assertExitCode(2, 'predict', checkpoint=str(broken), conditions=str(conditions),
                                    out=str(self.root / 'rates.csv'))
        self.assertIn('cov_w', str(error))

    def test_evaluate(self):
        metrics_path = self.root / 'metrics.json'
        peaks = self.root / 'peaks.csv'
        self.call('evaluate', checkpoint=self.checkpoint, data=str(self.out / 'train'),
                  test=str(self.out / 'test'), out=str(metrics_path), peaks=str(peaks))
        metrics = json.loads(metrics_path.read_text())
        for key in ('train_loglik', 'test_loglik', 'true_train_loglik', 'true_test_loglik', 'mae',
                    'retained_dims', 'seconds'):
            self.assertIn(key, metrics)
        self.assertLess(metrics['train_loglik'], 0)
        self.assertGreaterEqual(metrics['mae'], 0)
        trace = pd.read_csv(self.out / 'monitor.csv')
        self.assertAlmostEqual(metrics['seconds'], trace['seconds'].sum())
        self.assertEqual(len(pd.read_csv(peaks)), 3 * 3)

    def test_evaluate_without_test_or_truth(self):
        (self.out / 'train' / 'truth.json').unlink()
        metrics_path = self.root / 'metrics.json'
        self.call('evaluate', checkpoint=self.checkpoint, data=str(self.out / 'train'), out=str(metrics_path))
        metrics = json.loads(metrics_path.read_text())
        self.assertIsNone(metrics['test_loglik'])
        self.assertNotIn('mae', metrics)

    def test_evaluate_wrong_shape(self):
        other = self.root / 'other'
        config = self.write_json('other.json', dict(GENERATIVE_CONFIG, n_neurons=4))
        self.call('generate', config=str(config), out=str(other))
        self.assertExitCode(2, 'evaluate', checkpoint=self.checkpoint, data=str(other),
                            out=str(self.root / 'metrics.json'))
