import time
from pathlib import Path

import pandas as pd

from gpfa.evaluation import loglik_per_bin, peak_rate_table, rate_mae, truth_state
from gpfa.inference import retained_dimensions
from gpfa.management.base import (
    MONITOR_FILE,
    TRUTH_FILE,
    CSGPFACommand,
    load_checkpoint,
    read_dataset,
    write_json,
)
from gpfa.serializers import MetricsSerializer
from gpfa.tensor_data import FLOAT_FORMAT, load_ground_truth


class Command(CSGPFACommand):
    help = 'Score a fitted model on training and held-out trials, and against ground truth if present.'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--data', required=True, help='Training dataset directory.')
        parser.add_argument('--test', help='Held-out dataset directory.')
        parser.add_argument('--truth', help='Ground-truth JSON; defaults to DATA/truth.json when present.')
        parser.add_argument('--out', default='metrics.json')
        parser.add_argument('--peaks', help='Write the per-(condition, neuron) peak-rate table here.')

    def run(self, checkpoint, data, test=None, truth=None, out='metrics.json', peaks=None, **options):
        started = time.perf_counter()
        state = load_checkpoint(checkpoint)
        train = read_dataset(data)
        held_out = read_dataset(test) if test else None

        metrics = {
            'train_loglik': loglik_per_bin(state, train),
            'test_loglik': loglik_per_bin(state, held_out) if held_out is not None else None,
            'retained_dims': retained_dimensions(state),
        }

        truth_path = Path(truth) if truth else Path(data) / TRUTH_FILE
        if truth or truth_path.exists():
            ground_truth = load_ground_truth(truth_path)
            reference = truth_state(ground_truth, train, state.jitter)
            metrics['true_train_loglik'] = loglik_per_bin(reference, train)
            if held_out is not None:
                metrics['true_test_loglik'] = loglik_per_bin(reference, held_out)
            metrics['mae'] = rate_mae(state, ground_truth)

        trace = Path(checkpoint).parent / MONITOR_FILE
        if trace.exists():
            metrics['seconds'] = float(pd.read_csv(trace)['seconds'].sum())
        else:
            metrics['seconds'] = time.perf_counter() - started

        write_json(out, MetricsSerializer(metrics).data)
        if peaks:
            peak_rate_table(state).to_csv(peaks, index=False, float_format=FLOAT_FORMAT)

        summary = f"train {metrics['train_loglik']:.4f}"
        if metrics['test_loglik'] is not None:
            summary += f", test {metrics['test_loglik']:.4f}"
        if 'mae' in metrics:
            summary += f", MAE {metrics['mae']:.4f}"
        self.stdout.write(self.style.SUCCESS(f"Per-bin log-likelihood {summary}; wrote {out}"))
