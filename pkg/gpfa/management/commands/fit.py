import shutil
from pathlib import Path

import pandas as pd

from gpfa.evaluation import split_trials
from gpfa.inference import fit
from gpfa.kernels import CONDITION_KERNELS
from gpfa.management.base import (
    CHECKPOINT_FILE,
    MONITOR_FILE,
    REPORT_FILE,
    TRUTH_FILE,
    CSGPFACommand,
    load_checkpoint,
    load_validated,
    read_dataset,
    read_json,
    save_checkpoint,
    save_dataset,
    write_json,
)
from gpfa.serializers import FitReportSerializer, ModelConfigSerializer
from gpfa.tensor_data import FLOAT_FORMAT, LIKELIHOODS


class Command(CSGPFACommand):
    help = 'Fit a CS-GPFA model by variational EM and write checkpoint, report and monitor trace.'

    def add_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Dataset directory (counts.csv, conditions.csv).')
        parser.add_argument('--model', help='Model config JSON file.')
        parser.add_argument('--likelihood', choices=LIKELIHOODS)
        parser.add_argument('--condition-kernel', choices=CONDITION_KERNELS)
        parser.add_argument('--latents', type=int, help='Size of the latent pool D.')
        parser.add_argument('--max-iters', type=int)
        parser.add_argument('--threads', type=int, help='Worker threads for per-neuron updates.')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--resume', help='Checkpoint to continue from.')
        parser.add_argument(
            '--train-trials', type=int,
            help='Fit on this many trials per condition; the rest are written to OUT/test.',
        )
        parser.add_argument('--split-seed', type=int, default=0)
        parser.add_argument('--out', default='fit', help='Output directory.')

    def run(self, data, model=None, likelihood=None, condition_kernel=None, latents=None,
            max_iters=None, threads=None, seed=None, resume=None, train_trials=None, split_seed=0,
            out='fit', **options):
        dataset = read_dataset(data)
        payload = read_json(model) if model else {}
        if isinstance(payload, dict):
            overrides = {
                'likelihood': likelihood, 'condition_kernel': condition_kernel, 'n_latents': latents,
                'max_iters': max_iters, 'threads': threads, 'seed': seed,
            }
            payload.update({key: value for key, value in overrides.items() if value is not None})
        config = load_validated(ModelConfigSerializer, payload)

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        if train_trials is not None:
            dataset, test = split_trials(dataset, train_trials, split_seed)
            save_dataset(dataset, out / 'train')
            if test is not None:
                save_dataset(test, out / 'test')
            truth = Path(data) / TRUTH_FILE
            if truth.exists():
                for split in ('train', 'test'):
                    if (out / split).is_dir():
                        shutil.copyfile(truth, out / split / TRUTH_FILE)

        state = None
        if resume:
            state = load_checkpoint(resume)
            if state.likelihood != config.likelihood:
                raise ValueError(
                    f"checkpoint likelihood {state.likelihood} differs from {config.likelihood}"
                )
            if state.condition_kernel != config.condition_kernel:
                raise ValueError(
                    f"checkpoint condition kernel {state.condition_kernel} differs from {config.condition_kernel}"
                )

        state, report = fit(dataset, config, state)

        save_checkpoint(state, out / CHECKPOINT_FILE)
        write_json(out / REPORT_FILE, FitReportSerializer(report).data)
        pd.DataFrame(report.trace_rows(), columns=['iter', 'monitor', 'seconds']).to_csv(
            out / MONITOR_FILE, index=False, float_format=FLOAT_FORMAT,
        )

        outcome = 'converged' if report.converged else 'reached max iterations'
        style = self.style.SUCCESS if report.converged else self.style.WARNING
        self.stdout.write(style(
            f"Fit {outcome} after {report.iterations_run} iterations; "
            f"retained dims {report.retained_dims}; wrote {out}"
        ))
