from pathlib import Path

from gpfa.management.base import (
    TRUTH_FILE,
    CSGPFACommand,
    load_validated,
    read_json,
    save_dataset,
)
from gpfa.serializers import GenerativeSpecSerializer
from gpfa.tensor_data import generate_synthetic, write_ground_truth


class Command(CSGPFACommand):
    help = 'Generate a synthetic spike-count dataset and its ground truth from a JSON config.'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Generative config JSON file.')
        parser.add_argument('--seed', type=int, help='Overrides the seed in the config.')
        parser.add_argument('--out', default='data', help='Output directory.')

    def run(self, config, seed=None, out='data', **options):
        payload = read_json(config)
        if seed is not None and isinstance(payload, dict):
            payload['seed'] = seed
        spec = load_validated(GenerativeSpecSerializer, payload)

        data, truth = generate_synthetic(spec)
        out = Path(out)
        save_dataset(data, out)
        write_ground_truth(truth, out / TRUTH_FILE)

        M, R, N, T = data.counts.shape
        self.stdout.write(self.style.SUCCESS(
            f"Generated {M} conditions x {R} trials x {N} neurons x {T} bins in {out}"
        ))
