import numpy as np
import pandas as pd

from gpfa.exceptions import DatasetError
from gpfa.management.base import CSGPFACommand, load_checkpoint, write_json
from gpfa.model_state import model_grams
from gpfa.predict import PredictionRequest, predict_rates, predict_weights
from gpfa.tensor_data import FLOAT_FORMAT, load_conditions


class Command(CSGPFACommand):
    help = 'Predict firing rates (and optionally loading weights) at new conditions.'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--conditions', required=True, help='CSV of new conditions.')
        parser.add_argument('--out', default='rates.csv', help='Rate CSV path.')
        parser.add_argument('--weights', help='Write predicted weights to this JSON file.')
        parser.add_argument('--with-covariance', action='store_true',
                            help='Include weight covariances in the weights file.')

    def run(self, checkpoint, conditions, out='rates.csv', weights=None, with_covariance=False, **options):
        state = load_checkpoint(checkpoint)
        coords = load_conditions(conditions)
        if coords.shape[1] != state.condition_coords.shape[1]:
            raise DatasetError(
                f"conditions have {coords.shape[1]} coordinates, model was fitted on "
                f"{state.condition_coords.shape[1]}"
            )

        grams = model_grams(state)
        request = PredictionRequest(coords)
        prediction = predict_weights(state, grams, request)
        rates = predict_rates(state, grams, request, prediction)

        M, N, T = rates.rate.shape
        condition, neuron, bins = np.meshgrid(np.arange(M), np.arange(N), np.arange(T), indexing='ij')
        pd.DataFrame({
            'condition': condition.ravel(),
            'neuron': neuron.ravel(),
            'bin': bins.ravel(),
            'rate': rates.rate.ravel(),
            'rate_var_proxy': rates.rate_var.ravel(),
        }).to_csv(out, index=False, float_format=FLOAT_FORMAT)

        if weights:
            neurons = []
            for n in range(N):
                entry = {'neuron': n, 'mean': prediction.mean[n].tolist()}
                if with_covariance:
                    entry['cov'] = prediction.cov[n].tolist()
                neurons.append(entry)
            write_json(weights, {
                'layout': 'd-major',
                'n_latents': prediction.n_latents,
                'conditions': coords.tolist(),
                'neurons': neurons,
            })

        self.stdout.write(self.style.SUCCESS(f"Predicted rates for {M} conditions written to {out}"))
