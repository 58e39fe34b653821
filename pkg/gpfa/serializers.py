from rest_framework import serializers

from .kernels import CONDITION_KERNELS
from .model_state import (
    ARRAY_FIELDS,
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    SCALAR_FIELDS,
    ModelConfig,
    VariationalState,
)
from .tensor_data import LIKELIHOODS, GenerativeSpec

LIKELIHOOD_ALIASES = {'neg_binomial': 'negbin', 'negative_binomial': 'negbin'}


class LikelihoodField(serializers.ChoiceField):
    """Likelihood name; long spellings of the negative binomial are accepted."""

    def __init__(self, **kwargs):
        super().__init__(choices=list(LIKELIHOODS) + list(LIKELIHOOD_ALIASES), **kwargs)

    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        return LIKELIHOOD_ALIASES.get(value, value)


class LengthscalesField(serializers.ListField):
    child = serializers.FloatField()

    def to_internal_value(self, data):
        if isinstance(data, (int, float)) and not isinstance(data, bool):
            data = [data]
        values = super().to_internal_value(data)
        if not values or any(v <= 0 for v in values):
            raise serializers.ValidationError("Lengthscales must be a non-empty list of positive numbers.")
        return tuple(values)


class GenerativeSpecSerializer(serializers.Serializer):
    """Validates a synthetic-dataset config and builds a GenerativeSpec."""

    n_conditions = serializers.IntegerField(min_value=1, required=False)
    n_neurons = serializers.IntegerField(min_value=1, required=False)
    n_bins = serializers.IntegerField(min_value=1, required=False)
    n_latents = serializers.IntegerField(min_value=1, required=False)
    condition_dims = serializers.IntegerField(min_value=1, required=False)
    n_trials = serializers.IntegerField(min_value=1, required=False)
    time_lengthscales = LengthscalesField(required=False)
    condition_lengthscales = LengthscalesField(required=False)
    dispersion_range = serializers.ListField(
        child=serializers.FloatField(min_value=0.0), min_length=2, max_length=2, required=False,
    )
    seed = serializers.IntegerField(min_value=0, required=False)
    likelihood = LikelihoodField(required=False)
    bias_scale = serializers.FloatField(min_value=0.0, required=False)
    bias_mean = serializers.FloatField(required=False)
    loading_scale = serializers.FloatField(min_value=0.0, required=False)
    binomial_trials = serializers.IntegerField(min_value=1, required=False)
    bin_width = serializers.FloatField(min_value=0.0, required=False)
    jitter = serializers.FloatField(required=False)

    def validate(self, attrs):
        unknown = set(self.initial_data) - set(self.fields)
        if unknown:
            raise serializers.ValidationError({name: 'Unknown field.' for name in sorted(unknown)})
        if 'dispersion_range' in attrs:
            attrs['dispersion_range'] = tuple(attrs['dispersion_range'])
        try:
            attrs['spec'] = GenerativeSpec(**attrs)
        except ValueError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs

    def create(self, validated_data):
        return validated_data['spec']


class ModelConfigSerializer(serializers.Serializer):
    """Validates a model config; omitted fields fall back to settings.CSGPFA."""

    n_latents = serializers.IntegerField(min_value=1, required=False)
    likelihood = LikelihoodField(required=False)
    condition_kernel = serializers.ChoiceField(choices=CONDITION_KERNELS, required=False)
    ard_shape = serializers.FloatField(required=False)
    ard_rate = serializers.FloatField(required=False)
    bias_shape = serializers.FloatField(required=False)
    bias_rate = serializers.FloatField(required=False)
    time_lengthscales = LengthscalesField(required=False, allow_null=True)
    condition_lengthscales = LengthscalesField(required=False, allow_null=True)
    jitter = serializers.FloatField(required=False)
    max_iters = serializers.IntegerField(min_value=0, required=False)
    tolerance = serializers.FloatField(required=False)
    patience = serializers.IntegerField(min_value=1, required=False)
    mstep_steps = serializers.IntegerField(min_value=0, required=False)
    mstep_step_size = serializers.FloatField(required=False)
    learn_hyperparameters = serializers.BooleanField(required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    threads = serializers.IntegerField(min_value=1, required=False, allow_null=True)
    retention_threshold = serializers.FloatField(min_value=0.0, required=False)
    log_every = serializers.IntegerField(min_value=1, required=False)

    def validate(self, attrs):
        unknown = set(self.initial_data) - set(self.fields)
        if unknown:
            raise serializers.ValidationError({name: 'Unknown field.' for name in sorted(unknown)})
        try:
            attrs['config'] = ModelConfig(**attrs)
        except ValueError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs

    def create(self, validated_data):
        return validated_data['config']


class FitReportSerializer(serializers.Serializer):
    """FitReport as written to disk. Wall time is left out so reports are reproducible."""

    likelihood = serializers.CharField()
    iterations_run = serializers.IntegerField()
    converged = serializers.BooleanField()
    monitor = serializers.ListField(child=serializers.FloatField())
    time_lengthscales = serializers.ListField(child=serializers.FloatField())
    condition_lengthscales = serializers.ListField(child=serializers.FloatField())
    retained_dims = serializers.ListField(child=serializers.IntegerField())


class MetricsSerializer(serializers.Serializer):
    train_loglik = serializers.FloatField()
    test_loglik = serializers.FloatField(allow_null=True)
    true_train_loglik = serializers.FloatField(required=False)
    true_test_loglik = serializers.FloatField(required=False)
    mae = serializers.FloatField(required=False)
    retained_dims = serializers.ListField(child=serializers.IntegerField())
    seconds = serializers.FloatField()


class CheckpointSerializer(serializers.Serializer):
    """Validates a checkpoint document and rebuilds the VariationalState."""

    format = serializers.ChoiceField(choices=[CHECKPOINT_FORMAT])
    version = serializers.IntegerField(min_value=1, max_value=CHECKPOINT_VERSION)
    likelihood = serializers.ChoiceField(choices=LIKELIHOODS)
    condition_kernel = serializers.ChoiceField(choices=CONDITION_KERNELS, required=False)
    iteration = serializers.IntegerField(min_value=0)
    stall_count = serializers.IntegerField(min_value=0)
    history = serializers.ListField(child=serializers.FloatField(), required=False)

    def validate(self, attrs):
        missing = [name for name in ARRAY_FIELDS + SCALAR_FIELDS if name not in self.initial_data]
        if missing:
            raise serializers.ValidationError({name: 'This field is required.' for name in missing})
        try:
            state = VariationalState.from_dict(self.initial_data)
        except (TypeError, ValueError) as exc:
            raise serializers.ValidationError(f"Malformed checkpoint arrays: {exc}")
        problems = checkpoint_shape_errors(state)
        if problems:
            raise serializers.ValidationError(problems)
        attrs['state'] = state
        return attrs

    def create(self, validated_data):
        return validated_data['state']


def checkpoint_shape_errors(state):
    D, T = state.mu_x.shape if state.mu_x.ndim == 2 else (0, 0)
    N, M, C = state.mu_w.shape[0], state.condition_coords.shape[0], state.condition_coords.shape[1]
    expected = {
        'mu_x': (D, T),
        'cov_x': (D, T, T),
        'mu_w': (N, D * M),
        'cov_w': (N, D * M, D * M),
        'mu_beta': (N,),
        'var_beta': (N,),
        'r_mean': (N,),
        'r_sq': (N,),
        'r_log': (N,),
        'binomial_trials': (N,),
        'ard_shape': (D,),
        'ard_rate': (D,),
        'prior_ard_shape': (D,),
        'prior_ard_rate': (D,),
        'time_lengthscales': (D,),
        'condition_lengthscales': (C,),
    }
    errors = {}
    for name, shape in expected.items():
        found = getattr(state, name).shape
        if found != shape:
            errors[name] = f"Expected shape {shape}, got {found}."
    return errors
