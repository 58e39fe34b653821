from django.apps import AppConfig


class GpfaConfig(AppConfig):
    name = 'gpfa'
    verbose_name = 'Coupled-subspaces GPFA'
