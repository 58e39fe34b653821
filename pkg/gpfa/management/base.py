"""Shared plumbing for the csgpfa management commands.

Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.
"""
import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from ..exceptions import DatasetError, NumericalError
from ..serializers import CheckpointSerializer
from ..tensor_data import load_dataset, write_dataset

COUNTS_FILE = 'counts.csv'
CONDITIONS_FILE = 'conditions.csv'
META_FILE = 'dataset.json'
TRUTH_FILE = 'truth.json'
CHECKPOINT_FILE = 'checkpoint.json'
REPORT_FILE = 'fit_report.json'
MONITOR_FILE = 'monitor.csv'


def format_errors(detail):
    if isinstance(detail, dict):
        return '; '.join(f"{key}: {format_errors(value)}" for key, value in detail.items())
    if isinstance(detail, list):
        return ' '.join(format_errors(item) for item in detail)
    return str(detail)


def read_json(path):
    with open(path) as handle:
        return json.load(handle)


def write_json(path, payload):
    with open(path, 'w') as handle:
        json.dump(payload, handle, indent=2)
        handle.write('\n')


def load_validated(serializer_class, payload):
    serializer = serializer_class(data=payload)
    serializer.is_valid(raise_exception=True)
    return serializer.save()


def dataset_paths(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    return directory / COUNTS_FILE, directory / CONDITIONS_FILE, directory / META_FILE


def read_dataset(directory):
    return load_dataset(*dataset_paths(directory))


def save_dataset(data, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_dataset(data, directory / COUNTS_FILE, directory / CONDITIONS_FILE, directory / META_FILE)


def load_checkpoint(path):
    return load_validated(CheckpointSerializer, read_json(path))


def save_checkpoint(state, path):
    with open(path, 'w') as handle:
        json.dump(state.to_dict(), handle)


class CSGPFACommand(BaseCommand):
    """Runs ``run(**options)`` and maps library errors to exit codes."""

    def handle(self, *args, **options):
        try:
            self.run(**options)
        except NumericalError as exc:
            raise CommandError(f"numerical failure: {exc}", returncode=1) from exc
        except serializers.ValidationError as exc:
            raise CommandError(f"invalid input: {format_errors(exc.detail)}", returncode=2) from exc
        except (DatasetError, OSError, ValueError) as exc:
            raise CommandError(str(exc), returncode=2) from exc

    def run(self, **options):
        raise NotImplementedError
