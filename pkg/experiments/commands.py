"""Shared plumbing for the experiment management commands."""

import logging
from pathlib import Path

import pandas as pd
from django.core.management.base import BaseCommand, CommandError
from openpyxl.styles import Alignment, Font
from openpyxl.utils import get_column_letter

from core.exceptions import ConfigError, SelfDetrError, TrainingDivergedError
from experiments.config import ExperimentConfig, parse_value
from experiments.ledger import finish_run, start_run
from experiments.models import ExperimentRun

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def add_config_arguments(parser):
    parser.add_argument('--config', help='JSON file with an ExperimentConfig document.')
    parser.add_argument('--seed', type=int, help='Experiment seed.')
    parser.add_argument('--output-dir', help='Run directory (default: <SELFDETR_OUTPUT_ROOT>/<hash>_s<seed>).')
    parser.add_argument(
        '--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
        help='Override any config key; VALUE is parsed as JSON. Repeatable.',
    )


def build_config(options, flags=None):
    """
    defaults < --config file < dedicated flags < --set overrides.

    ``flags`` maps dotted config keys to already-parsed flag values; None
    values are skipped.
    """
    path = options.get('config')
    config = ExperimentConfig.from_file(path) if path else ExperimentConfig()
    if options.get('seed') is not None:
        config.seed = options['seed']
    if options.get('output_dir'):
        config.output_dir = options['output_dir']
    for key, value in (flags or {}).items():
        if value is not None:
            config.set(key, value)
    for item in options.get('set') or []:
        key, sep, raw = item.partition('=')
        if not sep or not key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        config.set(key.strip(), parse_value(raw))
    return config


def write_xlsx(path, sheets):
    """Write ``{sheet name: DataFrame}`` to one workbook with bold headers and fitted columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(path, engine='openpyxl') as writer:
        for name, frame in sheets.items():
            frame.to_excel(writer, sheet_name=name, index=False)
            worksheet = writer.sheets[name]
            for column in worksheet.columns:
                width = max((len(str(cell.value)) for cell in column if cell.value is not None), default=0)
                worksheet.column_dimensions[get_column_letter(column[0].column)].width = min(width + 2, 50)
            for cell in worksheet[1]:
                cell.font = Font(bold=True)
                cell.alignment = Alignment(horizontal='center', vertical='center')
    return path


class ExperimentCommand(BaseCommand):
    """
    Runs ``run(**options)`` and maps domain errors to exit codes:
    validation errors exit 1, numerical failures exit 2.
    """

    ledger_name = None

    def handle(self, *args, **options):
        self._run = None
        try:
            return self.run(**options)
        except TrainingDivergedError as exc:
            self.close_run(ExperimentRun.Status.FAILED, {"error": exc.diagnostic()})
            raise CommandError(f"training diverged: {exc.diagnostic()}", returncode=EXIT_NUMERICAL) from exc
        except SelfDetrError as exc:
            self.close_run(ExperimentRun.Status.FAILED, {"error": str(exc)})
            raise CommandError(str(exc), returncode=EXIT_VALIDATION) from exc

    def run(self, **options):
        raise NotImplementedError

    def open_run(self, config_hash='', seed=0, output_dir='', config=None):
        self._run = start_run(self.ledger_name, config_hash, seed, output_dir, config)
        return self._run

    def close_run(self, status, metrics=None):
        finish_run(getattr(self, '_run', None), status, metrics)
        self._run = None

    def write_table(self, frame):
        self.stdout.write(frame.to_string(index=False))
