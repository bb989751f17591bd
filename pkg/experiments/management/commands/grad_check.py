import pandas as pd
from django.core.management.base import CommandError

from core.exceptions import ConfigError
from experiments.commands import EXIT_VALIDATION, ExperimentCommand
from experiments.gradchecks import CHECKS, TOLERANCE, run_checks


class Command(ExperimentCommand):
    help = "Compare tape gradients with central differences for every registered op and the toy end-to-end loss."

    def add_arguments(self, parser):
        parser.add_argument('checks', nargs='*', help='Subset of checks to run (default: all).')
        parser.add_argument('--tolerance', type=float, default=TOLERANCE)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--list', action='store_true', help='List the registered checks and exit.')

    def run(self, **options):
        if options.get('list'):
            for name in sorted(CHECKS):
                self.stdout.write(name)
            return
        names = options.get('checks') or None
        unknown = sorted(set(names or []) - set(CHECKS))
        if unknown:
            raise ConfigError(f"unknown grad checks: {unknown}")
        rows = run_checks(names, seed=options['seed'], tolerance=options['tolerance'])
        frame = pd.DataFrame(rows, columns=['check', 'max_rel_error', 'passed'])
        self.write_table(frame)
        failed = [row['check'] for row in rows if not row['passed']]
        if failed:
            raise CommandError(f"gradient check failed: {', '.join(failed)}", returncode=EXIT_VALIDATION)
        self.stdout.write(self.style.SUCCESS(f"All {len(rows)} gradient checks passed (< {options['tolerance']:g})."))
