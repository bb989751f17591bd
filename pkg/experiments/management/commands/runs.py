import pandas as pd
from django.core.management.base import BaseCommand

from core.utils import table_exists
from experiments.ledger import TABLE
from experiments.models import ExperimentRun


class Command(BaseCommand):
    help = "List recorded experiment runs."

    def add_arguments(self, parser):
        parser.add_argument('--command', dest='run_command', help='Only runs of this command.')
        parser.add_argument('--status', choices=ExperimentRun.Status.values)
        parser.add_argument('--limit', type=int, default=50)

    def handle(self, *args, **opts):
        if not table_exists(TABLE):
            self.stdout.write(self.style.WARNING("Run ledger is not migrated; run `manage.py migrate` first."))
            return
        runs = ExperimentRun.objects.all()
        if opts.get('run_command'):
            runs = runs.filter(command=opts['run_command'])
        if opts.get('status'):
            runs = runs.filter(status=opts['status'])
        rows = list(runs.values('id', 'command', 'config_hash', 'seed', 'status', 'output_dir', 'created_at')[:opts['limit']])
        if not rows:
            self.stdout.write("No runs recorded.")
            return
        self.stdout.write(pd.DataFrame(rows).to_string(index=False))
        self.stdout.write(self.style.SUCCESS(f"{len(rows)} run(s)"))
