from pathlib import Path

from django.conf import settings

from core.exceptions import DataFormatError
from core.utils import write_json
from diversity.reports import diversity_report, export_attention
from experiments.commands import ExperimentCommand, write_xlsx
from experiments.models import ExperimentRun
from experiments.training import load_model
from videos.datasets import load_split, read_manifest


class Command(ExperimentCommand):
    help = "Mean self-attention diversity per encoder and decoder layer over sampled videos."
    ledger_name = 'diversity'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--dataset', required=True)
        parser.add_argument('--split', default='test')
        parser.add_argument('--samples', type=int, default=64, help='Number of videos to average over.')
        parser.add_argument('--seed', type=int, help='Sampling seed (default: the checkpoint seed).')
        parser.add_argument('--threads', type=int, default=None)
        parser.add_argument('--output', help='Report path (default: <checkpoint dir>/diversity.json).')
        parser.add_argument('--export-attention', help='Dump every attention map of the first sampled video here.')
        parser.add_argument('--xlsx', help='Also write the report table to this workbook.')

    def run(self, **options):
        model, header, config = load_model(options['checkpoint'])
        manifest = read_manifest(options['dataset'])
        if int(manifest['feature_dim']) != model.config.feature_dim:
            raise DataFormatError(
                f"dataset has {manifest['feature_dim']} feature channels, checkpoint expects {model.config.feature_dim}"
            )
        samples, _ = load_split(options['dataset'], options['split'], resize_to=config.window.resize_to)
        seed = options['seed'] if options.get('seed') is not None else header['seed']
        out = Path(options.get('output') or Path(options['checkpoint']).parent / 'diversity.json')
        self.open_run(header['config_hash'], seed, out.parent, config.to_dict())

        report = diversity_report(
            model, samples, options['samples'], seed=seed, config_hash=header['config_hash'],
            threads=options.get('threads') or settings.SELFDETR_NUM_THREADS,
        )
        write_json(out, report.to_dict())
        if options.get('export_attention'):
            chosen = next(s for s in samples if s.id == report.sample_ids[0])
            export_attention(model, chosen, options['export_attention'])
        self.close_run(ExperimentRun.Status.COMPLETED, report.to_dict())

        self.write_table(report.to_frame())
        if options.get('xlsx'):
            write_xlsx(options['xlsx'], {'diversity': report.to_frame()})
        self.stdout.write(self.style.SUCCESS(f"Diversity report written to {out}"))
