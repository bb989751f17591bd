from pathlib import Path

from core.utils import write_json
from evaluation.inference import ground_truth, read_results
from evaluation.metrics import DEFAULT_THRESHOLDS, mean_ap
from experiments.commands import ExperimentCommand
from videos.datasets import load_split


class Command(ExperimentCommand):
    help = "Score a results.json file against a dataset split's annotations."

    def add_arguments(self, parser):
        parser.add_argument('--results', required=True)
        parser.add_argument('--dataset', required=True)
        parser.add_argument('--split', default='test')
        parser.add_argument('--thresholds', type=float, nargs='+', default=list(DEFAULT_THRESHOLDS))
        parser.add_argument('--output', help='Write the metrics JSON here.')

    def run(self, **options):
        results, payload = read_results(options['results'])
        samples, _ = load_split(options['dataset'], options['split'])
        result = mean_ap(results, ground_truth(samples), options['thresholds'])
        metrics = {"config_hash": payload.get('config_hash', ''), "seed": payload.get('seed', 0), **result.to_dict()}
        if options.get('output'):
            write_json(Path(options['output']), metrics)
        self.write_table(result.to_frame())
        self.stdout.write(self.style.SUCCESS(f"Average mAP {result.average:.4f}"))
