import logging
from pathlib import Path

import pandas as pd
from django.conf import settings

from core.utils import write_json
from evaluation.inference import ground_truth, read_results, run_inference, write_results
from evaluation.metrics import mean_ap
from evaluation.nms import Decay
from experiments.commands import ExperimentCommand, write_xlsx
from experiments.models import ExperimentRun
from experiments.training import load_model
from videos.datasets import data_hash, load_split, read_manifest

logger = logging.getLogger(__name__)


def per_class_frame(result):
    rows = [
        {"class": cls, **{f"AP@{t:.2f}": ap for t, ap in zip(result.thresholds, aps)}}
        for cls, aps in sorted(result.per_class.items())
    ]
    return pd.DataFrame(rows)


class Command(ExperimentCommand):
    help = "Run inference with a checkpoint, apply SoftNMS and report mAP at the tIoU thresholds."
    ledger_name = 'eval'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--dataset', required=True)
        parser.add_argument('--split', default='test')
        parser.add_argument('--thresholds', type=float, nargs='+')
        parser.add_argument('--no-nms', action='store_true', help='Skip SoftNMS.')
        parser.add_argument('--decay', choices=Decay.values)
        parser.add_argument('--threads', type=int, default=None)
        parser.add_argument('--output', help='Directory for results.json and metrics.json (default: checkpoint dir).')
        parser.add_argument('--xlsx', help='Also write the mAP table to this workbook.')

    def run(self, **options):
        model, header, config = load_model(options['checkpoint'])
        eval_cfg = config.eval
        if options.get('thresholds'):
            eval_cfg.thresholds = list(options['thresholds'])
        if options.get('no_nms'):
            eval_cfg.nms = False
        if options.get('decay'):
            eval_cfg.decay = options['decay']
        eval_cfg.validate()

        manifest = read_manifest(options['dataset'])
        if manifest.get('data_hash') != data_hash(config.data):
            logger.warning(
                "dataset data_hash %s differs from the checkpoint's %s",
                manifest.get('data_hash'), data_hash(config.data),
            )
            self.stdout.write(self.style.WARNING("Dataset differs from the one the checkpoint was trained on."))
        samples, _ = load_split(options['dataset'], options['split'], resize_to=config.window.resize_to)

        out = Path(options.get('output') or Path(options['checkpoint']).parent)
        config_hash, seed = header['config_hash'], header['seed']
        self.open_run(config_hash, seed, out, config.to_dict())
        threads = options.get('threads') or settings.SELFDETR_NUM_THREADS
        results = run_inference(model, samples, eval_cfg, config.window, threads=threads)
        results_path = write_results(out / 'results.json', results, config_hash, seed)

        # score what was written so the file and the metrics cannot drift apart
        written, _ = read_results(results_path)
        result = mean_ap(written, ground_truth(samples), eval_cfg.thresholds)
        metrics = {"config_hash": config_hash, "seed": seed, **result.to_dict()}
        write_json(out / 'metrics.json', metrics)
        self.close_run(ExperimentRun.Status.COMPLETED, metrics)

        self.write_table(result.to_frame())
        if options.get('xlsx'):
            write_xlsx(options['xlsx'], {'mAP': result.to_frame(), 'per_class': per_class_frame(result)})
        self.stdout.write(self.style.SUCCESS(f"Average mAP {result.average:.4f}; metrics written to {out / 'metrics.json'}"))
