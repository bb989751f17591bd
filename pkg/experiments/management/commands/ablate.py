from pathlib import Path

import pandas as pd
from django.conf import settings

from core.exceptions import ConfigError
from core.utils import write_json
from diversity.reports import diversity_report
from evaluation.inference import ground_truth, run_inference
from evaluation.metrics import mean_ap
from experiments.commands import ExperimentCommand, add_config_arguments, build_config, write_xlsx
from experiments.models import ExperimentRun
from experiments.training import Trainer
from videos.datasets import load_split, read_manifest

VARIANTS = ('baseline', 'encoder', 'decoder', 'both')


def verdicts(rows):
    """Per seed: does feedback raise final-layer diversity and keep mAP at or above the baseline?"""
    out = {}
    for seed in sorted({r['seed'] for r in rows}):
        by_variant = {r['variant']: r for r in rows if r['seed'] == seed}
        base = by_variant.get('baseline')
        both = by_variant.get('both')
        if base is None:
            continue
        entry = {'map_ge_baseline': {
            v: r['avg_map'] >= base['avg_map'] for v, r in by_variant.items() if v != 'baseline'
        }}
        if both is not None:
            for kind in ('enc_final', 'dec_final'):
                if base[kind] is not None and both[kind] is not None:
                    entry[f'{kind}_diversity_higher'] = both[kind] > base[kind]
        out[str(seed)] = entry
    return out


class Command(ExperimentCommand):
    help = "Train and evaluate the feedback variants per seed, then compare them with the baseline."
    ledger_name = 'ablate'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', required=True)
        parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
        parser.add_argument('--variants', nargs='+', choices=VARIANTS, default=list(VARIANTS))
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--samples', type=int, default=64, help='Videos per diversity report.')
        parser.add_argument('--xlsx', help='Also write the comparison table to this workbook.')
        add_config_arguments(parser)

    def run(self, **options):
        base = build_config(options, {'epochs': options.get('epochs')})
        base.sync_with_manifest(read_manifest(options['dataset']))
        if 'baseline' not in options['variants']:
            raise ConfigError("ablate needs the baseline variant to compare against")
        root = Path(base.output_dir) if base.output_dir else Path(settings.SELFDETR_OUTPUT_ROOT) / f"ablate_{base.config_hash}"
        train, _ = load_split(options['dataset'], 'train', resize_to=base.window.resize_to)
        test, _ = load_split(options['dataset'], 'test', resize_to=base.window.resize_to)
        threads = settings.SELFDETR_NUM_THREADS
        self.open_run(base.config_hash, base.seed, root, base.to_dict())

        rows = []
        for seed in options['seeds']:
            for variant in options['variants']:
                config = base.copy().apply_variant(variant)
                config.seed = seed
                config.output_dir = str(root / f"{variant}_s{seed}")
                trainer = Trainer(config.validate(), train)
                trainer.fit()
                results = run_inference(trainer.model, test, config.eval, config.window, threads=threads)
                result = mean_ap(results, ground_truth(test), config.eval.thresholds)
                report = diversity_report(
                    trainer.model, test, options['samples'], seed=seed, config_hash=config.config_hash, threads=threads,
                )
                rows.append({
                    'variant': variant, 'seed': seed, 'config_hash': config.config_hash,
                    'avg_map': result.average,
                    'enc_final': report.final_layer('enc_self'),
                    'dec_final': report.final_layer('dec_self'),
                })
                self.stdout.write(
                    f"seed={seed} variant={variant} avg_mAP={result.average:.4f} "
                    f"enc_final={rows[-1]['enc_final']} dec_final={rows[-1]['dec_final']}"
                )

        summary = {'config_hash': base.config_hash, 'runs': rows, 'verdicts': verdicts(rows)}
        write_json(root / 'ablation.json', summary)
        self.close_run(ExperimentRun.Status.COMPLETED, summary)
        frame = pd.DataFrame(rows)
        self.write_table(frame)
        if options.get('xlsx'):
            write_xlsx(options['xlsx'], {'ablation': frame})
        self.stdout.write(self.style.SUCCESS(f"Ablation written to {root / 'ablation.json'}"))
