from experiments.commands import ExperimentCommand, add_config_arguments, build_config
from experiments.models import ExperimentRun
from videos.datasets import write_dataset
from videos.synthetic import generate_synthetic


class Command(ExperimentCommand):
    help = "Generate the synthetic temporal-detection dataset (manifest + .feat/.json files per video)."
    ledger_name = 'gen_data'

    def add_arguments(self, parser):
        parser.add_argument('--output', required=True, help='Dataset directory to create.')
        parser.add_argument('--force', action='store_true', help='Overwrite a non-empty output directory.')
        parser.add_argument('--train-size', type=int)
        parser.add_argument('--test-size', type=int)
        parser.add_argument('--length', type=int, help='Frames per video (data.T).')
        add_config_arguments(parser)

    def run(self, **options):
        config = build_config(options, {
            'data.seed': options.get('seed'),
            'data.train_size': options.get('train_size'),
            'data.test_size': options.get('test_size'),
            'data.T': options.get('length'),
        })
        data = config.data.validate()
        self.open_run(config_hash=config.config_hash, seed=data.seed, output_dir=options['output'], config=config.to_dict())
        manifest = write_dataset(options['output'], generate_synthetic(data), force=options['force'])
        counts = {split: len(entries) for split, entries in manifest['splits'].items()}
        self.close_run(ExperimentRun.Status.COMPLETED, {'data_hash': manifest['data_hash'], **counts})
        self.stdout.write(self.style.SUCCESS(
            f"Dataset written to {options['output']}: train={counts['train']} test={counts['test']} "
            f"data_hash={manifest['data_hash']}"
        ))
