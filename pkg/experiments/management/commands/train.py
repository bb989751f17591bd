from autodiff.checkpoint import load_checkpoint
from experiments.commands import ExperimentCommand, add_config_arguments, build_config
from experiments.config import ExperimentConfig
from experiments.models import ExperimentRun
from experiments.training import Trainer
from feedback.losses import Guidance
from videos.datasets import load_split, read_manifest


class Command(ExperimentCommand):
    help = "Train the detector with (or without) the self-feedback losses."
    ledger_name = 'train'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', required=True, help='Directory written by gen_data.')
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--lr', type=float)
        parser.add_argument('--feedback', choices=Guidance.values, help="Guidance mode; 'off' is the baseline.")
        parser.add_argument('--lambda-e', type=float, help='Encoder feedback weight.')
        parser.add_argument('--lambda-d', type=float, help='Decoder feedback weight.')
        parser.add_argument('--no-encoder', action='store_true', help='Remove every encoder layer.')
        parser.add_argument('--no-decoder-sa', action='store_true', help='Remove decoder self-attention.')
        parser.add_argument('--resume', help='Continue from a checkpoint of the same config.')
        parser.add_argument('--stop-after', type=int, help='Stop after this many optimizer steps.')
        add_config_arguments(parser)

    def run(self, **options):
        if options.get('resume'):
            header, _ = load_checkpoint(options['resume'])
            config = ExperimentConfig.from_dict(header['config'])
            if options.get('output_dir'):
                config.output_dir = options['output_dir']
        else:
            config = build_config(options, {
                'epochs': options.get('epochs'),
                'batch_size': options.get('batch_size'),
                'optimizer.lr': options.get('lr'),
                'feedback.guidance': options.get('feedback'),
                'loss.lambda_e': options.get('lambda_e'),
                'loss.lambda_d': options.get('lambda_d'),
                'model.use_encoder': False if options.get('no_encoder') else None,
                'model.decoder_self_attention': False if options.get('no_decoder_sa') else None,
            })
            config.sync_with_manifest(read_manifest(options['dataset']))
        config.validate()

        samples, _ = load_split(options['dataset'], 'train', resize_to=config.window.resize_to)
        trainer = Trainer(config, samples)
        if options.get('resume'):
            trainer.resume(options['resume'])
        self.open_run(config.config_hash, config.seed, trainer.run_dir, config.to_dict())
        history = trainer.fit(stop_after=options.get('stop_after'))

        epochs = [r for r in history if r['kind'] == 'epoch']
        last = epochs[-1] if epochs else (history[-1] if history else {})
        self.close_run(ExperimentRun.Status.COMPLETED, last)
        self.stdout.write(
            f"config_hash={config.config_hash} seed={config.seed} steps={trainer.step} "
            f"loss={last.get('loss', float('nan')):.6g} fb_enc={last.get('fb_enc', 0.0):.6g} "
            f"fb_dec={last.get('fb_dec', 0.0):.6g}"
        )
        if trainer.final_path:
            self.stdout.write(self.style.SUCCESS(f"Final checkpoint: {trainer.final_path}"))
        else:
            self.stdout.write(self.style.WARNING(f"Stopped early; run directory: {trainer.run_dir}"))
