import copy
import json
import tempfile
from contextlib import closing
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings
from numpy.testing import assert_allclose

from autodiff import ops
from autodiff.engine import DiffArray
from autodiff.gradcheck import grad_check
from core.exceptions import ConfigError, DataFormatError, TrainingDivergedError
from diversity.reports import diversity_report
from evaluation.inference import ground_truth, run_inference
from evaluation.metrics import mean_ap
from experiments.commands import EXIT_NUMERICAL, EXIT_VALIDATION, ExperimentCommand, build_config
from experiments.config import ExperimentConfig
from experiments.gradchecks import CHECKS, register_check, run_checks, toy_problem, unregister_check
from experiments.ledger import finish_run, start_run
from experiments.management.commands.ablate import verdicts
from experiments.models import ExperimentRun
from experiments.training import (
    FINAL_CHECKPOINT, METRICS_FILE, Prefetcher, Trainer, checkpoint_name, epoch_batches, load_model,
    sample_loss, training_samples,
)
from videos.datasets import load_split
from videos.synthetic import generate_synthetic

TINY = {
    "model": {
        "num_encoder_layers": 1, "num_decoder_layers": 2, "num_queries": 3, "model_dim": 8,
        "num_heads": 2, "num_classes": 2, "feature_dim": 3,
    },
    "data": {
        "T": 24, "feature_dim": 3, "num_classes": 2, "max_instances": 2, "min_width": 0.1,
        "max_width": 0.3, "train_size": 4, "test_size": 3, "seed": 7,
    },
    "epochs": 2,
    "batch_size": 2,
    "checkpoint_every": 1,
}


def tiny_config(**overrides):
    data = copy.deepcopy(TINY)
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


class ConfigTests(SimpleTestCase):
    def test_hash_ignores_output_dir(self):
        a, b = tiny_config(), tiny_config(output_dir="/tmp/elsewhere")
        self.assertEqual(a.config_hash, b.config_hash)
        self.assertNotEqual(a.config_hash, tiny_config(seed=1).config_hash)
        self.assertEqual(ExperimentConfig.from_dict(a.to_dict()).config_hash, a.config_hash)

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"epoch": 3})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"model": {"layers": 3}})

    def test_set_with_alias_and_coercion(self):
        config = ExperimentConfig()
        config.set("feedback.lambda_e", "0")
        config.set("model.use_encoder", "false")
        config.set("eval.thresholds", "[0.5]")
        self.assertEqual(config.loss.lambda_e, 0.0)
        self.assertIsInstance(config.loss.lambda_e, float)
        self.assertFalse(config.model.use_encoder)
        self.assertEqual(config.eval.thresholds, [0.5])
        with self.assertRaises(ConfigError):
            config.set("model.depth", 3)
        with self.assertRaises(ConfigError):
            config.set("training.epochs", 3)
        with self.assertRaises(ConfigError):
            config.set("epochs", "many")

    def test_validate(self):
        tiny_config().validate()
        with self.assertRaises(ConfigError):
            tiny_config(model={**TINY["model"], "num_classes": 3}).validate()
        with self.assertRaises(ConfigError):
            tiny_config(model={**TINY["model"], "num_queries": 1}).validate()

    def test_lr_schedule(self):
        opt = ExperimentConfig().optimizer
        self.assertEqual(opt.lr_at(0, 60), 2e-4)
        self.assertEqual(opt.lr_at(39, 60), 2e-4)
        self.assertAlmostEqual(opt.lr_at(40, 60), 2e-5, places=15)
        self.assertAlmostEqual(opt.lr_at(59, 60), 2e-6, places=15)

    def test_variants(self):
        self.assertEqual(tiny_config().apply_variant("baseline").feedback.guidance, "off")
        encoder = tiny_config().apply_variant("encoder").feedback
        self.assertEqual((encoder.use_encoder_feedback, encoder.use_decoder_feedback), (True, False))
        decoder = tiny_config().apply_variant("decoder").feedback
        self.assertEqual((decoder.use_encoder_feedback, decoder.use_decoder_feedback), (False, True))
        with self.assertRaises(ConfigError):
            tiny_config().apply_variant("half")

    def test_run_dir(self):
        with tempfile.TemporaryDirectory() as tmp, override_settings(SELFDETR_OUTPUT_ROOT=tmp):
            config = tiny_config(seed=3)
            self.assertEqual(config.run_dir(), Path(tmp) / f"{config.config_hash}_s3")
        self.assertEqual(tiny_config(output_dir="out/x").run_dir(), Path("out/x"))

    def test_layering(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text(json.dumps({"epochs": 9, "batch_size": 4}))
            config = build_config(
                {"config": str(path), "seed": 5, "set": ["batch_size=8", "feedback.lambda_d=2.5"]},
                {"epochs": 3, "optimizer.lr": None},
            )
        self.assertEqual((config.epochs, config.batch_size, config.seed), (3, 8, 5))
        self.assertEqual(config.loss.lambda_d, 2.5)
        self.assertEqual(config.optimizer.lr, 2e-4)
        with self.assertRaises(ConfigError):
            build_config({"set": ["no-equals-sign"]})


class BatchingTests(SimpleTestCase):
    def test_epoch_batches(self):
        batches = epoch_batches(7, 3, seed=1, epoch=2)
        self.assertEqual([len(b) for b in batches], [3, 3, 1])
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(7)))
        again = epoch_batches(7, 3, seed=1, epoch=2)
        self.assertTrue(all(np.array_equal(a, b) for a, b in zip(batches, again)))
        self.assertFalse(np.array_equal(np.concatenate(batches), np.concatenate(epoch_batches(7, 3, 1, 3))))

    def test_prefetcher_keeps_order(self):
        self.assertEqual(list(Prefetcher(lambda: iter(range(20)), size=2)), list(range(20)))

    def test_prefetcher_forwards_errors(self):
        def produce():
            yield 1
            raise ValueError("broken producer")

        seen = []
        with self.assertRaises(ValueError):
            for item in Prefetcher(produce):
                seen.append(item)
        self.assertEqual(seen, [1])

    def test_prefetcher_worker_exits_when_consumer_stops_early(self):
        prefetcher = Prefetcher(lambda: iter(range(100)), size=2)
        batches = iter(prefetcher)
        self.assertEqual(next(batches), 0)
        batches.close()
        prefetcher.worker.join(timeout=2.0)
        self.assertFalse(prefetcher.worker.is_alive())

    def test_prefetcher_worker_exits_after_consumer_error(self):
        prefetcher = Prefetcher(lambda: iter(range(100)), size=2)
        with self.assertRaises(RuntimeError), closing(iter(prefetcher)) as batches:
            for item in batches:
                raise RuntimeError(f"step {item} failed")
        prefetcher.worker.join(timeout=2.0)
        self.assertFalse(prefetcher.worker.is_alive())

    def test_windowed_training_samples(self):
        config = tiny_config(window={"enabled": True, "size": 12, "overlap": 4})
        samples = generate_synthetic(config.data).splits["train"]
        pieces = training_samples(samples, config.window)
        self.assertEqual(len(pieces), 3 * len(samples))
        self.assertTrue(all(p.features.shape == (12, 3) for p in pieces))
        self.assertEqual(training_samples(samples, None), samples)


class TrainerTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.config = tiny_config()
        self.samples = generate_synthetic(self.config.data).splits["train"]

    def trainer(self, name, config=None):
        return Trainer(config or self.config, self.samples, run_dir=self.root / name)

    def test_first_step_is_finite(self):
        history = self.trainer("a").fit(stop_after=1)
        self.assertEqual(len(history), 1)
        record = history[0]
        self.assertTrue(np.isfinite(record["loss"]))
        self.assertGreater(record["fb_enc"], 0.0)
        self.assertGreater(record["fb_dec"], 0.0)
        self.assertAlmostEqual(record["loss"], record["detr"] + 5 * record["fb_enc"] + 5 * record["fb_dec"], places=9)

    def test_zero_weights_leave_gradients_alone(self):
        sample = self.samples[0]
        weighted_off = tiny_config(loss={"lambda_e": 0.0, "lambda_d": 0.0})
        baseline = tiny_config(feedback={"guidance": "off"})
        grads = []
        for config in (weighted_off, baseline):
            trainer = self.trainer("g", config)
            loss, parts = sample_loss(trainer.model, sample, config)
            loss.backward()
            grads.append({name: p.grad.copy() for name, p in trainer.model.params.items()})
        self.assertGreater(parts["detr"], 0.0)
        for name in grads[0]:
            assert_allclose(grads[0][name], grads[1][name], atol=1e-12, err_msg=name)

    def test_two_runs_are_bitwise_equal(self):
        first = [r["loss"] for r in self.trainer("a").fit(stop_after=3)]
        second = [r["loss"] for r in self.trainer("b").fit(stop_after=3)]
        self.assertEqual(first, second)

    def test_outputs(self):
        trainer = self.trainer("run")
        history = trainer.fit()
        self.assertEqual([r["kind"] for r in history], ["step", "step", "epoch"] * 2)
        lines = (self.root / "run" / METRICS_FILE).read_text().splitlines()
        self.assertEqual(len(lines), 6)
        self.assertEqual(json.loads(lines[0])["config_hash"], self.config.config_hash)
        self.assertTrue((self.root / "run" / checkpoint_name(1)).exists())
        self.assertFalse((self.root / "run" / checkpoint_name(2)).exists())
        self.assertEqual(trainer.final_path, self.root / "run" / FINAL_CHECKPOINT)
        stored = json.loads((self.root / "run" / "config.json").read_text())
        self.assertEqual(stored["config_hash"], self.config.config_hash)

    def test_resume_reproduces_next_step(self):
        full = self.trainer("full")
        history = full.fit()
        next_step = [r for r in history if r["kind"] == "step"][2]
        resumed = self.trainer("resumed").resume(self.root / "full" / checkpoint_name(1))
        self.assertEqual((resumed.start_epoch, resumed.step), (1, 2))
        record = resumed.fit(stop_after=1)[0]
        self.assertEqual(record["step"], 2)
        self.assertEqual(record["loss"], next_step["loss"])
        self.assertEqual(record["grad_norm"], next_step["grad_norm"])

    def test_resume_rejects_other_config(self):
        trainer = self.trainer("a")
        trainer.fit(stop_after=1)
        path = trainer.save("step.ckpt", 0)
        other = self.trainer("b", tiny_config(seed=4))
        with self.assertRaises(DataFormatError):
            other.resume(path)

    def test_load_model(self):
        trainer = self.trainer("a")
        trainer.fit()
        model, header, stored = load_model(trainer.final_path)
        self.assertEqual(header["config_hash"], self.config.config_hash)
        self.assertEqual(stored.config_hash, self.config.config_hash)
        for name, p in trainer.model.params.items():
            self.assertEqual(p.values.tobytes(), model.params[name].values.tobytes())
        with self.assertLogs("experiments.training", level="WARNING"):
            load_model(trainer.final_path, tiny_config(seed=9))

    def test_divergence_reports_step(self):
        trainer = self.trainer("a", tiny_config(feedback={"guidance": "off"}))
        broken = self.samples[0].copy_with(features=np.full((24, 3), np.nan), segments=[])
        with self.assertRaises(TrainingDivergedError) as ctx:
            trainer.train_step([broken], epoch=0)
        self.assertEqual(ctx.exception.step, 0)

    def test_empty_split(self):
        with self.assertRaises(DataFormatError):
            Trainer(self.config, [], run_dir=self.root / "a")


def _square_with_wrong_adjoint(a):
    # drops the factor 2 of d(x^2)/dx
    return DiffArray._wrap(a.values ** 2, (a,), lambda g: (g * a.values,))


class GradCheckTests(SimpleTestCase):
    def test_selected_checks_pass(self):
        rows = run_checks(["add", "matmul", "softmax_rows", "kl_rows", "guidance_decoder", "feedback_encoder"])
        self.assertTrue(all(row["passed"] for row in rows), rows)

    def test_end_to_end_passes(self):
        (row,) = run_checks(["end_to_end"])
        self.assertLess(row["max_rel_error"], 1e-4)

    def test_toy_problem_is_away_from_flat_layer_norm(self):
        model, _ = toy_problem()
        for name, p in model.params.items():
            if name.endswith("bias"):
                self.assertGreater(np.abs(p.values).min(), 0.0, name)

    def test_registry_covers_every_op(self):
        for name in ("matmul", "softmax_rows", "layer_norm", "elementwise_sqrt", "kl_rows", "end_to_end"):
            self.assertIn(name, CHECKS)

    def test_corrupted_adjoint_fails(self):
        x = np.random.default_rng(0).random(3) + 0.5
        self.assertGreater(grad_check(lambda a: ops.sum_all(_square_with_wrong_adjoint(a)), x), 0.1)


@override_settings(SELFDETR_NUM_THREADS=1)
class CommandTests(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.config_path = self.root / "tiny.json"
        self.config_path.write_text(json.dumps(TINY))
        self.data = self.root / "data"
        call_command("gen_data", output=str(self.data), config=str(self.config_path), stdout=StringIO())
        settings_override = override_settings(SELFDETR_OUTPUT_ROOT=str(self.root / "runs"))
        settings_override.enable()
        self.addCleanup(settings_override.disable)

    def train(self, **options):
        out = StringIO()
        call_command(
            "train", dataset=str(self.data), config=str(self.config_path),
            output_dir=str(self.root / "run"), stdout=out, **options,
        )
        return out.getvalue()

    def test_gen_data_is_byte_identical(self):
        again = self.root / "again"
        call_command("gen_data", output=str(again), config=str(self.config_path), stdout=StringIO())
        files = sorted(p.relative_to(self.data) for p in self.data.rglob("*") if p.is_file())
        self.assertEqual(files, sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file()))
        for rel in files:
            self.assertEqual((self.data / rel).read_bytes(), (again / rel).read_bytes(), str(rel))
        manifest = json.loads((self.data / "manifest.json").read_text())
        self.assertEqual((len(manifest["splits"]["train"]), len(manifest["splits"]["test"])), (4, 3))

    def test_gen_data_refuses_non_empty_directory(self):
        with self.assertRaises(CommandError) as ctx:
            call_command("gen_data", output=str(self.data), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)
        failed = ExperimentRun.objects.get(command="gen_data", status=ExperimentRun.Status.FAILED)
        self.assertIn("error", failed.metrics)

    def test_train_eval_score_diversity(self):
        output = self.train()
        checkpoint = self.root / "run" / FINAL_CHECKPOINT
        self.assertIn("Final checkpoint", output)
        self.assertTrue(checkpoint.exists())
        run = ExperimentRun.objects.get(command="train")
        self.assertEqual(run.status, ExperimentRun.Status.COMPLETED)
        self.assertEqual(run.metrics["kind"], "epoch")

        call_command("eval", checkpoint=str(checkpoint), dataset=str(self.data), stdout=StringIO())
        metrics = json.loads((self.root / "run" / "metrics.json").read_text())
        self.assertEqual(len(metrics["thresholds"]), 5)
        self.assertTrue(0.0 <= metrics["average"] <= 1.0)

        rescored = self.root / "rescored.json"
        call_command(
            "score", results=str(self.root / "run" / "results.json"), dataset=str(self.data),
            output=str(rescored), stdout=StringIO(),
        )
        self.assertEqual(json.loads(rescored.read_text()), metrics)

        call_command("diversity", checkpoint=str(checkpoint), dataset=str(self.data), samples=2, stdout=StringIO())
        report = json.loads((self.root / "run" / "diversity.json").read_text())
        model, header, _ = load_model(checkpoint)
        test, _ = load_split(self.data, "test")
        expected = diversity_report(model, test, 2, seed=header["seed"], config_hash=header["config_hash"])
        self.assertEqual(report, json.loads(json.dumps(expected.to_dict())))

        out = StringIO()
        call_command("runs", stdout=out)
        for command in ("gen_data", "train", "eval", "diversity"):
            self.assertIn(command, out.getvalue())

    def test_inference_covers_every_test_video(self):
        self.train()
        model, _, config = load_model(self.root / "run" / FINAL_CHECKPOINT)
        test, _ = load_split(self.data, "test")
        results = run_inference(model, test, config.eval)
        self.assertEqual(set(results), {s.id for s in test})
        self.assertTrue(0.0 <= mean_ap(results, ground_truth(test)).average <= 1.0)

    def test_stop_after_and_resume(self):
        output = self.train(stop_after=1)
        self.assertIn("Stopped early", output)
        self.assertFalse((self.root / "run" / FINAL_CHECKPOINT).exists())
        self.train()
        self.train(resume=str(self.root / "run" / checkpoint_name(1)))
        self.assertEqual(ExperimentRun.objects.filter(command="train").count(), 3)

    def test_train_flags(self):
        self.train(stop_after=1, feedback="off", lambda_e=1.5, no_decoder_sa=True)
        stored = json.loads((self.root / "run" / "config.json").read_text())["config"]
        self.assertEqual(stored["feedback"]["guidance"], "off")
        self.assertEqual(stored["loss"]["lambda_e"], 1.5)
        self.assertFalse(stored["model"]["decoder_self_attention"])

    def test_missing_dataset(self):
        with self.assertRaises(CommandError) as ctx:
            call_command("train", dataset=str(self.root / "nowhere"), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)

    def test_unreadable_checkpoint(self):
        bad = self.root / "list.ckpt"
        bad.write_bytes(b"[]\n")
        for checkpoint in (self.root / "absent.ckpt", bad):
            for command in ("eval", "diversity"):
                with self.subTest(command=command, checkpoint=checkpoint.name):
                    with self.assertRaises(CommandError) as ctx:
                        call_command(command, checkpoint=str(checkpoint), dataset=str(self.data), stdout=StringIO())
                    self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)

    def test_grad_check_command(self):
        out = StringIO()
        call_command("grad_check", "add", "sigmoid", stdout=out)
        self.assertIn("passed", out.getvalue())
        with self.assertRaises(CommandError) as ctx:
            call_command("grad_check", "no_such_check", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)

    def test_grad_check_negative_control(self):
        @register_check("corrupted_square")
        def corrupted(rng):
            return grad_check(lambda a: ops.sum_all(_square_with_wrong_adjoint(a)), rng.random(3) + 0.5)

        self.addCleanup(unregister_check, "corrupted_square")
        with self.assertRaises(CommandError) as ctx:
            call_command("grad_check", "corrupted_square", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)

    def test_divergence_exits_two(self):
        class Diverging(ExperimentCommand):
            ledger_name = "train"

            def run(self, **options):
                self.open_run("h", 0, "", {})
                raise TrainingDivergedError("non-finite loss component", step=3, components={"detr": float("inf")})

        with self.assertRaises(CommandError) as ctx:
            Diverging(stdout=StringIO()).handle()
        self.assertEqual(ctx.exception.returncode, EXIT_NUMERICAL)
        self.assertIn("step=3", str(ctx.exception))
        self.assertEqual(ExperimentRun.objects.get(command="train").status, ExperimentRun.Status.FAILED)

    def test_ablate(self):
        call_command(
            "ablate", dataset=str(self.data), config=str(self.config_path), seeds=[0],
            variants=["baseline", "both"], epochs=1, samples=2, output_dir=str(self.root / "ablate"),
            stdout=StringIO(),
        )
        summary = json.loads((self.root / "ablate" / "ablation.json").read_text())
        self.assertEqual([(r["variant"], r["seed"]) for r in summary["runs"]], [("baseline", 0), ("both", 0)])
        self.assertIn("0", summary["verdicts"])
        with self.assertRaises(CommandError):
            call_command("ablate", dataset=str(self.data), variants=["both"], stdout=StringIO())


class LedgerTests(TestCase):
    def test_start_and_finish(self):
        run = start_run("train", "abc", 2, "/tmp/run", {"epochs": 1})
        finish_run(run, ExperimentRun.Status.COMPLETED, {"loss": 0.5})
        run.refresh_from_db()
        self.assertEqual((run.status, run.metrics), ("completed", {"loss": 0.5}))
        self.assertIsNone(finish_run(None, ExperimentRun.Status.FAILED))

    def test_verdicts(self):
        rows = [
            {"seed": 0, "variant": "baseline", "avg_map": 0.4, "enc_final": 0.1, "dec_final": 0.2},
            {"seed": 0, "variant": "both", "avg_map": 0.5, "enc_final": 0.3, "dec_final": 0.1},
            {"seed": 1, "variant": "both", "avg_map": 0.5, "enc_final": 0.3, "dec_final": 0.1},
        ]
        self.assertEqual(verdicts(rows), {"0": {
            "map_ge_baseline": {"both": True},
            "enc_final_diversity_higher": True,
            "dec_final_diversity_higher": False,
        }})
