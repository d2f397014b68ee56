import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.config import load_config
from src.core.errors import DataError, UsageError
from src.core.runner import ExperimentRunner
from src.metrics.benchmark import BenchResult
from src.processors.dataset_builder import SplitManifest


class TestExperimentRunner(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)
        self.config = load_config(None, {"output_dir": str(self.out), "seed": 3})
        self.runner = ExperimentRunner(self.config, show_progress=False)

    def tearDown(self):
        self.tmp.cleanup()

    @patch('src.core.runner.save_dataset')
    @patch('src.core.runner.DatasetBuilder')
    @patch('src.core.runner.make_phantom')
    def test_prepare_phantom_orchestration(self, mock_make_phantom, mock_builder, mock_save_dataset):
        """Phantom volumes flow through the builder into the default dataset directory."""
        phantoms = MagicMock(volumes=['v'], annotations=['a'], masks=['m'])
        mock_make_phantom.return_value = phantoms
        manifest = SplitManifest("classification", 3, [6.0, 1.2, 1.0])
        mock_builder.return_value.build.return_value = manifest

        result = self.runner.prepare(phantom=4)

        mock_make_phantom.assert_called_once_with(3, 4, 64, 0.5)
        mock_builder.assert_called_once_with(self.config.pipeline, 224, 3)
        mock_builder.return_value.build.assert_called_once_with(['v'], ['a'], ['m'])
        mock_save_dataset.assert_called_once_with(self.out / "dataset", manifest)
        self.assertIs(result, manifest)

    @patch('src.core.runner.save_dataset')
    @patch('src.core.runner.DatasetBuilder')
    @patch('src.core.runner.VolumeExtractor')
    def test_prepare_input_directory(self, mock_extractor, mock_builder, mock_save_dataset):
        """Classification input directories pass no masks to the builder."""
        mock_extractor.return_value.load_directory.return_value = (['v'], ['a'])
        self.runner.prepare(input_dir="volumes", dataset_dir=self.out / "ds")
        mock_extractor.return_value.load_directory.assert_called_once_with("volumes")
        mock_extractor.return_value.volume_mask.assert_not_called()
        mock_builder.return_value.build.assert_called_once_with(['v'], ['a'], None)
        self.assertEqual(mock_save_dataset.call_args[0][0], self.out / "ds")

    def test_prepare_needs_exactly_one_source(self):
        with self.assertRaises(UsageError):
            self.runner.prepare()
        with self.assertRaises(UsageError):
            self.runner.prepare(phantom=2, input_dir="volumes")
        with self.assertRaises(UsageError):
            self.runner.prepare(phantom=0)

    @patch('src.core.runner.load_dataset')
    def test_train_rejects_task_mismatch(self, mock_load_dataset):
        mock_load_dataset.return_value = SplitManifest("segmentation", 0, [8, 1, 1])
        with self.assertRaises(UsageError):
            self.runner.train()

    def test_resolve_checkpoint_picks_latest_run(self):
        older = self.out / "train" / "finetune" / "checkpoints" / "best"
        newer = self.out / "train" / "regular" / "checkpoints" / "best"
        for i, path in enumerate((older, newer)):
            path.mkdir(parents=True)
            os.utime(path, (1_000_000 + i, 1_000_000 + i))
        self.assertEqual(self.runner.resolve_checkpoint("best"), newer)
        self.assertEqual(self.runner.resolve_checkpoint("some/dir"), Path("some/dir"))
        with self.assertRaises(DataError):
            self.runner.resolve_checkpoint("ema")

    def test_count_single_and_all(self):
        (report,) = self.runner.count("swin-t")
        self.assertEqual(report.total_params, 28_288_354)
        reports = self.runner.count(all_variants=True)
        self.assertEqual([r.variant for r in reports], ["swin-t", "swin-s", "swin-b", "swin-b-384"])

    @patch('src.core.runner.plot_benchmark')
    @patch('src.core.runner.run_benchmark')
    def test_bench_writes_outputs(self, mock_run_benchmark, mock_plot_benchmark):
        table = pd.DataFrame({"tokens": [1, 2], "global_seconds": [1.0, 4.0], "window_seconds": [1.0, 2.0]})
        mock_run_benchmark.return_value = BenchResult(table, {"global": 2.0, "window": 1.0})

        self.runner.bench([14, 28, 56, 112], 96, 7)

        mock_run_benchmark.assert_called_once_with([14, 28, 56, 112], 96, 7, seed=3)
        mock_plot_benchmark.assert_called_once()
        self.assertTrue((self.out / "bench.csv").is_file())
        summary = json.loads((self.out / "bench_summary.json").read_text())
        self.assertTrue(summary["window_ok"] and summary["global_ok"])

    def test_curves_needs_runs(self):
        with self.assertRaises(UsageError):
            self.runner.curves({})


if __name__ == '__main__':
    unittest.main()
