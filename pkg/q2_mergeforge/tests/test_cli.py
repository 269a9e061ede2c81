# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import os
from unittest.mock import patch

import numpy as np
import pandas as pd
import yaml
from click.testing import CliRunner
from qiime2.plugin.testing import TestPluginBase

from q2_mergeforge.cli import cli
from q2_mergeforge.tensorio import TensorArchive, read_archive, write_archive


class TestCli(TestPluginBase):
    package = "q2_mergeforge.tests"

    def setUp(self):
        super().setUp()
        self.runner = CliRunner()
        self.tmp = self.temp_dir.name
        rng = np.random.default_rng(5)
        self.archives = {}
        for name in ("m1", "m2", "base"):
            archive = TensorArchive(
                {
                    "embed.weight": rng.standard_normal((4, 3)).astype("<f4"),
                    "model.layers.0.w": rng.standard_normal(8).astype("<f4"),
                    "model.layers.1.w": rng.standard_normal(8).astype("<f4"),
                }
            )
            write_archive(archive, self._path(f"{name}.safetensors"))
            self.archives[name] = archive

    def _path(self, name):
        return os.path.join(self.tmp, name)

    def _yaml(self, name, data):
        fp = self._path(name)
        with open(fp, "w") as fh:
            yaml.safe_dump(data, fh)
        return fp

    def _invoke(self, args, **kwargs):
        return self.runner.invoke(cli, args, catch_exceptions=False, **kwargs)

    def _read_bytes(self, fp):
        with open(fp, "rb") as fh:
            return fh.read()

    def test_linear_one_hot_copies_model(self):
        fp = self._yaml(
            "linear.yaml",
            {
                "method": "linear",
                "models": ["m1.safetensors", "m2.safetensors"],
                "alphas": [1, 0],
                "output": "merged.safetensors",
            },
        )
        result = self._invoke(["--quiet", "merge", "--recipe", fp])

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("wrote 3 tensors to", result.output)
        merged = read_archive(self._path("merged.safetensors"))
        for name, array in self.archives["m1"].items():
            self.assertEqual(merged[name].tobytes(), array.tobytes())
        self.assertIn("merge_recipe", merged.metadata)

    def test_dare_ties_is_reproducible(self):
        fp = self._yaml(
            "dare.yaml",
            {
                "method": "dare_ties",
                "models": ["m1.safetensors", "m2.safetensors"],
                "base": "base.safetensors",
                "drop_prob": 0.5,
                "output": "unused.safetensors",
            },
        )
        # the output path is part of the echoed recipe
        path = self._path("dare.safetensors")
        outputs = []
        for seed in ("3", "3", "4"):
            result = self._invoke(
                ["merge", "--recipe", fp, "--out", path, "--seed", seed]
            )
            self.assertEqual(result.exit_code, 0, result.output)
            self.assertIn("default applied: density=0.5", result.output)
            outputs.append(self._read_bytes(path))

        self.assertEqual(outputs[0], outputs[1])
        self.assertNotEqual(outputs[0], outputs[2])

    def test_invalid_recipe_reports_one_line(self):
        fp = self._yaml(
            "ties.yaml",
            {
                "method": "ties",
                "models": ["m1.safetensors", "m2.safetensors"],
                "output": "out.safetensors",
            },
        )
        result = self._invoke(["merge", "--recipe", fp])

        self.assertEqual(result.exit_code, 1)
        self.assertIn('error: RecipeInvalid: RecipeInvalid("base")', result.output)
        self.assertFalse(os.path.exists(self._path("out.safetensors")))

    def test_incompatible_archives(self):
        write_archive(
            TensorArchive({"embed.weight": np.zeros(2, "<f4")}),
            self._path("odd.safetensors"),
        )
        fp = self._yaml(
            "odd.yaml",
            {
                "method": "linear",
                "models": ["m1.safetensors", "odd.safetensors"],
                "alphas": [1, 1],
                "output": "out.safetensors",
            },
        )
        result = self._invoke(["merge", "--recipe", fp])
        self.assertEqual(result.exit_code, 1)
        self.assertIn("error: IncompatibleArchives:", result.output)

    def test_grid_against_target(self):
        target = TensorArchive(
            {
                name: 0.3 * self.archives["m1"][name] + 0.7 * self.archives["m2"][name]
                for name in self.archives["m1"]
            }
        )
        write_archive(target, self._path("target.safetensors"))
        fp = self._yaml(
            "grid.yaml",
            {
                "method": "linear",
                "models": ["m1.safetensors", "m2.safetensors"],
                "target": "target.safetensors",
                "output": "sweep",
            },
        )
        result = self._invoke(["--threads", "2", "grid", "--grid", fp])

        self.assertEqual(result.exit_code, 0, result.output)
        df = pd.read_csv(
            os.path.join(self._path("sweep"), "sweep.tsv"),
            sep="\t",
            dtype={"candidate_id": str},
        )
        self.assertEqual(len(df), 15)
        self.assertEqual(df.loc[0, "candidate_id"], "0.3,0.7")

    def test_slerp_grid_with_scores(self):
        pd.DataFrame(
            {
                "candidate_id": ["0", "0.5"],
                "safety": [-40.0, -55.0],
                "general": [70, 72],
            }
        ).to_csv(self._path("scores.tsv"), sep="\t", index=False)
        fp = self._yaml(
            "grid.yaml",
            {
                "method": "slerp",
                "models": ["m1.safetensors", "m2.safetensors"],
                "scores": "scores.tsv",
                "output": "sweep",
            },
        )
        result = self._invoke(["grid", "--grid", fp, "--out", self._path("report")])

        self.assertEqual(result.exit_code, 0, result.output)
        df = pd.read_csv(
            os.path.join(self._path("report"), "sweep.tsv"),
            sep="\t",
            dtype={"candidate_id": str},
        )
        self.assertEqual(len(df), 5)
        self.assertEqual(df.loc[0, "candidate_id"], "0.5")
        self.assertEqual(list(df["status"]).count("UNSCORED"), 3)
        self.assertIn("UNSCORED", result.output)

    def test_inspect(self):
        result = self._invoke(
            ["--quiet", "inspect", self.get_data_path("golden.safetensors")]
        )

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(
            result.output.splitlines(),
            ["a\tF32\t2\t[0, 8)", "b\tF16\tscalar\t[8, 10)", "# k: v"],
        )

    def test_inspect_norms(self):
        result = self._invoke(
            ["--quiet", "inspect", "--norms", self.get_data_path("golden.safetensors")]
        )
        first = result.output.splitlines()[0].split("\t")
        self.assertAlmostEqual(float(first[-1]), np.sqrt(5), places=5)

    def test_delta(self):
        out = self._path("delta.safetensors")
        result = self._invoke(
            [
                "delta",
                "--model",
                self._path("m1.safetensors"),
                "--base",
                self._path("base.safetensors"),
                "--out",
                out,
            ]
        )

        self.assertEqual(result.exit_code, 0, result.output)
        tv = read_archive(out)
        name = "model.layers.0.w"
        np.testing.assert_array_equal(
            tv[name], self.archives["m1"][name] - self.archives["base"][name]
        )

    def test_score(self):
        out = self._path("scores")
        result = self._invoke(
            [
                "score",
                "--judgments",
                self.get_data_path("judgments.jsonl"),
                "--base",
                "base",
                "--out",
                out,
            ]
        )

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("-50.0", result.output)
        self.assertIn("75.0", result.output)
        self.assertTrue(os.path.isfile(os.path.join(out, "report.json")))

    def test_score_reports_invalid_lines(self):
        result = self._invoke(
            [
                "score",
                "--judgments",
                self.get_data_path("judgments_invalid.jsonl"),
                "--base",
                "base",
            ]
        )
        self.assertEqual(result.exit_code, 0)
        self.assertIn("skipped 1 invalid lines", result.output)

    def test_score_base_only_judgments(self):
        fp = self._path("base-only.jsonl")
        with open(fp, "w") as fh:
            fh.write(
                '{"prompt_id": "p1", "language": "EN", "model_id": "base", '
                '"kind": "harm", "harmful": true}\n'
            )
        result = self._invoke(
            ["score", "--judgments", fp, "--base", "base", "--out", self._path("s")]
        )

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertNotIn("error:", result.output)
        self.assertTrue(os.path.isfile(os.path.join(self._path("s"), "report.json")))

    def test_report(self):
        result = self._invoke(
            [
                "report",
                "--table",
                self.get_data_path("dpo_aggregate.yaml"),
                "--baseline",
                "15pct_mix",
            ]
        )

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("-57.8 (+3.1)", result.output)
        self.assertIn("63.6 (-7.4)", result.output)

    def test_report_missing_baseline(self):
        result = self._invoke(
            [
                "report",
                "--table",
                self.get_data_path("dpo_aggregate.yaml"),
                "--baseline",
                "sft",
            ]
        )
        self.assertEqual(result.exit_code, 1)
        self.assertIn("error: MissingBaseline:", result.output)

    @patch("q2_mergeforge.cli.execute_recipe")
    def test_threads_from_environment(self, p_execute):
        p_execute.return_value = self.archives["m1"]
        fp = self._yaml(
            "linear.yaml",
            {
                "method": "linear",
                "models": ["m1.safetensors", "m2.safetensors"],
                "alphas": [1, 1],
                "output": "merged.safetensors",
            },
        )
        result = self._invoke(
            ["merge", "--recipe", fp], env={"MERGEFORGE_THREADS": "3"}
        )

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(p_execute.call_args.kwargs["threads"], 3)

    def test_threads_must_be_positive(self):
        result = self.runner.invoke(
            cli, ["inspect", self.get_data_path("golden.safetensors")],
            env={"MERGEFORGE_THREADS": "0"},
        )
        self.assertEqual(result.exit_code, 2)
