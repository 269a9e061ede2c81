# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import json
import os
from unittest.mock import patch

import yaml
from parameterized import parameterized
from qiime2.plugin.testing import TestPluginBase

from q2_mergeforge._errors import (
    DegenerateBaseline,
    EmptySet,
    InvariantViolation,
    MissingBaseline,
    UnreadableFile,
)
from q2_mergeforge.evalmetrics import (
    AGGREGATE,
    Counts,
    Judgment,
    JudgmentSet,
    Kind,
    MetricTable,
    ReplayJudge,
    aggregate_languages,
    build_report,
    harm_change,
    ingest_judgments,
    render_html,
    render_table,
    score_judgments,
    win_rate,
)

# Published six-language aggregates that agree with the per-language values
# to one decimal; the remaining cells were rounded inconsistently upstream.
CONSISTENT_CELLS = [
    ("sft", "safety", "linear"),
    ("sft", "safety", "slerp"),
    ("sft", "safety", "ties"),
    ("sft", "safety", "dare_ties"),
    ("sft", "general", "0pct_mix"),
    ("sft", "general", "15pct_mix"),
    ("sft", "general", "100pct_mix"),
    ("sft", "general", "slerp"),
    ("sft", "general", "ties"),
    ("dpo", "safety", "linear"),
    ("dpo", "safety", "slerp"),
    ("dpo", "safety", "ties"),
    ("dpo", "safety", "dare_ties"),
    ("dpo", "general", "0pct_mix"),
    ("dpo", "general", "15pct_mix"),
    ("dpo", "general", "ties"),
    ("dpo", "general", "dare_ties"),
]


_HEADER = {"prompt_id": "p", "language": "EN", "model_id": "m"}


def _prefs(model_id, winners):
    return [
        Judgment(f"p{i}", "EN", model_id, Kind.PREF, winner=w)
        for i, w in enumerate(winners)
    ]


class TestMetrics(TestPluginBase):
    package = "q2_mergeforge.tests"

    def test_harm_change_halved(self):
        self.assertEqual(harm_change(Counts(100, 1000), Counts(200, 1000)), -50.0)

    def test_harm_change_equal_rates(self):
        self.assertEqual(harm_change(Counts(7, 20), Counts(14, 40)), 0.0)

    def test_harm_change_scale_invariant(self):
        for k in (1, 3, 17):
            self.assertEqual(
                harm_change(Counts(3 * k, 10 * k), Counts(4 * k, 10 * k)), -25.0
            )

    def test_harm_change_degenerate_baseline(self):
        with self.assertRaises(DegenerateBaseline):
            harm_change(Counts(1, 10), Counts(0, 10))

    def test_harm_change_empty(self):
        with self.assertRaises(EmptySet):
            harm_change(Counts(0, 0), Counts(1, 10))

    def test_win_rate(self):
        prefs = _prefs("m", ["m"] * 78 + ["other"] * 22)
        self.assertEqual(win_rate(prefs), 78.0)

    def test_win_rate_all_ties(self):
        self.assertEqual(win_rate(_prefs("m", ["tie"] * 9)), 50.0)

    def test_win_rate_counts_ties_as_half(self):
        prefs = _prefs("m", ["m"] * 150 + ["other"] * 40 + ["tie"] * 10)
        self.assertEqual(win_rate(prefs), 77.5)

    def test_win_rate_swapped_sides_sum_to_100(self):
        winners = ["a"] * 11 + ["tie"] * 5 + ["b"] * 4
        self.assertEqual(
            win_rate(_prefs("a", winners), "a") + win_rate(_prefs("b", winners), "b"),
            100.0,
        )

    def test_win_rate_empty(self):
        with self.assertRaises(EmptySet):
            win_rate([])

    def test_aggregate_example(self):
        per_language = dict(
            zip(
                ["EN", "HI", "AR", "FR", "SP", "RU"],
                [-64.4, -65.1, -55.7, -56.4, -51.4, -56.1],
            )
        )
        self.assertAlmostEqual(aggregate_languages(per_language), -58.2, delta=0.05)

    def test_aggregate_single_language(self):
        self.assertEqual(aggregate_languages({"EN": -12.5}), -12.5)

    def test_aggregate_opposites_cancel(self):
        self.assertEqual(aggregate_languages({"EN": 33.3, "FR": -33.3}), 0.0)

    def test_aggregate_empty(self):
        with self.assertRaises(EmptySet):
            aggregate_languages({})


class TestPublishedAggregates(TestPluginBase):
    package = "q2_mergeforge.tests"

    def setUp(self):
        super().setUp()
        with open(self.get_data_path("appendix_tables.yaml")) as fh:
            self.tables = yaml.safe_load(fh)

    @parameterized.expand(CONSISTENT_CELLS)
    def test_aggregate_matches_published(self, training, metric, method):
        per_language = dict(
            zip(self.tables["languages"], self.tables[training][metric][method])
        )
        self.assertAlmostEqual(
            aggregate_languages(per_language),
            self.tables["aggregate"][training][method][metric],
            delta=0.06,
        )

    def test_with_aggregate_adds_all_column(self):
        langs = self.tables["languages"]
        rows = {
            method: {
                lang: {
                    "safety": self.tables["sft"]["safety"][method][i],
                    "general": self.tables["sft"]["general"][method][i],
                }
                for i, lang in enumerate(langs)
            }
            for method in self.tables["sft"]["safety"]
        }
        table = MetricTable(rows, "15pct_mix").with_aggregate()
        self.assertEqual(table.languages(), langs + [AGGREGATE])
        self.assertAlmostEqual(
            table.rows["ties"][AGGREGATE]["general"], 74.9, delta=0.06
        )


class TestIngest(TestPluginBase):
    package = "q2_mergeforge.tests"

    def _jsonl(self, lines):
        fp = os.path.join(self.temp_dir.name, "judgments.jsonl")
        with open(fp, "w") as fh:
            for line in lines:
                fh.write((line if isinstance(line, str) else json.dumps(line)) + "\n")
        return fp

    def _harm(self, prompt_id, model_id="m", language="EN", harmful=False):
        return {
            "prompt_id": prompt_id,
            "language": language,
            "model_id": model_id,
            "kind": "harm",
            "harmful": harmful,
        }

    def test_valid_lines(self):
        fp = self._jsonl(
            [
                self._harm("p1"),
                self._harm("p2", harmful=True),
                {
                    "prompt_id": "g1",
                    "language": "EN",
                    "model_id": "m",
                    "kind": "pref",
                    "winner": "tie",
                },
            ]
        )
        js = ingest_judgments(fp)
        self.assertEqual(len(js.records), 3)
        self.assertEqual(js.errors, [])
        self.assertEqual(js.records[2].winner, "tie")

    def test_fixture(self):
        js = ingest_judgments(self.get_data_path("judgments.jsonl"))
        self.assertEqual(len(js.records), 10)
        self.assertEqual(js.model_ids(), ["base", "slerp"])

    def test_missing_language_is_reported_with_line_number(self):
        js = ingest_judgments(self.get_data_path("judgments_invalid.jsonl"))
        self.assertEqual(len(js.records), 1)
        self.assertEqual(len(js.errors), 1)
        lineno, reason = js.errors[0]
        self.assertEqual(lineno, 2)
        self.assertIn("language", reason)

    @parameterized.expand(
        [
            ("not_json", "{oops"),
            ("not_object", "[1, 2]"),
            ("unknown_kind", json.dumps({**_HEADER, "kind": "vibes"})),
            ("harm_without_flag", json.dumps({**_HEADER, "kind": "harm"})),
            ("pref_without_winner", json.dumps({**_HEADER, "kind": "pref"})),
        ]
    )
    def test_invalid_lines_are_skipped(self, _, line):
        js = ingest_judgments(self._jsonl([self._harm("ok"), line]))
        self.assertEqual(len(js.records), 1)
        self.assertEqual([n for n, _ in js.errors], [2])

    def test_duplicate_keeps_last_and_warns(self):
        js = ingest_judgments(
            self._jsonl([self._harm("p1"), self._harm("p1", harmful=True)])
        )
        self.assertEqual(len(js.records), 1)
        self.assertTrue(js.records[0].harmful)
        self.assertEqual(len(js.warnings), 1)

    def test_same_prompt_in_two_languages_is_not_a_duplicate(self):
        js = ingest_judgments(
            self._jsonl([self._harm("p1"), self._harm("p1", language="FR")])
        )
        self.assertEqual(len(js.records), 2)
        self.assertEqual(js.warnings, [])

    def test_undeclared_language(self):
        js = ingest_judgments(
            self._jsonl([self._harm("p1"), self._harm("p2", language="DE")]),
            languages=["EN"],
        )
        self.assertEqual(len(js.records), 1)
        self.assertIn("undeclared language", js.errors[0][1])

    def test_unreadable_file(self):
        with self.assertRaises(UnreadableFile):
            ingest_judgments(os.path.join(self.temp_dir.name, "missing.jsonl"))

    def test_invariants_on_direct_construction(self):
        with self.assertRaises(InvariantViolation):
            JudgmentSet([Judgment("p", "EN", "m", Kind.HARM)])
        with self.assertRaises(InvariantViolation):
            JudgmentSet(
                [Judgment("p", "DE", "m", Kind.HARM, harmful=True)],
                languages=frozenset({"EN"}),
            )


class TestScoring(TestPluginBase):
    package = "q2_mergeforge.tests"

    def setUp(self):
        super().setUp()
        self.js = ingest_judgments(self.get_data_path("judgments.jsonl"))

    def test_score_judgments(self):
        table = score_judgments(self.js, "base")
        self.assertEqual(list(table.rows), ["slerp"])
        self.assertEqual(
            table.rows["slerp"]["EN"], {"safety": -50.0, "general": 75.0}
        )

    def test_score_with_aggregate(self):
        table = score_judgments(self.js, "base", "slerp").with_aggregate()
        self.assertEqual(table.rows["slerp"][AGGREGATE]["safety"], -50.0)
        self.assertEqual(table.baseline_row, "slerp")

    def test_degenerate_language_is_left_out(self):
        records = [
            Judgment("p1", "EN", "base", Kind.HARM, harmful=False),
            Judgment("p1", "EN", "m", Kind.HARM, harmful=True),
        ]
        table = score_judgments(JudgmentSet(records), "base")
        self.assertEqual(table.rows, {})

    def test_base_only_records_render_empty_table(self):
        records = [Judgment("p1", "EN", "base", Kind.HARM, harmful=True)]
        table = score_judgments(JudgmentSet(records), "base").with_aggregate()
        self.assertEqual(table.rows, {})

        report = render_table(table)
        self.assertEqual(report.frame.shape, (0, 0))
        self.assertEqual(list(report.frame.columns.names), ["language", "metric"])
        self.assertEqual(report.data["rows"], {})

    def test_replay_judge(self):
        judge = ReplayJudge(self.js)
        self.assertTrue(judge.judge_harm("p1", "EN", "slerp"))
        self.assertEqual(judge.judge_preference("g2", "EN", "slerp"), "tie")
        with self.assertRaises(EmptySet):
            judge.judge_harm("p9", "EN", "slerp")


class TestReport(TestPluginBase):
    package = "q2_mergeforge.tests"

    def setUp(self):
        super().setUp()
        with open(self.get_data_path("dpo_aggregate.yaml")) as fh:
            data = yaml.safe_load(fh)
        self.table = MetricTable.from_dict({**data, "baseline": "15pct_mix"})

    def test_annotations(self):
        report = build_report(self.table)
        cell = report.frame.loc["slerp", (AGGREGATE, "safety")]
        self.assertEqual(cell, "-57.8 (+3.1)")
        cell = report.frame.loc["ties", (AGGREGATE, "general")]
        self.assertEqual(cell, "63.6 (-7.4)")

    def test_baseline_row_has_no_delta(self):
        report = build_report(self.table)
        self.assertEqual(
            report.frame.loc["15pct_mix", (AGGREGATE, "general")], "71.0"
        )
        self.assertIsNone(
            report.data["rows"]["15pct_mix"][AGGREGATE]["general"]["delta"]
        )

    def test_row_equal_to_baseline(self):
        rows = dict(self.table.rows)
        rows["copy"] = rows["15pct_mix"]
        report = build_report(MetricTable(rows, "15pct_mix"))
        self.assertEqual(
            report.frame.loc["copy", (AGGREGATE, "safety")], "-54.7 (+0.0)"
        )

    def test_missing_baseline(self):
        with self.assertRaises(MissingBaseline):
            build_report(MetricTable(self.table.rows, "nope"))
        with self.assertRaises(MissingBaseline):
            build_report(MetricTable(self.table.rows))

    def test_render_table_without_baseline(self):
        report = render_table(self.table)
        self.assertEqual(report.frame.loc["slerp", (AGGREGATE, "safety")], "-57.8")
        self.assertIsNone(report.data["baseline"])

    def test_round_trip_through_dict(self):
        self.assertEqual(MetricTable.from_dict(self.table.to_dict()), self.table)

    @patch("q2_mergeforge.evalmetrics.q2templates.render")
    def test_render_html(self, p_render):
        out = os.path.join(self.temp_dir.name, "viz")
        render_html(build_report(self.table), out)

        self.assertTrue(os.path.isfile(os.path.join(out, "report.txt")))
        with open(os.path.join(out, "report.json")) as fh:
            data = json.load(fh)
        self.assertEqual(data["baseline"], "15pct_mix")
        delta = data["rows"]["ties"][AGGREGATE]["general"]["delta"]
        self.assertAlmostEqual(delta, -7.4)

        p_render.assert_called_once()
        templates, output_dir = p_render.call_args.args
        self.assertEqual(output_dir, out)
        self.assertEqual(templates[0].name, "index.html")
        context = p_render.call_args.kwargs["context"]
        self.assertIn("63.6 (-7.4)", context["table"])
