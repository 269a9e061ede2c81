# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import numpy as np
from parameterized import parameterized
from qiime2.plugin.testing import TestPluginBase

from q2_mergeforge._errors import BadCoefficient, UnknownTensor
from q2_mergeforge.schedule import (
    BlendSchedule,
    LayerMap,
    eval_schedule,
    layer_index_of,
    per_tensor_t,
    schedule_trace,
)

TOY_NAMES = ["embed_tokens.weight"] + [
    f"model.layers.{i}.mlp.weight" for i in range(5)
]


class TestSchedule(TestPluginBase):
    package = "q2_mergeforge.tests"

    def setUp(self):
        super().setUp()
        self.ramp = BlendSchedule([0, 0.5, 1])
        self.layers = LayerMap.from_names(TOY_NAMES)

    @parameterized.expand([(0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (1.0, 1.0)])
    def test_eval_ramp(self, position, expected):
        self.assertEqual(eval_schedule(self.ramp, position), expected)

    def test_constant_schedule(self):
        s = BlendSchedule([0.3])
        for position in (0.0, 0.4, 1.0):
            self.assertEqual(eval_schedule(s, position), 0.3)

    @parameterized.expand(
        [
            ("model.layers.7.attn.q", 7),
            ("embed_tokens.weight", None),
            ("blk.12.ffn.3.w", 12),
            ("layer7.weight", None),
        ]
    )
    def test_layer_index_of(self, name, expected):
        self.assertEqual(layer_index_of(name), expected)

    def test_layer_count(self):
        self.assertEqual(self.layers.layer_count, 5)
        self.assertEqual(LayerMap.from_names(["a.weight"]).layer_count, 0)

    def test_five_layer_ramp_is_exact(self):
        obs = [
            per_tensor_t(self.ramp, self.layers, f"model.layers.{i}.mlp.weight")
            for i in range(5)
        ]
        self.assertEqual(obs, [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_first_layer_uses_first_anchor(self):
        s = BlendSchedule([0.8, 0.1])
        self.assertEqual(
            per_tensor_t(s, self.layers, "model.layers.0.mlp.weight"), 0.8
        )

    def test_single_layer_model(self):
        lm = LayerMap.from_names(["h.0.w"])
        self.assertEqual(per_tensor_t(BlendSchedule([0.2, 0.9]), lm, "h.0.w"), 0.2)

    def test_unlayered_tensor_uses_default(self):
        s = BlendSchedule([0, 0.5, 1], default_t=0.5)
        self.assertEqual(per_tensor_t(s, self.layers, "embed_tokens.weight"), 0.5)

    def test_default_is_schedule_midpoint(self):
        s = BlendSchedule([0.2, 0.4])
        self.assertAlmostEqual(
            per_tensor_t(s, self.layers, "embed_tokens.weight"), 0.3
        )

    def test_unknown_tensor(self):
        with self.assertRaises(UnknownTensor):
            per_tensor_t(self.ramp, self.layers, "lm_head.weight")

    @parameterized.expand([("empty", []), ("above", [0.5, 1.2]), ("below", [-0.1])])
    def test_bad_anchors(self, _, anchors):
        with self.assertRaises(BadCoefficient):
            BlendSchedule(anchors)

    def test_bad_position(self):
        with self.assertRaises(BadCoefficient):
            eval_schedule(self.ramp, 1.5)

    def test_monotone_anchors_give_monotone_layers(self):
        s = BlendSchedule([0.1, 0.2, 0.6, 0.65])
        lm = LayerMap.from_names([f"layers.{i}.w" for i in range(12)])
        values = [per_tensor_t(s, lm, f"layers.{i}.w") for i in range(12)]
        self.assertEqual(values, sorted(values))

    def test_reversed_anchors_mirror(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            anchors = rng.uniform(0, 1, rng.integers(1, 7)).tolist()
            s, r = BlendSchedule(anchors), BlendSchedule(anchors[::-1])
            for p in rng.uniform(0, 1, 10):
                self.assertAlmostEqual(
                    eval_schedule(r, p), eval_schedule(s, 1 - p), delta=1e-12
                )

    def test_lipschitz_continuity(self):
        s = BlendSchedule([0.0, 0.9, 0.2, 0.5])
        slope = max(abs(b - a) for a, b in zip(s.anchors, s.anchors[1:])) * 3
        positions = np.linspace(0, 1, 201)
        values = [eval_schedule(s, p) for p in positions]
        for (p0, v0), (p1, v1) in zip(
            zip(positions, values), zip(positions[1:], values[1:])
        ):
            self.assertLessEqual(abs(v1 - v0), slope * (p1 - p0) + 1e-12)

    def test_trace(self):
        trace = schedule_trace(self.ramp, self.layers)
        self.assertEqual(
            trace,
            {"0": 0.0, "1": 0.25, "2": 0.5, "3": 0.75, "4": 1.0, "default": 0.5},
        )
