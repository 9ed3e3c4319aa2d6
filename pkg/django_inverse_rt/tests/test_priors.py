import json
import math
import tempfile

import numpy as np
from django.test import SimpleTestCase

from django_inverse_rt.exceptions import MaterialError, VlmError, VlmResponseError
from django_inverse_rt.geometry import build_room_scene
from django_inverse_rt.materials import (
    ItuEntry,
    MaterialTable,
    load_material_table,
    perturb_ground_truth,
)
from django_inverse_rt.priors import (
    RANDOM_RANGE,
    MaterialAssignment,
    PriorInit,
    itu_init,
    make_prior,
    match_assignments,
    parse_assignments,
    random_init,
    truth_init,
    uniform_init,
    vlm_init,
)
from django_inverse_rt.vlm import FixtureStore, ReplayVlmClient, StubVlmClient, render_prompt

from .scenes import PROMPT1_EXAMPLE

F_GHZ = 3.5


class SimpleInitTest(SimpleTestCase):
    def setUp(self):
        self.table = load_material_table()
        self.scene = build_room_scene(9)

    def test_uniform_two_materials(self):
        table = MaterialTable(
            entries={"A": ItuEntry("A", 0.02, 0.0, 2.0), "B": ItuEntry("B", 0.04, 0.0, 2.0)},
            uniform_exclude=(),
        )
        prior = uniform_init(table, 3, F_GHZ)
        for value in prior.sigma_init:
            self.assertAlmostEqual(value, 0.03, places=15)
        self.assertEqual(prior.sources, ("uniform",) * 3)

    def test_uniform_excludes_vacuum_and_metal(self):
        """Metal would otherwise dominate the mean"""
        prior = uniform_init(self.table, 9, F_GHZ)
        self.assertEqual(len(set(prior.sigma_init)), 1)
        self.assertLess(prior.sigma_init[0], 1.0)

    def test_random_range_and_mean(self):
        prior = random_init(100_000, seed=3)
        values = prior.sigma_init.values
        self.assertTrue(np.all(values >= RANDOM_RANGE[0]) and np.all(values <= RANDOM_RANGE[1]))
        self.assertAlmostEqual(float(values.mean()), 0.035, delta=0.001)
        self.assertEqual(random_init(9, seed=3), random_init(9, seed=3))

    def test_random_needs_slots(self):
        with self.assertRaises(MaterialError):
            random_init(0, seed=0)

    def test_itu_brick(self):
        prior = itu_init(self.table, self.scene.material_names, F_GHZ)
        self.assertEqual(prior.sigma_init[0], 0.0238 * F_GHZ**0.16)
        self.assertEqual(prior.sources[0], "itu:Brick")
        self.assertEqual(prior.sources[5], "itu:Wood")

    def test_truth(self):
        truth = perturb_ground_truth(self.table, self.scene.material_names, F_GHZ, seed=2)
        prior = truth_init(truth)
        self.assertEqual(prior.sigma_init, truth.sigma_hat)
        with self.assertRaises(MaterialError):
            make_prior("truth", self.scene, self.table, F_GHZ)

    def test_make_prior_dispatch(self):
        self.assertEqual(make_prior("itu", self.scene, self.table, F_GHZ), itu_init(self.table, self.scene.material_names, F_GHZ))
        self.assertEqual(make_prior("random", self.scene, self.table, F_GHZ, seed=4), random_init(9, 4))
        with self.assertRaises(VlmError):
            make_prior("vlm", self.scene, self.table, F_GHZ)
        with self.assertRaises(MaterialError):
            make_prior("median", self.scene, self.table, F_GHZ)

    def test_json_round_trip(self):
        prior = itu_init(self.table, self.scene.material_names, F_GHZ)
        self.assertEqual(PriorInit.from_json(prior.to_json()).sigma_init, prior.sigma_init)


class AssignmentTest(SimpleTestCase):
    def test_parse_rejects_implausible(self):
        raw = json.dumps(
            [
                {"material_name": "Floor_Brick", "c": 0.0238, "d": 0.16},
                {"material_name": "Wall1_Brick", "c": -0.1, "d": 0.16},
                {"material_name": "Wall2_Brick", "c": 0.1, "d": 7.0},
                {"material_name": "Wall3_Brick"},
            ]
        )
        assignments = parse_assignments(raw)
        self.assertEqual([a.material_name for a in assignments], ["Floor_Brick"])

    def test_parse_fenced_answer(self):
        raw = "Here you go:\n```json\n" + PROMPT1_EXAMPLE.read_text() + "\n```"
        self.assertEqual(len(parse_assignments(raw)), 9)

    def test_parse_not_a_list(self):
        with self.assertRaises(VlmResponseError):
            parse_assignments('{"material_name": "Brick"}')

    def test_matching_tiers(self):
        """Exact names win, then substrings, then fuzzy matches"""
        exact = MaterialAssignment("wall1 brick", 1.0, 0.0)
        substring = MaterialAssignment("Wood", 2.0, 0.0)
        fuzzy = MaterialAssignment("Box2_Concrte", 3.0, 0.0)
        matched = match_assignments(
            ["Wall1_Brick", "Box1_Wood", "Box2_Concrete", "Box3_Marble"], [exact, substring, fuzzy]
        )
        self.assertEqual(matched, [exact, substring, fuzzy, None])


class VlmInitTest(SimpleTestCase):
    def setUp(self):
        self.table = load_material_table()

    def test_oracle_matches_itu(self):
        """A perfect material oracle reproduces the ITU init bit for bit"""
        for k in range(5, 16):
            names = build_room_scene(k, seed=k).material_names
            prior = vlm_init(None, self.table, StubVlmClient(), names, F_GHZ)
            expected = itu_init(self.table, names, F_GHZ)
            self.assertEqual(prior.sigma_init.values.tobytes(), expected.sigma_init.values.tobytes())
            self.assertTrue(all(s.startswith("vlm:") for s in prior.sources))

    def test_noisy_swaps(self):
        """p = 0.25 on nine slots changes exactly three of them"""
        names = build_room_scene(9).material_names
        client = StubVlmClient.noisy(0.25, seed=1)
        prior = vlm_init(None, self.table, client, names, F_GHZ)
        expected = itu_init(self.table, names, F_GHZ)
        changed = [i for i in range(9) if prior.sigma_init[i] != expected.sigma_init[i]]
        self.assertEqual(len(client.swapped), math.ceil(0.25 * 9))
        self.assertEqual(changed, client.swapped)

    def test_unmatched_slots_fall_back(self):
        raw = json.dumps([{"material_name": "Floor_Brick", "c": 0.0238, "d": 0.16, "source": "ITU-R: Brick"}])
        names = ["Floor_Brick", "Box9_Unobtainium"]
        prior = vlm_init(None, self.table, StubVlmClient(scripted={"init": [raw]}), names, F_GHZ)
        self.assertEqual(prior.sources, ("vlm:Brick", "uniform"))
        self.assertEqual(prior.sigma_init[1], uniform_init(self.table, 1, F_GHZ).sigma_init[0])

    def test_nothing_matched(self):
        raw = json.dumps([{"material_name": "Ceiling", "c": 0.01, "d": 1.0}])
        with self.assertRaises(VlmResponseError):
            vlm_init(None, self.table, StubVlmClient(scripted={"init": [raw]}), ["Floor_Brick"], F_GHZ)

    def test_replayed_example_answer(self):
        """The worked example answer, replayed from a fixture, gives the ITU brick value"""
        names = build_room_scene(9).material_names
        spy_calls = []
        with tempfile.TemporaryDirectory() as tmp:
            parts = render_prompt("init", {"table": self.table, "image_path": None, "object_names": None})
            FixtureStore(tmp).write("init", parts, PROMPT1_EXAMPLE.read_text())
            client = ReplayVlmClient(tmp, transport=lambda *a, **kw: spy_calls.append(a))
            prior = vlm_init(None, self.table, client, names, F_GHZ)
        self.assertEqual(prior.sigma_init[0], 0.0238 * F_GHZ**0.16)
        self.assertEqual(prior.sources[5], "vlm:Wood")
        self.assertEqual(spy_calls, [])
        self.assertEqual(prior.sigma_init, itu_init(self.table, names, F_GHZ).sigma_init)
