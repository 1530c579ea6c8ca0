"""Simulated controller, experiment loop, and metrics output."""

import csv
import math

import numpy as np
import pytest

from cpzrepair import harness as H
from cpzrepair.predicates import parse_formula, print_formula
from cpzrepair.repair import ActionModel, Observation
from cpzrepair.states import State, desk_space

SPACE = desk_space(("obj", "cup"))
THETA = {"obj": "obj"}


def desk_state(gripper=(0.0, 0.0, 0.0, 0.0), obj=(0.0, 0.0, 0.0, 0.0), empty=True):
    q_o = {"obj": tuple(obj), "cup": (0.5, 0.5, 0.5, 0.0)}
    return State(tuple(gripper), q_o, {"manip-empty": empty})


def correct_model(text="(dist obj manip 0.1)"):
    return ActionModel("pick", ("obj",), parse_formula(text),
                       parse_formula(H.EFFECT_TEXT))


class TestExecuteController:
    def test_success_applies_effect(self):
        ctrl = H.make_pick_controller("(dist obj manip 0.1)")
        q = desk_state(gripper=(0.05, 0.0, 0.0, 1.2))
        q2 = H.execute_controller(ctrl, q, THETA, SPACE)
        assert q2.q_s["manip-empty"] is False
        assert q2.q_o["obj"] == q.q_r
        assert q2.q_o["cup"] == q.q_o["cup"]

    def test_constraint_violation_is_a_no_op(self):
        ctrl = H.make_pick_controller("(dist obj manip 0.1)")
        q = desk_state(gripper=(0.3, 0.0, 0.0, 0.0))
        assert H.execute_controller(ctrl, q, THETA, SPACE) == q

    def test_roll_conjunct_gates_the_grab(self):
        ctrl = H.make_pick_controller(
            "(and (dist obj manip 0.1) (roll obj manip 0.1))")
        near_misaligned = desk_state(gripper=(0.05, 0.0, 0.0, 2.0))
        near_aligned = desk_state(gripper=(0.05, 0.0, 0.0, 0.05))
        assert H.execute_controller(ctrl, near_misaligned, THETA, SPACE) == near_misaligned
        assert H.execute_controller(ctrl, near_aligned, THETA, SPACE) != near_aligned

    def test_unknown_object_rejected(self):
        ctrl = H.make_pick_controller("(dist obj manip 0.1)")
        with pytest.raises(ValueError):
            H.execute_controller(ctrl, desk_state(), {"obj": "ghost"}, SPACE)

    def test_deterministic(self):
        ctrl = H.make_pick_controller("(dist obj manip 0.1)")
        q = desk_state(gripper=(0.02, 0.03, 0.0, 0.4))
        assert (H.execute_controller(ctrl, q, THETA, SPACE)
                == H.execute_controller(ctrl, q, THETA, SPACE))

    def test_replay_check_flags_tampered_log(self):
        ctrl = H.make_pick_controller("(dist obj manip 0.1)")
        q = desk_state(gripper=(0.05, 0.0, 0.0, 0.0))
        good = Observation("pick", q, THETA, H.execute_controller(ctrl, q, THETA, SPACE))
        bad = Observation("pick", q, THETA, q)  # claims a no-op that was a grab
        assert H.replay_check(ctrl, [good], SPACE)
        assert not H.replay_check(ctrl, [good, bad], SPACE)


class TestConfig:
    def test_defaults_per_experiment(self):
        m = H.ExperimentConfig.defaults("missing")
        assert (m.trials, m.unexpected_quota, m.expected_streak) == (20, 10, None)
        assert m.active
        p = H.ExperimentConfig.defaults("param")
        assert (p.trials, p.unexpected_quota) == (10, 5)
        assert not p.active
        u = H.ExperimentConfig.defaults("multiple")
        assert (u.unexpected_quota, u.expected_streak) == (100, 1000)

    def test_unknown_experiment(self):
        with pytest.raises(ValueError):
            H.ExperimentConfig(experiment="nope")

    def test_validation(self):
        with pytest.raises(ValueError):
            H.ExperimentConfig(trials=0)
        with pytest.raises(ValueError):
            H.ExperimentConfig(p_naive=1.5)
        with pytest.raises(ValueError):
            H.ExperimentConfig(budget_s=-1.0)

    def test_budget_modes(self):
        assert H.ExperimentConfig(budget_s=5.0).budget().seconds == 5.0
        b = H.ExperimentConfig(budget_edits=12).budget()
        assert b.edits == 12 and b.seconds is None
        assert H.ExperimentConfig(budget_edits=0).budget().edits == 0

    def test_text_round_trip(self):
        cfg = H.ExperimentConfig.defaults("multiple", seed=42, budget_edits=16,
                                          out="/tmp/somewhere")
        assert H.parse_config_text(H.config_text(cfg)) == cfg

    def test_text_round_trip_none_streak(self):
        cfg = H.ExperimentConfig.defaults("param", seed=3)
        assert H.parse_config_text(H.config_text(cfg)) == cfg

    def test_parse_rejects_unknown_key(self):
        with pytest.raises(ValueError):
            H.parse_config_text("experiment=param\nwibble=3\n")

    def test_parse_rejects_bad_line(self):
        with pytest.raises(ValueError):
            H.parse_config_text("experiment param\n")

    def test_parse_skips_comments_and_blanks(self):
        cfg = H.parse_config_text("# a comment\n\nexperiment=missing\n")
        assert cfg.experiment == "missing"


class TestPinObjects:
    def test_pins_collapse_pose_dims(self):
        rng = np.random.default_rng(0)
        pins = H._pin_objects(SPACE, rng, reach=1.0)
        assert len(pins) == 8  # 2 objects x (x, y, z, roll)
        for did, info in pins.items():
            assert info.lower < info.upper
            assert info.upper - info.lower < 1e-6
        for name in ("obj", "cup"):
            for f in ("x", "y", "z"):
                mid = 0.5 * (pins[f"{name}.{f}"].lower + pins[f"{name}.{f}"].upper)
                assert abs(mid) <= 0.9


class TestRunRepairLoop:
    def loop(self, cfg, model=None, seed=0):
        space = desk_space(cfg.objects, reach=cfg.reach)
        ctrl = H.make_pick_controller(H.EXPERIMENTS[cfg.experiment]["truth"])
        rng = np.random.default_rng(seed)
        pins = H._pin_objects(space, rng, cfg.reach)
        model = model if model is not None else H.initial_model(cfg.experiment)
        return H.run_repair_loop(model, ctrl, space, cfg, rng, trial=0,
                                 pin_bounds=pins)

    def test_quota_stop_with_frozen_model(self):
        # zero edit budget keeps the model wrong, so every repair is a no-op
        # and the loop must stop exactly at the unexpected quota
        cfg = H.ExperimentConfig.defaults("param", trials=1, budget_edits=0, seed=5)
        model, records, stats, obs = self.loop(cfg, seed=5)
        assert stats.unexpected == cfg.unexpected_quota == 5
        assert stats.invocations == 5
        assert print_formula(model.constraint) == H.EXPERIMENTS["param"]["initial"]
        # one closing record per invocation, no edit events at budget zero
        assert [r.invocation for r in records] == [1, 2, 3, 4, 5]
        assert all(r.elapsed_s == 0.0 for r in records)

    def test_streak_stop_with_correct_model(self):
        cfg = H.ExperimentConfig.defaults("param", trials=1, expected_streak=4,
                                          unexpected_quota=99, seed=1)
        model, records, stats, obs = self.loop(cfg, model=correct_model(), seed=1)
        assert stats.unexpected == 0
        assert stats.observations == 4
        assert records == []

    def test_observation_cap_is_the_backstop(self):
        cfg = H.ExperimentConfig.defaults("param", trials=1, unexpected_quota=99,
                                          max_observations=6, seed=1)
        model, records, stats, obs = self.loop(cfg, model=correct_model(), seed=1)
        assert stats.observations == 6
        assert stats.unexpected == 0

    def test_active_loop_repairs_and_replays(self):
        cfg = H.ExperimentConfig.defaults("missing", trials=1, unexpected_quota=3,
                                          max_observations=200, seed=3)
        space = desk_space(cfg.objects, reach=cfg.reach)
        ctrl = H.make_pick_controller(H.EXPERIMENTS["missing"]["truth"])
        model, records, stats, obs = self.loop(cfg, seed=3)
        assert stats.unexpected == 3
        assert H.replay_check(ctrl, obs, space)
        assert records[-1].formula == print_formula(model.constraint)

    def test_best_error_non_increasing_within_invocation(self):
        cfg = H.ExperimentConfig.defaults("missing", trials=1, unexpected_quota=4,
                                          max_observations=200, seed=9,
                                          budget_edits=30)
        _, records, _, _ = self.loop(cfg, seed=9)
        by_inv = {}
        for r in records:
            by_inv.setdefault(r.invocation, []).append(r)
        for recs in by_inv.values():
            assert [r.edit_index for r in recs] == sorted(r.edit_index for r in recs)
            bests = [r.best_error for r in recs]
            assert all(a >= b - 1e-12 for a, b in zip(bests, bests[1:]))

    def test_param_error_tracks_dist_atom(self):
        cfg = H.ExperimentConfig.defaults("param", trials=1, unexpected_quota=2,
                                          seed=2)
        _, records, _, _ = self.loop(cfg, seed=2)
        for r in records:
            assert r.param_error == pytest.approx(
                abs(H._dist_value(parse_formula(r.formula)) - 0.1))


class TestMetricsFiles:
    def test_csv_format(self, tmp_path):
        path = tmp_path / "m.csv"
        records = [
            H.MetricsRecord(0, 1, 2, 0.123456789123, 0.1, 1.5, "(empty manip)", None),
            H.MetricsRecord(1, 2, 3, 0.0, 0.0, 0.0, "(dist obj manip 0.1)", 0.25),
        ]
        H.write_metrics_csv(path, records)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["trial", "invocation", "edit_index", "error",
                           "best_error", "elapsed_s", "formula", "param_error"]
        assert rows[1] == ["0", "1", "2", "0.123456789", "0.1", "1.5",
                           "(empty manip)", ""]
        assert rows[2][7] == "0.25"

    def test_box_row_shape(self, tmp_path):
        path = tmp_path / "box.txt"
        H.write_box_file(path, {0: [float(v) for v in range(1, 10)]})
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# index n mean min")
        cols = lines[1].split()
        assert len(cols) == 11
        assert cols[0] == "0" and cols[1] == "9"
        assert float(cols[6]) == 5.0  # median of 1..9
        assert cols[10] == "-"

    def test_box_row_outliers(self, tmp_path):
        path = tmp_path / "box.txt"
        H.write_box_file(path, {3: [1.0] * 8 + [100.0]})
        cols = path.read_text().splitlines()[1].split()
        assert cols[10] == "100"

    def test_closing_records_keep_last_per_invocation(self):
        rows = [H.MetricsRecord(0, 1, i, float(i), 0.0, 0.0, "f", None)
                for i in (1, 2, 3)]
        rows += [H.MetricsRecord(0, 2, 1, 9.0, 9.0, 0.0, "g", None)]
        closing = H._closing_records(rows)
        assert [(r.invocation, r.edit_index) for r in closing] == [(1, 3), (2, 1)]


class TestRunExperiment:
    def test_param_experiment_writes_artifacts(self, tmp_path):
        cfg = H.ExperimentConfig.defaults(
            "param", trials=2, seed=1, budget_edits=40, out=str(tmp_path / "r"))
        paths = H.run_experiment(cfg)
        assert paths["metrics"].exists()
        assert paths["box_error"].exists()
        assert paths["box_param"].exists()
        assert H.parse_config_text(paths["config"].read_text()) == cfg
        counters = paths["counters"].read_text()
        assert "trial=0 " in counters and "trial=1 " in counters
        assert "replay_ok=True" in counters
        rows = list(csv.reader(paths["metrics"].open()))
        assert len(rows) > 2
        assert (tmp_path / "r" / "observations_00.jsonl").exists()

    def test_missing_has_no_param_box(self, tmp_path):
        cfg = H.ExperimentConfig.defaults(
            "missing", trials=1, seed=3, unexpected_quota=2,
            max_observations=100, budget_edits=20, out=str(tmp_path / "r"))
        paths = H.run_experiment(cfg)
        assert "box_param" not in paths

    def test_same_seed_same_bytes(self, tmp_path):
        runs = []
        for sub in ("a", "b"):
            cfg = H.ExperimentConfig.defaults(
                "param", trials=2, seed=11, budget_edits=40,
                out=str(tmp_path / sub))
            runs.append(H.run_experiment(cfg)["metrics"].read_bytes())
        assert runs[0] == runs[1]
