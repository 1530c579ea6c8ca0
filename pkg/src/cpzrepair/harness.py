"""Simulated controllers, the observe-repair loop, and the three experiments.

The ground truth lives only in the controller; the repair engine sees raw
observations. Experiments write a metrics CSV, box-plot data files, per-trial
observation logs, and a config echo into the output directory.
"""

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cpz import DimensionInfo
from .predicates import Formula, atom_margin, parse_formula, print_formula
from .repair import (ActionModel, Budget, Observation, bind_formula,
                     print_action, repair_action, unexpected,
                     write_observation_log)
from .sampling import ActiveSampler, SamplerConfig
from .states import State, StateSpace, desk_space

EFFECT_TEXT = "(symbol manip-empty false)"

EXPERIMENTS: Dict[str, Dict] = {
    "param": dict(
        initial="(dist obj manip 0.5)",
        truth="(dist obj manip 0.1)",
        active=False, trials=10, unexpected_quota=5, expected_streak=None,
        max_observations=1000),
    "missing": dict(
        initial="(dist obj manip 0.1)",
        truth="(and (dist obj manip 0.1) (roll obj manip 0.1))",
        active=True, trials=20, unexpected_quota=10, expected_streak=None,
        max_observations=500),
    "multiple": dict(
        initial="(dist obj manip 0.7)",
        truth="(and (dist obj manip 0.1) (roll obj manip 0.1) (empty manip))",
        active=True, trials=20, unexpected_quota=100, expected_streak=1000,
        max_observations=5000),
}


# ---------------------------------------------------------------------------
# Ground-truth controllers


@dataclass(frozen=True, eq=False)
class SimulatedController:
    name: str
    ground_truth_constraint: Formula    # hidden from the repair engine
    effect_rule: Callable[[State, Mapping[str, str], StateSpace], State]


def pick_effect(q: State, theta: Mapping[str, str], space: StateSpace) -> State:
    """Grab: hand becomes occupied, target object snaps to the gripper pose."""
    target = theta["obj"] if "obj" in theta else next(iter(theta.values()))
    return q.replace(q_o={target: q.q_r}, q_s={"manip-empty": False})


def make_pick_controller(truth_text: str) -> SimulatedController:
    return SimulatedController("pick", parse_formula(truth_text), pick_effect)


def _truth_holds(f: Formula, q: State, space: StateSpace) -> bool:
    # exact geometric semantics, cheaper than set membership
    return any(all(atom_margin(a, q, space, ctx=q) <= 0.0 for a in conj)
               for conj in f.disjuncts)


def execute_controller(ctrl: SimulatedController, q: State,
                       theta: Mapping[str, str], space: StateSpace) -> State:
    for formal, actual in theta.items():
        if actual not in space.object_names:
            raise ValueError(f"theta binds {formal} to unknown object {actual!r}")
    g = bind_formula(ctrl.ground_truth_constraint, theta)
    if _truth_holds(g, q, space):
        return ctrl.effect_rule(q, theta, space)
    return q


def replay_check(ctrl: SimulatedController, obs: Sequence[Observation],
                 space: StateSpace) -> bool:
    """Every logged outcome must equal the controller's deterministic output."""
    return all(execute_controller(ctrl, h.q, h.theta, space) == h.q_prime
               for h in obs)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ExperimentConfig:
    experiment: str = "param"
    trials: int = 10
    seed: int = 0
    budget_s: float = 20.0
    budget_edits: Optional[int] = None   # when set, replaces the time budget
    p_naive: float = 0.1
    max_rejections: int = 100
    unexpected_quota: int = 5
    expected_streak: Optional[int] = None
    max_observations: int = 5000         # termination insurance per trial
    objects: Tuple[str, ...] = ("obj", "cup")
    reach: float = 1.0
    out: str = "results"

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.budget_s <= 0:
            raise ValueError("budget_s must be positive")
        if self.budget_edits is not None and self.budget_edits < 0:
            raise ValueError("budget_edits must be non-negative")
        if self.unexpected_quota < 1:
            raise ValueError("unexpected_quota must be at least 1")
        if self.expected_streak is not None and self.expected_streak < 1:
            raise ValueError("expected_streak must be at least 1")
        if self.max_observations < 1:
            raise ValueError("max_observations must be at least 1")
        if not self.objects:
            raise ValueError("need at least one object")
        SamplerConfig(self.p_naive, self.max_rejections)

    @classmethod
    def defaults(cls, experiment: str, **overrides) -> "ExperimentConfig":
        spec = EXPERIMENTS[experiment]
        base = dict(experiment=experiment, trials=spec["trials"],
                    unexpected_quota=spec["unexpected_quota"],
                    expected_streak=spec["expected_streak"],
                    max_observations=spec["max_observations"])
        base.update(overrides)
        return cls(**base)

    @property
    def active(self) -> bool:
        return EXPERIMENTS[self.experiment]["active"]

    def budget(self) -> Budget:
        if self.budget_edits is not None:
            return Budget(edits=self.budget_edits)
        return Budget(seconds=self.budget_s)


_CONFIG_INT = {"trials", "seed", "budget_edits", "max_rejections",
               "unexpected_quota", "expected_streak", "max_observations"}
_CONFIG_FLOAT = {"budget_s", "p_naive", "reach"}


def config_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            v = "none"
        elif f.name == "objects":
            v = ",".join(v)
        elif isinstance(v, float):
            v = "%.9g" % v
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    kv: Dict[str, object] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {ln}: unknown key {key!r}")
        if val.lower() == "none":
            kv[key] = None
        elif key in _CONFIG_INT:
            kv[key] = int(val)
        elif key in _CONFIG_FLOAT:
            kv[key] = float(val)
        elif key == "objects":
            kv[key] = tuple(s.strip() for s in val.split(",") if s.strip())
        else:
            kv[key] = val
    return ExperimentConfig(**kv)


# ---------------------------------------------------------------------------
# The observe-repair loop


@dataclass
class MetricsRecord:
    trial: int
    invocation: int
    edit_index: int
    error: float
    best_error: float
    elapsed_s: float
    formula: str
    param_error: Optional[float]


@dataclass
class TrialStats:
    trial: int
    observations: int = 0
    unexpected: int = 0
    invocations: int = 0
    replay_ok: bool = True
    final_model: str = ""
    sampler: Dict[str, int] = field(default_factory=dict)


def initial_model(experiment: str) -> ActionModel:
    return ActionModel("pick", ("obj",),
                       parse_formula(EXPERIMENTS[experiment]["initial"]),
                       parse_formula(EFFECT_TEXT))


def _dist_value(f: Formula) -> Optional[float]:
    for _, _, atom in f.all_atoms():
        if atom.template == "dist":
            return float(atom.value("d"))
    return None


def _param_error(f: Formula, experiment: str) -> Optional[float]:
    if experiment != "param":
        return None
    d = _dist_value(f)
    return None if d is None else abs(d - 0.1)


def _pin_objects(space: StateSpace, rng: np.random.Generator, reach: float
                 ) -> Dict[str, DimensionInfo]:
    """Freeze object poses for one trial by collapsing their sampling bounds."""
    eps = 1e-9
    pins: Dict[str, DimensionInfo] = {}
    table = space.bounds()
    for name in space.object_names:
        vals = [float(rng.uniform(-0.9 * reach, 0.9 * reach)) for _ in range(3)]
        vals.append(float(rng.uniform(-math.pi, math.pi)))
        for f, v in zip(("x", "y", "z", "roll"), vals):
            did = f"{name}.{f}"
            b = table[did]
            pins[did] = DimensionInfo(did, max(v - eps, b.lower),
                                      min(v + eps, b.upper))
    return pins


def run_repair_loop(model: ActionModel, ctrl: SimulatedController,
                    space: StateSpace, cfg: ExperimentConfig,
                    rng: np.random.Generator, trial: int = 0,
                    pin_bounds: Optional[Mapping[str, DimensionInfo]] = None,
                    ) -> Tuple[ActionModel, List[MetricsRecord], TrialStats,
                               List[Observation]]:
    sampler = ActiveSampler(space, SamplerConfig(cfg.p_naive, cfg.max_rejections),
                            bounds=pin_bounds, rng=rng)
    budget = cfg.budget()
    edit_mode = cfg.budget_edits is not None
    prev: Optional[Formula] = None     # constraint before the last repair
    obs_log: List[Observation] = []
    records: List[MetricsRecord] = []
    stats = TrialStats(trial=trial)
    streak = 0     # uninterrupted expected observations, as they arrive

    while (stats.unexpected < cfg.unexpected_quota
           and len(obs_log) < cfg.max_observations):
        if cfg.expected_streak is not None and streak >= cfg.expected_streak:
            break

        if cfg.active and prev is not None:
            q, theta = sampler.sample(prev, model.constraint, model.param_names)
        else:
            q, theta = sampler.naive(model.constraint, model.param_names)
        q2 = execute_controller(ctrl, q, theta, space)
        h = Observation(ctrl.name, q, theta, q2)
        obs_log.append(h)
        if not unexpected(model, h, space):
            streak += 1
            continue

        streak = 0
        stats.unexpected += 1
        stats.invocations += 1
        prev = model.constraint
        t0 = time.monotonic()
        out = repair_action(model, obs_log, budget, space, sampler.rng)
        wall = 0.0 if edit_mode else time.monotonic() - t0
        model = out.model
        diag = out.constraint_diag if out.chose == "constraint" else out.effect_diag
        for ev in diag.events:
            pe = None
            if cfg.experiment == "param" and out.chose == "constraint":
                pe = _param_error(parse_formula(ev.formula), cfg.experiment)
            records.append(MetricsRecord(trial, stats.invocations, ev.edit_index,
                                         ev.error, ev.best_error, ev.elapsed_s,
                                         ev.formula, pe))
        records.append(MetricsRecord(
            trial, stats.invocations, diag.evaluated, diag.final_error,
            diag.final_error, wall, print_formula(model.constraint),
            _param_error(model.constraint, cfg.experiment)))

    stats.observations = len(obs_log)
    stats.final_model = print_action(model)
    stats.sampler = dict(vars(sampler.diag))
    return model, records, stats, obs_log


# ---------------------------------------------------------------------------
# Metrics files


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else "%.9g" % x


def write_metrics_csv(path: Path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "invocation", "edit_index", "error", "best_error",
                    "elapsed_s", "formula", "param_error"])
        for r in records:
            w.writerow([r.trial, r.invocation, r.edit_index, _fmt(r.error),
                        _fmt(r.best_error), _fmt(r.elapsed_s), r.formula,
                        _fmt(r.param_error)])


def _box_row(index: int, values: Sequence[float]) -> str:
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr][0]
    hi = v[v <= q3 + 1.5 * iqr][-1]
    outliers = v[(v < lo) | (v > hi)]
    out = ";".join("%.9g" % x for x in outliers) if outliers.size else "-"
    cols = [str(index), str(v.size)] + ["%.9g" % x for x in
                                        (v.mean(), v[0], lo, q1, med, q3, hi, v[-1])]
    return " ".join(cols + [out])


def write_box_file(path: Path, groups: Dict[int, List[float]]) -> None:
    lines = ["# index n mean min whisker_lo q1 median q3 whisker_hi max outliers"]
    for idx in sorted(groups):
        if groups[idx]:
            lines.append(_box_row(idx, groups[idx]))
    path.write_text("\n".join(lines) + "\n")


def _closing_records(records: Sequence[MetricsRecord]) -> List[MetricsRecord]:
    last: Dict[Tuple[int, int], MetricsRecord] = {}
    for r in records:
        last[(r.trial, r.invocation)] = r
    return [last[k] for k in sorted(last)]


def run_experiment(cfg: ExperimentConfig) -> Dict[str, Path]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    space = desk_space(cfg.objects, reach=cfg.reach)
    ctrl = make_pick_controller(EXPERIMENTS[cfg.experiment]["truth"])

    all_records: List[MetricsRecord] = []
    all_stats: List[TrialStats] = []
    for t in range(cfg.trials):
        rng = np.random.default_rng(cfg.seed + t)
        pins = _pin_objects(space, rng, cfg.reach)
        model = initial_model(cfg.experiment)
        model, recs, stats, obs = run_repair_loop(model, ctrl, space, cfg, rng,
                                                  trial=t, pin_bounds=pins)
        stats.replay_ok = replay_check(ctrl, obs, space)
        all_records.extend(recs)
        all_stats.append(stats)
        write_observation_log(str(out / f"observations_{t:02d}.jsonl"), space, obs)

    paths = {"metrics": out / "metrics.csv", "config": out / "config.txt",
             "counters": out / "counters.txt",
             "box_error": out / "box_error_by_edit.txt"}
    write_metrics_csv(paths["metrics"], all_records)
    paths["config"].write_text(config_text(cfg))

    by_edit: Dict[int, List[float]] = {}
    for r in all_records:
        by_edit.setdefault(r.edit_index, []).append(r.error)
    write_box_file(paths["box_error"], by_edit)

    if cfg.experiment == "param":
        by_inv: Dict[int, List[float]] = {}
        for r in _closing_records(all_records):
            if r.param_error is not None:
                by_inv.setdefault(r.invocation, []).append(r.param_error)
        paths["box_param"] = out / "box_param_error_by_invocation.txt"
        write_box_file(paths["box_param"], by_inv)

    counter_lines = []
    for s in all_stats:
        diag = " ".join(f"{k}={v}" for k, v in sorted(s.sampler.items()))
        counter_lines.append(
            f"trial={s.trial} observations={s.observations} "
            f"unexpected={s.unexpected} invocations={s.invocations} "
            f"replay_ok={s.replay_ok} {diag}")
        counter_lines.append(f"trial={s.trial} model={s.final_model}")
    paths["counters"].write_text("\n".join(counter_lines) + "\n")
    return paths
