"""Experiment configuration: an INI file mapped onto typed parameter objects."""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..models import CEConfig, CostWeights
from ..nn import TrainConfig
from ..plant import ArmParams, BilateralGains, OperatorGains
from ..segmentation import SegmentSpec

VERSION_TAG = "propmotion-0.1.0"
ROLES = ("primitive", "validation", "composite")


def default_config_path() -> Path:
    return Path(str(resources.files("propmotion.harness") / "default.ini"))


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _points(s: str) -> list[tuple[float, float]]:
    pts = []
    for chunk in s.split(","):
        xy = _floats(chunk)
        if len(xy) != 2:
            raise ValueError(f"bad point {chunk!r}")
        pts.append(xy)
    return pts


@dataclass
class TaskDefinition:
    name: str
    role: str
    objects: list
    goals: list
    perturb: float = 0.0
    base: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"task {self.name}: unknown role {self.role!r}")
        if len(self.objects) != len(self.goals) or not self.objects:
            raise ValueError(f"task {self.name}: objects and goals must pair up")


@dataclass
class ExperimentConfig:
    seed: int
    trials: int
    controllers: list
    eval_tasks: list
    architecture: str
    jobs: int
    plant: ArmParams
    gains: BilateralGains
    tracking_threshold: float
    force_ratio_threshold: float
    operator: OperatorGains
    home: tuple
    gripper_open: float
    gripper_closed: float
    timing: dict
    scene: dict
    segment: SegmentSpec
    lower_hidden: tuple
    lower_train: TrainConfig
    lower_residual: bool
    lower_shift_copies: int
    lower_shift_sigma: float
    horizon: int
    upper_hidden: int
    upper_layers: int
    upper_phases: int
    upper_train: TrainConfig
    refine_rounds: int
    refine_runs: int
    refine_train: TrainConfig
    baseline_lower_train: TrainConfig
    learning_max_primitives: int
    learning_phases: int
    learning_train: TrainConfig
    learning_prediction_weight: float
    ltof_hidden: tuple
    ltof_train: TrainConfig
    ltof_residual: bool
    ce: CEConfig
    cost: CostWeights
    tasks: dict
    text: str = field(repr=False, default="")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def meta(self, seed: int | None = None) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed if seed is None else seed,
                "version": VERSION_TAG}

    def tasks_by_role(self, role: str) -> list[TaskDefinition]:
        return [t for t in self.tasks.values() if t.role == role]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, seed=seed)


def _canonical(cp: configparser.ConfigParser) -> str:
    lines = []
    for sec in sorted(cp.sections()):
        lines.append(f"[{sec}]")
        for k in sorted(cp[sec]):
            lines.append(f"{k} = {cp[sec][k]}")
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI config, layered over the shipped defaults.

    ``overrides`` maps ``"section.key"`` to replacement strings.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read(default_config_path())
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        user = configparser.ConfigParser(inline_comment_prefixes=("#",))
        user.read(p)
        # a user file that defines any task replaces the whole default task suite
        if any(s.startswith("task.") for s in user.sections()):
            for s in [s for s in cp.sections() if s.startswith("task.")]:
                cp.remove_section(s)
        cp.read(p)
    for key, val in (overrides or {}).items():
        sec, k = key.rsplit(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][k] = str(val)
    return _build(cp)


def _train(sec, seed, epochs_key="epochs") -> TrainConfig:
    return TrainConfig(learning_rate=sec.getfloat("learning_rate", 5e-4),
                       batch_size=sec.getint("batch_size", 16), epochs=sec.getint(epochs_key),
                       seed=seed, input_noise=sec.getfloat("input_noise", 0.0))


def _build(cp: configparser.ConfigParser) -> ExperimentConfig:
    ex = cp["experiment"]
    seed = ex.getint("seed")
    arch = ex.get("architecture", "desk")
    if arch not in ("desk", "full"):
        raise ValueError(f"architecture must be desk or full, got {arch!r}")
    pl = cp["plant"]
    plant = ArmParams(link_lengths=_floats(pl["link_lengths"]), link_masses=_floats(pl["link_masses"]),
                      joint_damping=_floats(pl["joint_damping"]),
                      gripper_inertia=pl.getfloat("gripper_inertia"),
                      gripper_stiffness=pl.getfloat("gripper_stiffness"),
                      contact_angle=pl.getfloat("contact_angle"), dt_sim=pl.getfloat("dt_sim"),
                      control_period=pl.getfloat("control_period"), gravity=pl.getboolean("gravity"))
    g = cp["gains"]
    gains = BilateralGains(_floats(g["kp"]), _floats(g["kd"]), _floats(g["kf"]))
    op = cp["operator"]
    lo, up, lr, lt = cp["lower"], cp["upper"], cp["learning"], cp["ltof"]
    full = arch == "full"
    tasks = {}
    for sec in cp.sections():
        if not sec.startswith("task."):
            continue
        s = cp[sec]
        name = sec[len("task."):]
        base = s.get("base")
        if base:
            b = cp[f"task.{base}"]
            objects, goals = _points(b["objects"]), _points(b["goals"])
        else:
            objects, goals = _points(s["objects"]), _points(s["goals"])
        tasks[name] = TaskDefinition(name, s["role"], objects, goals, s.getfloat("perturb", 0.0), base)
    ce = cp["ce"]
    cost = cp["cost"]
    return ExperimentConfig(
        seed=seed, trials=ex.getint("trials"),
        controllers=[c.strip() for c in ex["controllers"].split(",") if c.strip()],
        eval_tasks=[c.strip() for c in ex["eval_tasks"].split(",") if c.strip()],
        architecture=arch, jobs=ex.getint("jobs", 1),
        plant=plant, gains=gains,
        tracking_threshold=g.getfloat("tracking_threshold"),
        force_ratio_threshold=g.getfloat("force_ratio_threshold"),
        operator=OperatorGains(_floats(op["kp"]), _floats(op["kd"])),
        home=_floats(op["home"]), gripper_open=op.getfloat("gripper_open"),
        gripper_closed=op.getfloat("gripper_closed"),
        timing={k: op.getfloat(k) for k in ("settle_time", "move_time", "hold_time", "grip_time")},
        scene={k: cp["scene"].getfloat(k) for k in cp["scene"]},
        segment=SegmentSpec(cp["segment"].getint("n_segments"), cp["segment"].getfloat("jitter_lo"),
                            cp["segment"].getfloat("jitter_hi"), cp["segment"].getint("seed", seed)),
        lower_hidden=_ints(lo["full_hidden"] if full else lo["hidden"]),
        lower_train=_train(lo, seed), lower_residual=lo.getboolean("residual"),
        lower_shift_copies=lo.getint("shift_copies", 0), lower_shift_sigma=lo.getfloat("shift_sigma", 0.0),
        horizon=up.getint("horizon"),
        upper_hidden=up.getint("full_hidden" if full else "hidden"),
        upper_layers=up.getint("full_layers" if full else "layers"),
        upper_phases=up.getint("phases"), upper_train=_train(up, seed),
        refine_rounds=up.getint("refine_rounds"), refine_runs=up.getint("refine_runs"),
        refine_train=_train(up, seed, "refine_epochs"),
        baseline_lower_train=_train(cp["baseline"], seed),
        learning_max_primitives=lr.getint("max_primitives"), learning_phases=lr.getint("phases"),
        learning_train=_train(lr, seed),
        learning_prediction_weight=lr.getfloat("prediction_weight"),
        ltof_hidden=_ints(lt["full_hidden"] if full else lt["hidden"]),
        ltof_train=_train(lt, seed), ltof_residual=lt.getboolean("residual"),
        ce=CEConfig(rho=ce.getfloat("rho"), top_m=ce.getint("top_m"),
                    samples_per_primitive=ce.getint("samples_per_primitive"),
                    noise_sigma=(ce.getfloat("noise_theta"), ce.getfloat("noise_omega"),
                                 ce.getfloat("noise_tau")),
                    seed=seed, cost_window=ce.get("cost_window", "first")),
        cost=CostWeights(cost.getfloat("alpha"), cost.getfloat("beta"), cost.getfloat("gamma")),
        tasks=tasks, text=_canonical(cp))
