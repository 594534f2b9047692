"""Pick-and-place scripts and scenes for the toy task suite."""
from __future__ import annotations

import numpy as np

from ..plant import (Scene, SceneObject, inverse_kinematics, simulate_teleop, task_success,
                     DynamicsDiverged)
from .config import ExperimentConfig, TaskDefinition


def pick_place_waypoints(task: TaskDefinition, cfg: ExperimentConfig) -> list:
    """Joint-space waypoints: home, then for each object reach, close, carry, open; then home."""
    p = cfg.plant
    tm = cfg.timing
    op, cl = cfg.gripper_open, cfg.gripper_closed
    home = inverse_kinematics(cfg.home, p)
    t = 0.0
    wps = [(t, [*home, op])]
    t += tm["settle_time"]
    wps.append((t, [*home, op]))
    for obj, goal in zip(task.objects, task.goals):
        q_obj = inverse_kinematics(obj, p)
        q_goal = inverse_kinematics(goal, p)
        for q, grip_to in ((q_obj, cl), (q_goal, op)):
            grip_from = op if grip_to == cl else cl
            t += tm["move_time"]
            wps.append((t, [*q, grip_from]))
            t += tm["hold_time"]
            wps.append((t, [*q, grip_from]))
            t += tm["grip_time"]
            wps.append((t, [*q, grip_to]))
            t += tm["hold_time"]
            wps.append((t, [*q, grip_to]))
    t += tm["move_time"]
    wps.append((t, [*home, op]))
    t += tm["settle_time"]
    wps.append((t, [*home, op]))
    return wps


def task_ticks(task: TaskDefinition, cfg: ExperimentConfig) -> int:
    duration = pick_place_waypoints(task, cfg)[-1][0]
    return int(round(duration / cfg.plant.control_period)) + 1


def make_scene(task: TaskDefinition, cfg: ExperimentConfig, rng=None) -> Scene:
    """Scene for ``task``; with ``rng`` the object starts are perturbed by up to ``task.perturb``."""
    objs = []
    for start, goal in zip(task.objects, task.goals):
        start = np.asarray(start, dtype=np.float64)
        if rng is not None and task.perturb > 0:
            start = start + rng.uniform(-task.perturb, task.perturb, size=2)
        objs.append(SceneObject((float(start[0]), float(start[1])), tuple(goal)))
    sc = cfg.scene
    return Scene(tuple(objs), grasp_radius=sc["grasp_radius"], place_radius=sc["place_radius"],
                 close_threshold=sc["close_threshold"], open_threshold=sc["open_threshold"])


def collect_demo(task: TaskDefinition, cfg: ExperimentConfig):
    """Scripted bilateral demonstration of ``task`` (unperturbed scene)."""
    try:
        res = simulate_teleop(pick_place_waypoints(task, cfg), make_scene(task, cfg), cfg.plant,
                              cfg.gains, cfg.operator, task_ticks(task, cfg), name=task.name)
    except DynamicsDiverged as e:
        raise DynamicsDiverged(f"task {task.name}: {e}") from e
    return res.demo, res.scene, task_success(res.scene)
