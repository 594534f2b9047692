"""Simulated leader/follower arm pair under 4-channel bilateral control.

Each robot is a horizontal 2-link planar arm (uniform rods) plus a
one-joint gripper, so D = 3.  The ``tau`` channel of a robot's state is
the external torque acting on it: the operator's hand on the leader, the
grasped object on the follower.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Demonstration, RobotState, Trajectory

GRAVITY = 9.81


class DynamicsDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ArmParams:
    link_lengths: tuple = (0.35, 0.30)
    link_masses: tuple = (1.0, 0.8)
    joint_damping: tuple = (0.2, 0.15, 0.02)
    gripper_inertia: float = 0.002
    gripper_stiffness: float = 4.0
    contact_angle: float = 0.3
    dt_sim: float = 0.001
    control_period: float = 0.01
    gravity: bool = False

    def __post_init__(self):
        vals = [*self.link_lengths, *self.link_masses, *self.joint_damping,
                self.gripper_inertia, self.gripper_stiffness, self.dt_sim]
        if any(not v > 0 for v in vals):
            raise ValueError("arm parameters must be strictly positive")
        if self.dt_sim > self.control_period:
            raise ValueError("dt_sim must not exceed the control period")

    @property
    def substeps(self) -> int:
        return int(round(self.control_period / self.dt_sim))


@dataclass(frozen=True)
class BilateralGains:
    kp: tuple = (120.0, 120.0, 6.0)
    kd: tuple = (6.0, 6.0, 0.3)
    kf: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        for v in (*self.kp, *self.kd, *self.kf):
            if not v > 0:
                raise ValueError("bilateral gains must be positive")


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def mass_matrix(theta, p: ArmParams) -> np.ndarray:
    l1, l2 = p.link_lengths
    m1, m2 = p.link_masses
    lc1, lc2 = l1 / 2, l2 / 2
    i1, i2 = m1 * l1 * l1 / 12, m2 * l2 * l2 / 12
    c2 = math.cos(theta[1])
    m11 = m1 * lc1 ** 2 + i1 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * c2) + i2
    m12 = m2 * (lc2 ** 2 + l1 * lc2 * c2) + i2
    m22 = m2 * lc2 ** 2 + i2
    return np.array([[m11, m12, 0.0], [m12, m22, 0.0], [0.0, 0.0, p.gripper_inertia]])


def bias_torque(theta, omega, p: ArmParams) -> np.ndarray:
    """Coriolis/centrifugal plus (optional) gravity torques."""
    l1, l2 = p.link_lengths
    m1, m2 = p.link_masses
    lc2 = l2 / 2
    h = m2 * l1 * lc2 * math.sin(theta[1])
    w1, w2 = omega[0], omega[1]
    c = np.array([-h * (2 * w1 * w2 + w2 * w2), h * w1 * w1, 0.0])
    if p.gravity:
        ca = math.cos(theta[0])
        cb = math.cos(theta[0] + theta[1])
        g2 = m2 * lc2 * GRAVITY * cb
        c += np.array([(m1 * l1 / 2 + m2 * l1) * GRAVITY * ca + g2, g2, 0.0])
    return c


def kinetic_energy(theta, omega, p: ArmParams) -> float:
    omega = np.asarray(omega)
    return 0.5 * float(omega @ mass_matrix(theta, p) @ omega)


def _advance(theta, omega, u, ext, p: ArmParams, dt: float | None = None):
    dt = p.dt_sim if dt is None else dt
    m = mass_matrix(theta, p)
    rhs = m @ omega + dt * (u + ext - bias_torque(theta, omega, p))
    # damping handled implicitly so it can only remove energy
    omega_new = np.linalg.solve(m + dt * np.diag(p.joint_damping), rhs)
    theta_new = theta + dt * omega_new
    if not (np.all(np.isfinite(omega_new)) and np.all(np.isfinite(theta_new))):
        raise DynamicsDiverged("dynamics diverged")
    return theta_new, omega_new


def step_dynamics(arm_state: RobotState, input_torque, external_torque,
                  params: ArmParams) -> RobotState:
    """Advance one arm by one semi-implicit Euler step of length ``dt_sim``.

    The returned state's ``tau`` is the external torque that acted during
    the step.
    """
    u = np.asarray(input_torque, dtype=np.float64)
    ext = np.asarray(external_torque, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(ext))):
        raise DynamicsDiverged("dynamics diverged: non-finite input torque")
    th, om = _advance(arm_state.theta, arm_state.omega, u, ext, params)
    return RobotState(th, om, ext)


def derivatives(theta, omega, u, ext, p: ArmParams):
    """Continuous-time (theta_dot, omega_dot) for reference integrators."""
    m = mass_matrix(theta, p)
    acc = np.linalg.solve(m, u + ext - bias_torque(theta, omega, p)
                          - np.asarray(p.joint_damping) * omega)
    return np.asarray(omega, dtype=np.float64), acc


# ---------------------------------------------------------------------------
# bilateral control
# ---------------------------------------------------------------------------

def bilateral_torques(theta_l, omega_l, theta_f, omega_f, tau_l, tau_f, g: BilateralGains):
    kp, kd, kf = (np.asarray(x) for x in (g.kp, g.kd, g.kf))
    sync = kp * (theta_f - theta_l) + kd * (omega_f - omega_l)
    force = 0.5 * kf * (tau_l + tau_f)
    return sync - force, -sync - force


def bilateral_step(leader: RobotState, follower: RobotState, operator_torque, env_torque,
                   gains: BilateralGains, params: ArmParams):
    """One ``dt_sim`` step of the coupled pair.

    Position/velocity synchronization is symmetric PD; the force term
    pushes both arms against the sum of the external torques so that
    ``tau_l + tau_f`` is driven to zero.
    """
    op = np.asarray(operator_torque, dtype=np.float64)
    env = np.asarray(env_torque, dtype=np.float64)
    u_l, u_f = bilateral_torques(leader.theta, leader.omega, follower.theta, follower.omega,
                                 op, env, gains)
    return (step_dynamics(leader, u_l, op, params),
            step_dynamics(follower, u_f, env, params))


def follower_command(target: RobotState, follower: RobotState, env_torque,
                     gains: BilateralGains) -> np.ndarray:
    """Follower-side bilateral law with the leader replaced by a commanded state."""
    _, u_f = bilateral_torques(target.theta, target.omega, follower.theta, follower.omega,
                               target.tau, np.asarray(env_torque), gains)
    return u_f


# ---------------------------------------------------------------------------
# scripted operator
# ---------------------------------------------------------------------------

def interpolate_waypoints(t: float, waypoints: Sequence) -> np.ndarray:
    """Piecewise-cubic (zero slope at every knot) interpolation of joint targets.

    Times before the first knot give the first target; times after the last
    hold the last target.
    """
    times = [w[0] for w in waypoints]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("waypoints must be time-sorted")
    if t <= times[0]:
        return np.asarray(waypoints[0][1], dtype=np.float64)
    if t >= times[-1]:
        return np.asarray(waypoints[-1][1], dtype=np.float64)
    i = int(np.searchsorted(times, t, side="right")) - 1
    t0, q0 = waypoints[i]
    t1, q1 = waypoints[i + 1]
    q0 = np.asarray(q0, dtype=np.float64)
    if t1 <= t0:
        return np.asarray(q1, dtype=np.float64)
    s = (t - t0) / (t1 - t0)
    return q0 + (3 * s * s - 2 * s ** 3) * (np.asarray(q1) - q0)


def scripted_operator(t: float, waypoints: Sequence, leader: RobotState, kp, kd) -> np.ndarray:
    target = interpolate_waypoints(t, waypoints)
    return np.asarray(kp) * (target - leader.theta) - np.asarray(kd) * leader.omega


@dataclass(frozen=True)
class OperatorGains:
    kp: tuple = (100.0, 100.0, 3.0)
    kd: tuple = (10.0, 10.0, 0.15)


# ---------------------------------------------------------------------------
# kinematics and scene
# ---------------------------------------------------------------------------

def forward_kinematics(theta, params: ArmParams) -> np.ndarray:
    l1, l2 = params.link_lengths
    a, b = theta[0], theta[0] + theta[1]
    return np.array([l1 * math.cos(a) + l2 * math.cos(b), l1 * math.sin(a) + l2 * math.sin(b)])


def inverse_kinematics(xy, params: ArmParams) -> np.ndarray:
    """Elbow-positive IK for the two arm joints."""
    l1, l2 = params.link_lengths
    x, y = xy
    c2 = (x * x + y * y - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if not -1.0 <= c2 <= 1.0:
        raise ValueError(f"point {tuple(xy)} is outside the reachable workspace")
    q2 = math.acos(c2)
    q1 = math.atan2(y, x) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    return np.array([q1, q2])


@dataclass(frozen=True)
class SceneObject:
    position: tuple
    goal: tuple
    grasped: bool = False


@dataclass(frozen=True)
class Scene:
    objects: tuple
    grasp_radius: float = 0.04
    place_radius: float = 0.03
    close_threshold: float = 0.4
    open_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not (self.grasp_radius > 0 and self.place_radius > 0):
            raise ValueError("scene radii must be positive")
        if sum(o.grasped for o in self.objects) > 1:
            raise ValueError("at most one object may be grasped")

    @property
    def grasped_index(self):
        for i, o in enumerate(self.objects):
            if o.grasped:
                return i
        return None


def scene_update(scene: Scene, follower: RobotState, params: ArmParams) -> Scene:
    ee = forward_kinematics(follower.theta, params)
    grip = follower.theta[-1]
    held = scene.grasped_index
    objs = list(scene.objects)
    if held is not None:
        obj = objs[held]
        objs[held] = replace(obj, position=(float(ee[0]), float(ee[1])),
                             grasped=bool(grip <= scene.open_threshold))
        return replace(scene, objects=tuple(objs))
    if grip < scene.close_threshold:
        best, best_d = None, scene.grasp_radius
        for i, o in enumerate(objs):
            d = math.hypot(o.position[0] - ee[0], o.position[1] - ee[1])
            if d <= best_d:
                best, best_d = i, d
        if best is not None:
            objs[best] = replace(objs[best], position=(float(ee[0]), float(ee[1])), grasped=True)
            return replace(scene, objects=tuple(objs))
    return scene


def contact_torque(scene: Scene, follower: RobotState, params: ArmParams) -> np.ndarray:
    """Gripper squeeze reaction while an object is held (pushes the gripper open)."""
    tau = np.zeros(follower.dim)
    if scene.grasped_index is not None:
        tau[-1] = params.gripper_stiffness * max(0.0, params.contact_angle - follower.theta[-1])
    return tau


def placement_errors(scene: Scene) -> list[float]:
    return [math.hypot(o.position[0] - o.goal[0], o.position[1] - o.goal[1]) for o in scene.objects]


def task_success(scene: Scene) -> bool:
    return all(not o.grasped and d <= scene.place_radius
               for o, d in zip(scene.objects, placement_errors(scene)))


# ---------------------------------------------------------------------------
# simulation loops
# ---------------------------------------------------------------------------

@dataclass
class TeleopResult:
    demo: Demonstration
    scene: Scene
    scenes: list = field(default_factory=list)


def simulate_teleop(waypoints, scene: Scene, params: ArmParams, gains: BilateralGains,
                    op_gains: OperatorGains, n_ticks: int, initial: RobotState | None = None,
                    name: str = "") -> TeleopResult:
    """Run a scripted-operator bilateral demonstration, sampled every control period."""
    dim = 3
    if initial is None:
        initial = RobotState(np.asarray(waypoints[0][1]), np.zeros(dim), np.zeros(dim))
    leader = follower = initial
    lead_rows, foll_rows, scenes = [leader], [follower], [scene]
    sub = params.substeps
    for k in range(n_ticks - 1):
        for s in range(sub):
            t = (k * sub + s) * params.dt_sim
            op = scripted_operator(t, waypoints, leader, op_gains.kp, op_gains.kd)
            env = contact_torque(scene, follower, params)
            leader, follower = bilateral_step(leader, follower, op, env, gains, params)
            scene = scene_update(scene, follower, params)
        lead_rows.append(leader)
        foll_rows.append(follower)
        scenes.append(scene)
    dt = params.control_period
    demo = Demonstration(Trajectory(dt, lead_rows), Trajectory(dt, foll_rows), name=name)
    return TeleopResult(demo, scene, scenes)


@dataclass
class RolloutResult:
    follower: Trajectory
    commands: Trajectory
    scene: Scene
    diverged: bool
    latencies: list


def closed_loop_rollout(step_fn, initial: RobotState, scene: Scene, params: ArmParams,
                        gains: BilateralGains, n_ticks: int, clock=None) -> RolloutResult:
    """Drive the follower alone with predicted leader states as commands.

    ``step_fn(F_k, k)`` returns the predicted next leader state, which the
    follower tracks with the bilateral law for one control period.  A
    divergence ends the rollout early and is reported, not raised.
    """
    import time
    clock = clock or time.perf_counter
    follower = initial
    foll, cmds, lat = [follower], [], []
    diverged = False
    sub = params.substeps
    for k in range(n_ticks - 1):
        try:
            t0 = clock()
            target = step_fn(follower, k)
            lat.append(clock() - t0)
            cmds.append(target)
            for _ in range(sub):
                env = contact_torque(scene, follower, params)
                u = follower_command(target, follower, env, gains)
                follower = step_dynamics(follower, u, env, params)
                scene = scene_update(scene, follower, params)
        except (DynamicsDiverged, ValueError, FloatingPointError):
            diverged = True
            break
        foll.append(follower)
    if not cmds:
        cmds.append(initial)
    dt = params.control_period
    return RolloutResult(Trajectory(dt, foll), Trajectory(dt, cmds), scene, diverged, lat)
