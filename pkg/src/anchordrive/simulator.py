"""Closed-loop kinematic simulation.

Vehicle dynamics are a rear-axle kinematic bicycle stepped with explicit
Euler at 10 Hz. Every frame the active policy plans a fresh ego-frame
trajectory; a lateral PID on the cross-track offset of the plan's near
waypoint and a longitudinal PID on a waypoint-spacing speed target turn
it into a control command. Infractions are rectangle-overlap and
corridor tests, debounced so one continuous contact yields one event.

Episodes terminate on route completion, route deviation, prolonged
blockage, the scenario time budget, or a sustained collision. Every
frame is logged so episodes can be scored and replayed offline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import T_WAYPOINTS, WAYPOINT_DT
from .belief import BeliefState, EgoStatus, N_ACTIONS
from .geometry import Polyline, rect_corners, rects_overlap, world_to_ego
from .oracle.scenarios import FRAME_DT, Obstacle, Scenario, SceneState
from .planner import Planner

__all__ = ["WHEELBASE", "MAX_STEER", "A_MAX", "B_MAX", "V_MAX", "EGO_LENGTH",
           "EGO_WIDTH", "VehicleState", "ControlCommand", "PIDGains",
           "PIDConfig", "PIDState", "pid_step", "step_vehicle",
           "WaypointTracker", "PolicyOutput", "PlannerPolicy", "ExpertPolicy",
           "EpisodeConfig", "FrameRecord", "InfractionEvent", "RolloutLog",
           "RolloutError", "run_episode", "save_rollout", "load_rollout"]

WHEELBASE = 2.5
MAX_STEER = math.radians(35.0)
A_MAX = 3.0
B_MAX = 6.0
V_MAX = 15.0
EGO_LENGTH = 4.5
EGO_WIDTH = 2.0

TERMINATIONS = ("completed", "route_deviation", "blocked", "timeout",
                "collision_terminal")

_OBSTACLE_CATEGORY = {"vehicle": "CV", "pedestrian": "CP", "static": "CL"}


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    speed: float

    def __post_init__(self):
        vals = (self.x, self.y, self.yaw, self.speed)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite vehicle state {vals}")
        if not 0.0 <= self.speed <= V_MAX:
            raise ValueError(f"speed {self.speed} outside [0, {V_MAX}]")

    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


@dataclass(frozen=True)
class ControlCommand:
    steer: float
    throttle: float
    brake: float

    def __post_init__(self):
        if not -1.0 <= self.steer <= 1.0:
            raise ValueError(f"steer {self.steer} outside [-1, 1]")
        if not 0.0 <= self.throttle <= 1.0 or not 0.0 <= self.brake <= 1.0:
            raise ValueError(f"throttle/brake {self.throttle}/{self.brake} outside [0, 1]")
        if self.throttle * self.brake != 0.0:
            raise ValueError("throttle and brake are mutually exclusive")


def step_vehicle(state: VehicleState, cmd: ControlCommand, dt: float = FRAME_DT) -> VehicleState:
    """Explicit-Euler kinematic bicycle step from the rear axle."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    accel = A_MAX * cmd.throttle - B_MAX * cmd.brake
    x = state.x + state.speed * math.cos(state.yaw) * dt
    y = state.y + state.speed * math.sin(state.yaw) * dt
    yaw = state.yaw + state.speed / WHEELBASE * math.tan(cmd.steer * MAX_STEER) * dt
    speed = min(max(state.speed + accel * dt, 0.0), V_MAX)
    return VehicleState(x=x, y=y, yaw=yaw, speed=speed)


@dataclass(frozen=True)
class PIDGains:
    kp: float
    ki: float
    kd: float

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0.0:
            raise ValueError("PID gains must be non-negative")


@dataclass(frozen=True)
class PIDConfig:
    lateral: PIDGains = PIDGains(1.2, 0.8, 0.35)
    longitudinal: PIDGains = PIDGains(1.0, 0.3, 0.1)
    integral_clamp: float = 2.0
    dt: float = FRAME_DT

    def __post_init__(self):
        if self.dt <= 0.0 or self.integral_clamp <= 0.0:
            raise ValueError("dt and integral clamp must be positive")


@dataclass
class PIDState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_step(gains: PIDGains, state: PIDState, error: float, dt: float,
             integral_clamp: float, lo: float, hi: float) -> float:
    """One PID update; mutates the controller state, returns clamped output."""
    state.integral = min(max(state.integral + error * dt, -integral_clamp), integral_clamp)
    deriv = 0.0 if state.prev_error is None else (error - state.prev_error) / dt
    state.prev_error = error
    u = gains.kp * error + gains.ki * state.integral + gains.kd * deriv
    return min(max(u, lo), hi)


class WaypointTracker:
    """Maps an ego-frame waypoint plan to steering and pedal commands.

    Lateral control tracks the cross-track offset of the plan's near
    waypoint (the second of five, one second ahead), normalized by the
    waypoint's distance so the error is the sine of the bearing angle; a
    raw meter-valued offset at this lookahead would read road curvature
    as error and cut every corner by d^2/2R. The speed target is the
    distance between waypoints one and three divided by their one second
    time gap, capped at the scenario speed limit.
    """

    NEAR_INDEX = 1
    SPEED_PAIR = (0, 2)

    def __init__(self, config: PIDConfig):
        self.config = config
        self.lateral = PIDState()
        self.longitudinal = PIDState()

    def control(self, waypoints_ego: np.ndarray, speed: float,
                speed_cap: float) -> ControlCommand:
        wp = np.asarray(waypoints_ego, dtype=np.float64)
        if wp.shape != (T_WAYPOINTS, 2):
            raise ValueError(f"tracker expects ({T_WAYPOINTS}, 2) waypoints, got {wp.shape}")
        cfg = self.config
        near = wp[self.NEAR_INDEX]
        reach = float(np.hypot(near[0], near[1]))
        cross_track = float(near[1]) / max(reach, 1e-6)
        steer = pid_step(cfg.lateral, self.lateral, cross_track, cfg.dt,
                         cfg.integral_clamp, -1.0, 1.0)
        i, j = self.SPEED_PAIR
        gap = (j - i) * WAYPOINT_DT
        target = min(float(np.linalg.norm(wp[j] - wp[i])) / gap, speed_cap)
        u = pid_step(cfg.longitudinal, self.longitudinal, target - speed, cfg.dt,
                     cfg.integral_clamp, -1.0, 1.0)
        if u >= 0.0:
            return ControlCommand(steer=steer, throttle=u, brake=0.0)
        return ControlCommand(steer=steer, throttle=0.0, brake=-u)


@dataclass
class PolicyOutput:
    """One planning decision: the waypoints to track plus everything the
    rollout log keeps for replay."""

    waypoints_ego: np.ndarray
    belief: np.ndarray
    trajectories: np.ndarray
    scores: np.ndarray
    selected: int


class PlannerPolicy:
    """Runs the trained model once per frame."""

    def __init__(self, planner: Planner, weights, rng: np.random.Generator,
                 belief_override: BeliefState | None = None):
        self.planner = planner
        self.weights = weights
        self.rng = rng
        self.belief_override = belief_override

    def plan(self, scene: SceneState, state: VehicleState) -> PolicyOutput:
        from .oracle.encoder import encode_context

        tokens = encode_context(scene, self.weights)
        ego = EgoStatus(speed=state.speed, yaw=state.yaw)
        scored, belief = self.planner.plan(tokens, ego, self.rng,
                                           belief_override=self.belief_override)
        used = self.belief_override if self.belief_override is not None else belief
        idx = int(np.argmax(scored.scores))
        return PolicyOutput(waypoints_ego=scored.trajectories[idx],
                            belief=used.probs.copy(),
                            trajectories=scored.trajectories,
                            scores=scored.scores,
                            selected=idx)


class ExpertPolicy:
    """Scripted oracle driver: reads future waypoints straight off the
    scenario's ground-truth route, bypassing the model entirely.

    The tracked polyline gets a straight tail extension so the waypoint
    fan never bunches up at the route end; without it the speed target
    collapses just short of the finish line and the ego stalls there.
    """

    TAIL_M = 40.0

    def __init__(self, scenario: Scenario):
        pts = scenario.route.points
        d = pts[-1] - pts[-2]
        d = d / np.hypot(*d)
        self.route = Polyline(np.vstack([pts, pts[-1] + d * self.TAIL_M]))
        self.cruise = scenario.cruise_speed

    def plan(self, scene: SceneState, state: VehicleState) -> PolicyOutput:
        s, _ = self.route.project((state.x, state.y))
        world = np.stack([self.route.point_at(s + self.cruise * WAYPOINT_DT * (k + 1))
                          for k in range(T_WAYPOINTS)])
        wp = world_to_ego(world, state.pose())
        return PolicyOutput(waypoints_ego=wp,
                            belief=np.full(N_ACTIONS, 1.0 / N_ACTIONS),
                            trajectories=wp[None, ...],
                            scores=np.array([1.0]),
                            selected=0)


@dataclass(frozen=True)
class EpisodeConfig:
    budget_s: float = 60.0
    blocked_speed: float = 0.1
    blocked_s: float = 90.0
    deviation_m: float = 15.0
    collision_stuck_s: float = 2.0
    completion_slack_m: float = 0.5
    context_window: int = 1
    pid: PIDConfig = field(default_factory=PIDConfig)

    def __post_init__(self):
        if min(self.budget_s, self.blocked_s, self.deviation_m,
               self.collision_stuck_s, self.completion_slack_m) <= 0.0:
            raise ValueError("episode thresholds must be positive")
        if self.context_window < 1:
            raise ValueError("context window must be at least 1")

    def to_dict(self) -> dict:
        return {
            "budget_s": self.budget_s, "blocked_speed": self.blocked_speed,
            "blocked_s": self.blocked_s, "deviation_m": self.deviation_m,
            "collision_stuck_s": self.collision_stuck_s,
            "completion_slack_m": self.completion_slack_m,
            "context_window": self.context_window,
            "pid": {
                "lateral": [self.pid.lateral.kp, self.pid.lateral.ki, self.pid.lateral.kd],
                "longitudinal": [self.pid.longitudinal.kp, self.pid.longitudinal.ki,
                                 self.pid.longitudinal.kd],
                "integral_clamp": self.pid.integral_clamp,
                "dt": self.pid.dt,
            },
        }


@dataclass
class InfractionEvent:
    category: str
    frame: int
    time: float
    detail: str = ""


@dataclass
class FrameRecord:
    frame: int
    time: float
    state: VehicleState
    control: ControlCommand
    belief: np.ndarray
    instruction: int
    selected: int
    trajectories: np.ndarray
    scores: np.ndarray


@dataclass
class RolloutLog:
    scenario_kind: str
    scenario_seed: int
    scenario_name: str
    route_length: float
    corridor: list[np.ndarray]
    corridor_half_width: float
    config: dict
    frames: list[FrameRecord] = field(default_factory=list)
    events: list[InfractionEvent] = field(default_factory=list)
    termination: str = ""
    sim_seconds: float = 0.0

    def distance_driven(self) -> float:
        if len(self.frames) < 2:
            return 0.0
        xy = np.array([[f.state.x, f.state.y] for f in self.frames])
        return float(np.sum(np.hypot(*np.diff(xy, axis=0).T)))


class RolloutError(ValueError):
    pass


def _ego_rect(state: VehicleState) -> np.ndarray:
    return rect_corners(state.x, state.y, state.yaw, EGO_LENGTH, EGO_WIDTH)


def _obstacle_rect(o: Obstacle) -> np.ndarray:
    return rect_corners(o.x, o.y, o.yaw, o.length, o.width)


class _InfractionMonitor:
    """Debounced rising-edge detection for contact and corridor exits."""

    def __init__(self, scenario: Scenario, config: EpisodeConfig):
        self.scenario = scenario
        self.config = config
        self.in_contact: dict[int, bool] = {}
        self.contact_since: dict[int, float] = {}
        self.off_road = False
        self.blocked_since: float | None = None

    def observe(self, state: VehicleState, frame: int, time: float,
                events: list[InfractionEvent]) -> dict:
        ego = _ego_rect(state)
        stuck_contact = False
        for i, base in enumerate(self.scenario.obstacles):
            ob = base.at_time(time)
            hit = rects_overlap(ego, _obstacle_rect(ob))
            if hit and not self.in_contact.get(i, False):
                cat = _OBSTACLE_CATEGORY.get(ob.kind)
                if cat is None:
                    raise RolloutError(f"obstacle kind {ob.kind!r} has no infraction category")
                events.append(InfractionEvent(category=cat, frame=frame, time=time,
                                              detail=f"obstacle {i} ({ob.kind})"))
                self.contact_since[i] = time
            if not hit:
                self.contact_since.pop(i, None)
            self.in_contact[i] = hit
            if hit and time - self.contact_since[i] >= self.config.collision_stuck_s:
                stuck_contact = True

        dist = min(route.project((state.x, state.y))[1]
                   for route in self.scenario.corridor_routes())
        off = dist > self.scenario.corridor_half_width
        if off and not self.off_road:
            events.append(InfractionEvent(category="Off", frame=frame, time=time,
                                          detail=f"{dist:.2f} m from route"))
        self.off_road = off

        if state.speed < self.config.blocked_speed:
            if self.blocked_since is None:
                self.blocked_since = time
        else:
            self.blocked_since = None

        return {"min_route_distance": dist, "stuck_contact": stuck_contact,
                "blocked_for": 0.0 if self.blocked_since is None else time - self.blocked_since}


def run_episode(scenario: Scenario, policy, config: EpisodeConfig,
                initial_speed: float | None = None) -> RolloutLog:
    """Drive one episode to termination and return the full log.

    The policy object needs a single method plan(scene, state) ->
    PolicyOutput; see PlannerPolicy and ExpertPolicy.
    """
    start = scenario.route.points[0]
    yaw0 = scenario.route.heading_at(0.0)
    state = VehicleState(x=float(start[0]), y=float(start[1]), yaw=yaw0,
                         speed=scenario.cruise_speed if initial_speed is None else initial_speed)
    tracker = WaypointTracker(config.pid)
    monitor = _InfractionMonitor(scenario, config)
    log = RolloutLog(
        scenario_kind=scenario.kind, scenario_seed=scenario.seed,
        scenario_name=scenario.name,
        route_length=max(r.length for r in scenario.corridor_routes()),
        corridor=[r.points.copy() for r in scenario.corridor_routes()],
        corridor_half_width=scenario.corridor_half_width,
        config=config.to_dict())

    frame = 0
    time = 0.0
    termination = ""
    max_frames = int(round(config.budget_s / FRAME_DT))
    while True:
        scene = scenario.scene(state.pose(), state.speed, frame, time)
        out = policy.plan(scene, state)
        cmd = tracker.control(out.waypoints_ego, state.speed, scenario.speed_limit)
        log.frames.append(FrameRecord(
            frame=frame, time=time, state=state, control=cmd,
            belief=np.asarray(out.belief, dtype=np.float64),
            instruction=scene.instruction, selected=out.selected,
            trajectories=np.asarray(out.trajectories, dtype=np.float64),
            scores=np.asarray(out.scores, dtype=np.float64)))
        status = monitor.observe(state, frame, time, log.events)

        remaining = min(r.length - r.project((state.x, state.y))[0]
                        for r in scenario.corridor_routes())
        if remaining <= config.completion_slack_m:
            termination = "completed"
        elif status["min_route_distance"] > config.deviation_m:
            log.events.append(InfractionEvent(category="RD", frame=frame, time=time,
                                              detail=f"{status['min_route_distance']:.2f} m"))
            termination = "route_deviation"
        elif status["stuck_contact"]:
            termination = "collision_terminal"
        elif status["blocked_for"] >= config.blocked_s:
            log.events.append(InfractionEvent(category="AB", frame=frame, time=time,
                                              detail=f"speed < {config.blocked_speed} m/s"))
            termination = "blocked"
        elif frame + 1 >= max_frames:
            log.events.append(InfractionEvent(category="TO", frame=frame, time=time,
                                              detail=f"budget {config.budget_s} s"))
            termination = "timeout"
        if termination:
            break
        state = step_vehicle(state, cmd, FRAME_DT)
        frame += 1
        time = frame * FRAME_DT

    log.termination = termination
    log.sim_seconds = time
    return log


# ---- rollout files --------------------------------------------------------


def save_rollout(path: str | Path, log: RolloutLog) -> None:
    """Header line, one line per frame, trailer line; all JSON."""
    header = {
        "kind": "rollout-log",
        "scenario_kind": log.scenario_kind,
        "scenario_seed": log.scenario_seed,
        "scenario_name": log.scenario_name,
        "route_length": log.route_length,
        "corridor": [pts.tolist() for pts in log.corridor],
        "corridor_half_width": log.corridor_half_width,
        "config": log.config,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for f in log.frames:
        lines.append(json.dumps({
            "frame": f.frame, "time": round(f.time, 6),
            "x": f.state.x, "y": f.state.y, "yaw": f.state.yaw, "speed": f.state.speed,
            "steer": f.control.steer, "throttle": f.control.throttle,
            "brake": f.control.brake,
            "belief": f.belief.tolist(), "instruction": f.instruction,
            "selected": f.selected, "trajectories": f.trajectories.tolist(),
            "scores": f.scores.tolist(),
        }, sort_keys=True))
    lines.append(json.dumps({
        "trailer": True, "termination": log.termination,
        "sim_seconds": log.sim_seconds,
        "events": [{"category": e.category, "frame": e.frame, "time": e.time,
                    "detail": e.detail} for e in log.events],
    }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_rollout(path: str | Path) -> RolloutLog:
    path = Path(path)
    if not path.exists():
        raise RolloutError(f"no rollout file at {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise RolloutError(f"{path}: empty rollout file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise RolloutError(f"{path}:1: not valid JSON ({err})") from None
    if header.get("kind") != "rollout-log":
        raise RolloutError(f"{path}:1: missing rollout-log header")
    log = RolloutLog(
        scenario_kind=header["scenario_kind"], scenario_seed=header["scenario_seed"],
        scenario_name=header["scenario_name"], route_length=header["route_length"],
        corridor=[np.array(pts, dtype=np.float64) for pts in header["corridor"]],
        corridor_half_width=header["corridor_half_width"], config=header["config"])
    trailer = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise RolloutError(f"{path}:{lineno}: not valid JSON ({err})") from None
        if obj.get("trailer"):
            trailer = obj
            continue
        try:
            rec = FrameRecord(
                frame=int(obj["frame"]), time=float(obj["time"]),
                state=VehicleState(x=obj["x"], y=obj["y"], yaw=obj["yaw"],
                                   speed=obj["speed"]),
                control=ControlCommand(steer=obj["steer"], throttle=obj["throttle"],
                                       brake=obj["brake"]),
                belief=np.array(obj["belief"], dtype=np.float64),
                instruction=int(obj["instruction"]), selected=int(obj["selected"]),
                trajectories=np.array(obj["trajectories"], dtype=np.float64),
                scores=np.array(obj["scores"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as err:
            raise RolloutError(f"{path}:{lineno}: bad frame record ({err})") from None
        if rec.frame != len(log.frames):
            raise RolloutError(
                f"{path}:{lineno}: frame index {rec.frame} breaks contiguity "
                f"(expected {len(log.frames)})"
            )
        log.frames.append(rec)
    if trailer is None:
        raise RolloutError(f"{path}: missing trailer line")
    if trailer["termination"] not in TERMINATIONS:
        raise RolloutError(f"{path}: unknown termination {trailer['termination']!r}")
    log.termination = trailer["termination"]
    log.sim_seconds = float(trailer["sim_seconds"])
    log.events = [InfractionEvent(category=e["category"], frame=int(e["frame"]),
                                  time=float(e["time"]), detail=e.get("detail", ""))
                  for e in trailer["events"]]
    return log
