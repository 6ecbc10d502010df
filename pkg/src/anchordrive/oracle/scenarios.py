"""Synthetic desk-scale scenario suite.

Seven scenario kinds are generated procedurally from a seed: straight,
left_turn, right_turn, lane_change_left, lane_change_right, fork, and
obstacle_avoid. Each scenario carries two related paths:

* ``route``: the expert path, used for ground-truth waypoints, the
  scripted expert, and route-completion scoring.
* ``guide``: the guidance polyline visible to the planner through
  SceneState. For every kind but fork these coincide; the fork's guide
  runs down the bisector between the two branches, so the observable
  scene does not reveal which branch the expert takes. The branch is
  picked by seed parity, giving an exact 50/50 split over a contiguous
  seed range, and a wedge-shaped divider sits between the branches so a
  fork never looks like plain straight road.

Ground-truth trajectories are future route points at fixed time spacing,
expressed in the (possibly perturbed) ego frame, which makes perturbed
records self-correcting: an offset ego sees waypoints leading back to
the route.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..anchors import (DatasetRecord, T_WAYPOINTS, Trajectory,
                       TrajectoryDataset, WAYPOINT_DT)
from ..belief import EgoStatus, LateralAction
from ..geometry import Polyline, world_to_ego

__all__ = ["SCENARIO_KINDS", "INSTRUCTION_NAMES", "Obstacle", "SceneState",
           "Scenario", "ScenarioError", "build_scenario", "generate_scenario",
           "save_scenes", "load_scenes", "FRAME_DT"]

SCENARIO_KINDS = ["straight", "left_turn", "right_turn", "lane_change_left",
                  "lane_change_right", "fork", "obstacle_avoid"]

# instruction ids 0..5 align with the lateral action encoding; 6 = Continue
INSTRUCTION_NAMES = ["FollowLane", "GoStraight", "TurnLeft", "TurnRight",
                     "ChangeLaneLeft", "ChangeLaneRight", "Continue"]
CONTINUE = 6

FRAME_DT = 0.1
HORIZON = T_WAYPOINTS * WAYPOINT_DT

# label-rule thresholds (route geometry over the prediction horizon)
TURN_LABEL_RAD = math.radians(15.0)
SHIFT_LABEL_M = 1.2
FORK_LABEL_M = 0.4


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    """Oriented box, optionally drifting at constant velocity."""

    x: float
    y: float
    yaw: float
    length: float
    width: float
    vx: float = 0.0
    vy: float = 0.0
    kind: str = "static"  # vehicle | pedestrian | static

    def at_time(self, t: float) -> "Obstacle":
        if self.vx == 0.0 and self.vy == 0.0:
            return self
        return replace(self, x=self.x + self.vx * t, y=self.y + self.vy * t)


@dataclass(frozen=True)
class SceneState:
    """Everything the context oracle can see for one frame."""

    route: np.ndarray           # guidance polyline, world frame (N, 2)
    ego: tuple[float, float, float]
    speed: float
    obstacles: tuple[Obstacle, ...]
    instruction: int
    frame: int
    scenario: str
    time: float = 0.0


@dataclass
class Scenario:
    kind: str
    seed: int
    name: str
    route: Polyline
    guide: Polyline
    alt_route: Polyline | None
    obstacles: list[Obstacle]
    cruise_speed: float
    speed_limit: float
    corridor_half_width: float
    instruction_until: list[tuple[float, int]] = field(default_factory=list)

    def instruction_at(self, s: float) -> int:
        for threshold, instr in self.instruction_until:
            if s < threshold:
                return instr
        return CONTINUE

    def corridor_routes(self) -> list[Polyline]:
        routes = [self.route]
        if self.alt_route is not None:
            routes.append(self.alt_route)
        return routes

    def scene(self, pose, speed: float, frame: int, sim_time: float) -> SceneState:
        s, _ = self.guide.project((pose[0], pose[1]))
        return SceneState(
            route=self.guide.points,
            ego=(float(pose[0]), float(pose[1]), float(pose[2])),
            speed=float(speed),
            obstacles=tuple(o.at_time(sim_time) for o in self.obstacles),
            instruction=self.instruction_at(s),
            frame=frame,
            scenario=self.name,
            time=float(sim_time),
        )


# ---- path construction ----------------------------------------------------


def _walk(start: np.ndarray, heading: float, segments, step: float = 0.5) -> np.ndarray:
    """Trace straight and arc segments into a dense polyline."""
    pts = [np.asarray(start, dtype=np.float64)]
    pos = pts[0].copy()
    for seg in segments:
        if seg[0] == "line":
            length = seg[1]
            n = max(1, int(math.ceil(length / step)))
            d = np.array([math.cos(heading), math.sin(heading)])
            for i in range(1, n + 1):
                pts.append(pos + d * (length * i / n))
            pos = pts[-1].copy()
        elif seg[0] == "arc":
            radius, angle = seg[1], seg[2]
            n = max(2, int(math.ceil(abs(radius * angle) / step)))
            side = 1.0 if angle > 0 else -1.0
            center = pos + radius * np.array([-math.sin(heading), math.cos(heading)]) * side
            base = math.atan2(pos[1] - center[1], pos[0] - center[0])
            for i in range(1, n + 1):
                a = base + angle * i / n
                pts.append(center + radius * np.array([math.cos(a), math.sin(a)]))
            heading += angle
            pos = pts[-1].copy()
        else:
            raise ScenarioError(f"unknown path segment {seg[0]!r}")
    return np.array(pts)


def _lateral_profile(length: float, profile, step: float = 0.5) -> np.ndarray:
    """Straight +x path with a lateral offset profile y = f(s)."""
    n = int(math.ceil(length / step))
    s = np.linspace(0.0, length, n + 1)
    return np.stack([s, profile(s)], axis=1)


def _transform(points: np.ndarray, origin: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T + origin


def _extend_tail(points: np.ndarray, extra: float = 30.0) -> np.ndarray:
    d = points[-1] - points[-2]
    d = d / np.hypot(*d)
    return np.vstack([points, points[-1] + d * extra])


def _side_props(rng: np.random.Generator, length: float, count: int) -> list[Obstacle]:
    """Parked stuff well off the corridor, for obstacle-feature variety."""
    props = []
    for _ in range(count):
        s = rng.uniform(10.0, max(11.0, length - 10.0))
        side = 1.0 if rng.random() < 0.5 else -1.0
        offset = side * rng.uniform(6.0, 9.0)
        kind = "vehicle" if rng.random() < 0.7 else "pedestrian"
        size = (4.4, 1.9) if kind == "vehicle" else (0.5, 0.5)
        props.append(Obstacle(x=s, y=offset, yaw=rng.uniform(-0.3, 0.3),
                              length=size[0], width=size[1], kind=kind))
    return props


def build_scenario(kind: str, seed: int) -> Scenario:
    """Deterministic scenario geometry for (kind, seed)."""
    if kind not in SCENARIO_KINDS:
        raise ScenarioError(f"unknown scenario kind {kind!r}, expected one of {SCENARIO_KINDS}")
    rng = np.random.default_rng(np.random.SeedSequence([SCENARIO_KINDS.index(kind), seed]))
    origin = rng.uniform(-40.0, 40.0, size=2)
    base_yaw = rng.uniform(-math.pi, math.pi)
    cruise = rng.uniform(5.5, 9.0)
    name = f"{kind}_{seed:05d}"
    instruction_until: list[tuple[float, int]] = []

    if kind == "straight":
        length = rng.uniform(80.0, 100.0)
        local = _walk(np.zeros(2), 0.0, [("line", length)])
        obstacles = _side_props(rng, length, int(rng.integers(0, 3)))
        guide_local = local

    elif kind in ("left_turn", "right_turn"):
        sign = 1.0 if kind == "left_turn" else -1.0
        entry = rng.uniform(24.0, 34.0)
        radius = rng.uniform(12.0, 20.0)
        exit_len = rng.uniform(24.0, 34.0)
        local = _walk(np.zeros(2), 0.0, [
            ("line", entry),
            ("arc", radius, sign * math.pi / 2.0),
            ("line", exit_len),
        ])
        obstacles = _side_props(rng, entry, int(rng.integers(0, 2)))
        turn_end = entry + radius * math.pi / 2.0
        instr = 2 if kind == "left_turn" else 3
        instruction_until = [(turn_end, instr)]
        guide_local = local

    elif kind in ("lane_change_left", "lane_change_right"):
        sign = 1.0 if kind == "lane_change_left" else -1.0
        entry = rng.uniform(24.0, 32.0)
        ramp = rng.uniform(20.0, 28.0)
        exit_len = rng.uniform(28.0, 36.0)
        shift = sign * 3.5
        length = entry + ramp + exit_len

        def profile(s, entry=entry, ramp=ramp, shift=shift):
            t = np.clip((s - entry) / ramp, 0.0, 1.0)
            return shift * 0.5 * (1.0 - np.cos(math.pi * t))

        local = _lateral_profile(length, profile)
        obstacles = _side_props(rng, length, int(rng.integers(0, 3)))
        instr = 4 if kind == "lane_change_left" else 5
        instruction_until = [(entry + ramp, instr)]
        guide_local = local

    elif kind == "fork":
        trunk = rng.uniform(30.0, 38.0)
        angle = math.radians(rng.uniform(18.0, 24.0))
        blend_r = rng.uniform(22.0, 28.0)
        branch_total = 45.0
        take_left = seed % 2 == 0
        def branch(sign):
            tail = branch_total - blend_r * angle
            return _walk(np.zeros(2), 0.0, [
                ("line", trunk),
                ("arc", blend_r, sign * angle),
                ("line", tail),
            ])
        chosen_local = branch(1.0 if take_left else -1.0)
        other_local = branch(-1.0 if take_left else 1.0)
        guide_local = _walk(np.zeros(2), 0.0, [("line", trunk + branch_total)])
        wedge_s = trunk + 16.0
        obstacles = [Obstacle(x=wedge_s, y=0.0, yaw=0.0, length=3.0, width=1.0,
                              kind="static")]
        local = chosen_local

    elif kind == "obstacle_avoid":
        length = rng.uniform(85.0, 100.0)
        s_obs = rng.uniform(40.0, 55.0)
        bump = rng.uniform(2.4, 2.8)
        half = 14.0

        def profile(s, s_obs=s_obs, bump=bump, half=half):
            t = np.clip((s - (s_obs - half)) / (2.0 * half), 0.0, 1.0)
            return bump * np.sin(math.pi * t) ** 2

        local = _lateral_profile(length, profile)
        blocker = Obstacle(x=s_obs, y=rng.uniform(-0.7, -0.2), yaw=0.0,
                           length=4.5, width=1.9, kind="vehicle")
        obstacles = [blocker] + _side_props(rng, length, int(rng.integers(0, 2)))
        guide_local = local

    route_pts = _transform(local, origin, base_yaw)
    guide_pts = _transform(_extend_tail(guide_local), origin, base_yaw)
    obstacles = [
        replace(o, **dict(zip(("x", "y"), _transform(np.array([[o.x, o.y]]), origin, base_yaw)[0])),
                yaw=o.yaw + base_yaw)
        for o in obstacles
    ]
    scenario = Scenario(
        kind=kind, seed=seed, name=name,
        route=Polyline(route_pts),
        guide=Polyline(guide_pts),
        alt_route=Polyline(_transform(other_local, origin, base_yaw)) if kind == "fork" else None,
        obstacles=obstacles,
        cruise_speed=cruise,
        speed_limit=min(cruise + 2.5, 12.0),
        corridor_half_width=5.0,
        instruction_until=instruction_until,
    )
    return scenario


# ---- labeling -------------------------------------------------------------


def _label_for(scenario: Scenario, route: Polyline, s: float) -> LateralAction:
    """Desk labeling taxonomy, a pure function of route geometry ahead."""
    kind = scenario.kind
    if kind in ("left_turn", "right_turn"):
        h0 = route.heading_at(s)
        h1 = route.heading_at(s + HORIZON * scenario.cruise_speed)
        swing = math.remainder(h1 - h0, math.tau)
        if abs(swing) > TURN_LABEL_RAD:
            return LateralAction.LEFT if swing > 0 else LateralAction.RIGHT
        return LateralAction.LANE_FOLLOW
    if kind in ("lane_change_left", "lane_change_right", "obstacle_avoid"):
        # lateral shift measured against the entry direction, which is the
        # lane axis for these profile-built kinds; using the local tangent
        # instead would read the ramp's straightening-out as a counter-shift
        start = route.points[0]
        h_lane = route.heading_at(0.0)
        frame = (float(start[0]), float(start[1]), h_lane)
        here = world_to_ego(route.point_at(s)[None, :], frame)[0]
        ahead = world_to_ego(route.point_at(s + HORIZON * scenario.cruise_speed)[None, :], frame)[0]
        shift = ahead[1] - here[1]
        if shift > SHIFT_LABEL_M:
            return LateralAction.LANE_CHANGE_LEFT
        if shift < -SHIFT_LABEL_M:
            return LateralAction.LANE_CHANGE_RIGHT
        return LateralAction.LANE_FOLLOW
    if kind == "fork":
        end = route.point_at(s + HORIZON * scenario.cruise_speed)
        offset = scenario.guide.signed_offset(end)
        if offset > FORK_LABEL_M:
            return LateralAction.LEFT
        if offset < -FORK_LABEL_M:
            return LateralAction.RIGHT
        return LateralAction.LANE_FOLLOW
    return LateralAction.LANE_FOLLOW


def _fork_branch_for(scenario: Scenario, position: np.ndarray) -> Polyline:
    """Pick the branch a committed ego should keep following."""
    if scenario.alt_route is None:
        return scenario.route
    offset = scenario.guide.signed_offset(position)
    if abs(offset) <= FORK_LABEL_M:
        return scenario.route
    chosen_is_left = scenario.seed % 2 == 0
    wants_left = offset > 0
    return scenario.route if wants_left == chosen_is_left else scenario.alt_route


def _gt_trajectory(route: Polyline, s: float, cruise: float, pose) -> Trajectory:
    world = np.stack([route.point_at(s + cruise * WAYPOINT_DT * (k + 1))
                      for k in range(T_WAYPOINTS)])
    return Trajectory(world_to_ego(world, pose))


def generate_scenario(seed: int, kind: str, augment: int = 0,
                      record_stride: int = 5) -> tuple[list[SceneState], TrajectoryDataset]:
    """Run the scripted expert over the scenario and emit aligned
    (scene, record) pairs: scene i is exactly what the planner would have
    seen when record i's trajectory was the right answer.

    ``augment`` adds that many laterally/heading-perturbed variants per
    sampled frame; their ground truth leads back onto the route, and on a
    fork a perturbation that has clearly committed past the divergence
    re-targets the branch on its own side.
    """
    scenario = build_scenario(kind, seed)
    rng = np.random.default_rng(np.random.SeedSequence([101, SCENARIO_KINDS.index(kind), seed]))
    route = scenario.route
    cruise = scenario.cruise_speed
    scenes: list[SceneState] = []
    records: list[DatasetRecord] = []
    frame = 0
    steps = int(route.length / (cruise * FRAME_DT))
    for i in range(0, steps + 1, record_stride):
        s = cruise * FRAME_DT * i
        if s + HORIZON * cruise > route.length:
            break
        sim_time = i * FRAME_DT
        base_pos = route.point_at(s)
        base_yaw = route.heading_at(s)
        variants = [(0.0, 0.0, 0.0)]
        for _ in range(augment):
            variants.append((rng.uniform(-0.8, 0.8), rng.uniform(-0.12, 0.12),
                             rng.uniform(-1.0, 1.0)))
        for lateral, dyaw, dv in variants:
            normal = np.array([-math.sin(base_yaw), math.cos(base_yaw)])
            pos = base_pos + lateral * normal
            pose = (float(pos[0]), float(pos[1]), base_yaw + dyaw)
            speed = max(1.0, cruise + dv)
            gt_route = _fork_branch_for(scenario, pos) if kind == "fork" else route
            s_here, _ = gt_route.project(pos)
            traj = _gt_trajectory(gt_route, s_here, cruise, pose)
            label = _label_for(scenario, gt_route, s_here)
            scenes.append(scenario.scene(pose, speed, frame, sim_time))
            records.append(DatasetRecord(
                trajectory=traj, action=label,
                ego=EgoStatus(speed=speed, yaw=pose[2]),
                scenario=scenario.name, frame=frame,
            ))
            frame += 1
    meta = {"scenario": scenario.name, "kind": kind, "seed": seed,
            "cruise_speed": cruise, "augment": augment,
            "record_stride": record_stride}
    return scenes, TrajectoryDataset(records=records, meta=meta)


# ---- scene files -----------------------------------------------------------


def save_scenes(path: str | Path, scenes: list[SceneState],
                scenario: Scenario, extra_meta: dict | None = None) -> None:
    """Scene sidecar: shared geometry in the header, one ego line per scene."""
    header = {
        "kind": "scene-file",
        "scenario": scenario.name,
        "scenario_kind": scenario.kind,
        "seed": scenario.seed,
        "route": scenario.guide.points.tolist(),
        "obstacles": [dataclasses.asdict(o) for o in scenario.obstacles],
        **(extra_meta or {}),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for sc in scenes:
        lines.append(json.dumps({
            "ego": [sc.ego[0], sc.ego[1], sc.ego[2]],
            "speed": sc.speed,
            "instruction": sc.instruction,
            "frame": sc.frame,
            "time": sc.time,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scenes(path: str | Path) -> list[SceneState]:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"no scene file at {path}")
    scenes: list[SceneState] = []
    header = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ScenarioError(f"{path}:{lineno}: not valid JSON ({err})") from None
            if lineno == 1:
                if obj.get("kind") != "scene-file":
                    raise ScenarioError(f"{path}:1: missing scene-file header")
                header = obj
                continue
            try:
                t = float(obj["time"])
                obstacles = tuple(Obstacle(**o).at_time(t) for o in header["obstacles"])
                scenes.append(SceneState(
                    route=np.array(header["route"], dtype=np.float64),
                    ego=tuple(float(v) for v in obj["ego"]),
                    speed=float(obj["speed"]),
                    obstacles=obstacles,
                    instruction=int(obj["instruction"]),
                    frame=int(obj["frame"]),
                    scenario=str(header["scenario"]),
                    time=t,
                ))
            except (KeyError, TypeError, ValueError) as err:
                raise ScenarioError(f"{path}:{lineno}: bad scene ({err})") from None
    return scenes
