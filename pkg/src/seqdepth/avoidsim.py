"""Closed-loop sense-and-avoid: a planar vehicle steered only by depth maps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import SimulationError
from .network import DepthNet, frame_to_input, output_to_depth8
from .scenegen import Box, CameraRig, Scene, quantize_depth, render_frame

FORWARD = "forward"
STOP_AND_TURN = "stop_and_turn"
LEFT, RIGHT = "left", "right"


class Command(NamedTuple):
    action: str
    direction: str | None = None


@dataclass
class PolicyParams:
    stop_threshold: int = 23  # pixel units; 23/255 * 50 m ~ 4.5 m
    col_window: tuple[float, float] = (1 / 3, 2 / 3)
    row_window: tuple[float, float] = (1 / 4, 3 / 4)


@dataclass
class VehicleParams:
    speed: float = 2.0
    dt: float = 0.25
    turn_rate: float = math.radians(60)
    radius: float = 0.5


@dataclass
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = 2.0
    status: str = "running"
    steps: int = 0


def _gray(depth):
    d = np.asarray(depth, dtype=np.float64)
    return d.mean(axis=0) if d.ndim == 3 else d


def policy_decide(depth, params: PolicyParams | None = None) -> Command:
    """Go forward unless the central window holds something nearer than the threshold;
    then turn toward the image half with the larger mean depth (ties go left)."""
    params = params or PolicyParams()
    d = _gray(depth)
    h, w = d.shape
    r0, r1 = int(h * params.row_window[0]), int(h * params.row_window[1])
    c0, c1 = int(w * params.col_window[0]), int(w * params.col_window[1])
    if d[r0:r1, c0:c1].min() >= params.stop_threshold:
        return Command(FORWARD)
    left, right = d[:, : w // 2].mean(), d[:, w // 2:].mean()
    return Command(STOP_AND_TURN, LEFT if left >= right else RIGHT)


def clearance(course, x, y):
    if not course.scene.boxes:
        return math.inf
    return min(b.footprint_distance(x, y) for b in course.scene.boxes)


def step_vehicle(state: VehicleState, command: Command, dt: float, course=None,
                 vehicle: VehicleParams | None = None) -> VehicleState:
    """Advance one control step; with a course, also update the terminal status."""
    if state.status != "running":
        raise SimulationError(f"cannot step a vehicle that has {state.status}")
    vehicle = vehicle or (course.vehicle if course is not None else VehicleParams())
    x, y, heading = state.x, state.y, state.heading
    if command.action == FORWARD:
        x += state.speed * dt * math.cos(heading)
        y += state.speed * dt * math.sin(heading)
    elif command.action == STOP_AND_TURN:
        sign = 1.0 if command.direction == LEFT else -1.0
        heading = (heading + sign * vehicle.turn_rate * dt) % (2 * math.pi)
    else:
        raise SimulationError(f"unknown command {command!r}")
    new = VehicleState(x, y, heading, state.speed, "running", state.steps + 1)
    if course is not None:
        if clearance(course, x, y) < vehicle.radius:
            new.status = "crashed"
        elif y >= course.finish_y:
            new.status = "finished"
        elif new.steps >= course.time_limit:
            new.status = "timed_out"
    return new


# -- depth sources -----------------------------------------------------------------

class OracleDepth:
    """Ground-truth quantized depth."""

    name = "oracle"

    def reset(self):
        pass

    def __call__(self, rgb, true_depth8):
        return true_depth8


class NetworkDepth:
    """Recurrent network inference, state carried across steps of one trial."""

    name = "network"

    def __init__(self, net: DepthNet, reset_every_frame=False):
        self.net = net
        self.reset_every_frame = reset_every_frame

    def reset(self):
        self.net.reset_state()

    def __call__(self, rgb, true_depth8):
        if self.reset_every_frame:
            self.net.reset_state()
        out = self.net.forward_frame(frame_to_input(rgb, self.net.dtype))
        return output_to_depth8(out).mean(axis=0)


# -- course ------------------------------------------------------------------------------

CAR_SIZE = (4.5, 1.8, 1.5)


@dataclass
class Course:
    scene: Scene
    start_x: tuple[float, float] = (-1.5, 1.5)
    start_y: tuple[float, float] = (-5.0, 0.0)
    heading_jitter: float = math.radians(5)
    finish_y: float = 55.0
    time_limit: int = 2000
    rig: CameraRig = field(default_factory=CameraRig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    policy: PolicyParams = field(default_factory=PolicyParams)

    def start_state(self, rng):
        x = float(rng.uniform(*self.start_x))
        y = float(rng.uniform(*self.start_y))
        heading = math.pi / 2 + float(rng.uniform(-self.heading_jitter, self.heading_jitter))
        return VehicleState(x, y, heading, self.vehicle.speed)

    def validation_starts(self):
        for x in (self.start_x[0], sum(self.start_x) / 2, self.start_x[1]):
            for y in self.start_y:
                for dh in (-self.heading_jitter, 0.0, self.heading_jitter):
                    yield VehicleState(x, y, math.pi / 2 + dh, self.vehicle.speed)


def car(x, y, albedo):
    """A car parked across the road (long side along the crossrange axis)."""
    sx, sy, h = CAR_SIZE
    return Box.on_ground(x, y, sx, sy, h, albedo)


def default_course(rig=None, vehicle=None, policy=None, validate=True) -> Course:
    """Two cars blocking the road at 20 m and 40 m downrange, finish at 55 m."""
    scene = Scene(boxes=[car(-0.5, 20.0, (0.28, 0.51, 0.81)), car(1.0, 40.0, (0.65, 0.16, 0.16))])
    course = Course(scene, rig=rig or CameraRig(), vehicle=vehicle or VehicleParams(),
                    policy=policy or PolicyParams())
    if validate:
        validate_course(course)
    return course


@dataclass
class TrialResult:
    outcome: str  # finish | crash | timeout
    trajectory: list
    steps: int
    min_clearance: float
    stop_clearances: list = field(default_factory=list)

    def to_dict(self):
        return {"outcome": self.outcome, "steps": self.steps, "min_clearance": self.min_clearance}


_OUTCOME = {"finished": "finish", "crashed": "crash", "timed_out": "timeout"}


def run_trial(course: Course, source, rng=None, start: VehicleState | None = None,
              time_limit=None) -> TrialResult:
    limit = course.time_limit if time_limit is None else time_limit
    state = start or course.start_state(rng)
    source.reset()
    traj = [(state.x, state.y)]
    min_clear = clearance(course, state.x, state.y)
    stops = []
    prev_action = FORWARD
    if min_clear < course.vehicle.radius:
        state.status = "crashed"
    elif state.steps >= limit:
        state.status = "timed_out"
    sim = course if limit == course.time_limit else _with_limit(course, limit)
    while state.status == "running":
        pose = course.rig.pose(state.x, state.y, state.heading)
        rgb, z = render_frame(course.scene, pose)
        depth = source(rgb, quantize_depth(z, course.scene.max_range))
        cmd = policy_decide(depth, course.policy)
        if cmd.action == STOP_AND_TURN and prev_action == FORWARD:
            stops.append(clearance(course, state.x, state.y))
        prev_action = cmd.action
        state = step_vehicle(state, cmd, course.vehicle.dt, sim)
        traj.append((state.x, state.y))
        min_clear = min(min_clear, clearance(course, state.x, state.y))
    return TrialResult(_OUTCOME[state.status], traj, state.steps, min_clear, stops)


def _with_limit(course, limit):
    from dataclasses import replace
    return replace(course, time_limit=limit)


def validate_course(course: Course, validation_limit=2000):
    """Fly the oracle from every validation start; set the time limit to 4x its worst case."""
    worst = 0
    for start in course.validation_starts():
        res = run_trial(course, OracleDepth(), start=start, time_limit=validation_limit)
        if res.outcome != "finish":
            raise SimulationError(
                f"course invalid: oracle {res.outcome} from ({start.x:.2f}, {start.y:.2f}, "
                f"{math.degrees(start.heading):.1f} deg)"
            )
        worst = max(worst, res.steps)
    course.time_limit = 4 * worst
    return course


@dataclass
class SimSummary:
    finishes: int
    crashes: int
    timeouts: int
    trials: list

    @property
    def n_trials(self):
        return len(self.trials)

    def to_dict(self):
        return {"finishes": self.finishes, "crashes": self.crashes, "timeouts": self.timeouts,
                "n_trials": self.n_trials, "trials": [t.to_dict() for t in self.trials]}


def write_trajectory_csv(result: TrialResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in result.trajectory:
            w.writerow([f"{x:.4f}", f"{y:.4f}"])


def run_campaign(course: Course, source, n_trials=30, seed=0, out_dir=None, config_echo=None) -> SimSummary:
    if n_trials < 1:
        raise SimulationError("n_trials must be at least 1")
    results = [run_trial(course, source, np.random.default_rng([seed, i])) for i in range(n_trials)]
    counts = {k: sum(r.outcome == k for r in results) for k in ("finish", "crash", "timeout")}
    summary = SimSummary(counts["finish"], counts["crash"], counts["timeout"], results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(results):
            write_trajectory_csv(r, out / f"trajectory_{i:02d}.csv")
        data = summary.to_dict()
        data.update({"seed": seed, "source": getattr(source, "name", "custom"),
                     "course": {"finish_y": course.finish_y, "time_limit": course.time_limit,
                                "policy": asdict(course.policy), "vehicle": asdict(course.vehicle)}})
        if config_echo is not None:
            data["config"] = config_echo
        (out / "summary.json").write_text(json.dumps(data, indent=2, sort_keys=True))
    return summary
