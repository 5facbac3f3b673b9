"""Water-plane boat kinematics and the camera-target latching loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import numpy as np

from .estimation import (
    DEFAULT_D_REF_MM,
    DEFAULT_WINDOW,
    BundleEstimate,
    FilterWindow,
    estimate_bundle,
    estimate_leader_only,
)
from .geometry import (
    BundleGeometry,
    CameraIntrinsics,
    PlanarPose,
    Pose6D,
    heading_frame,
    to_planar,
    wrap_deg,
)
from .simulator import NoiseProfile, rng_for, simulate_frame

CH_RECOVERY = 7
CH_DRIFT = 8

# localisation accuracy of the lidar used to reach the recovery waypoint
RECOVERY_WAYPOINT_NOISE_MM = 100.0


@dataclass(frozen=True)
class LatchThresholds:
    dx_max: float
    dy_max: float
    yaw_max: float

    def __post_init__(self):
        if min(self.dx_max, self.dy_max, self.yaw_max) <= 0:
            raise ValueError("thresholds must be positive")


INDOOR_THRESHOLDS = LatchThresholds(10.0, 40.0, 27.5)
OUTDOOR_THRESHOLDS = LatchThresholds(500.0, 40.0, 27.5)


@dataclass(frozen=True)
class BoatState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # surge, sway mm/s; yaw deg/s

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_deg(self.heading))

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Command:
    surge: float = 0.0  # mm/s, forward
    sway: float = 0.0  # mm/s, to starboard (camera +X)
    yaw_rate: float = 0.0  # deg/s, counter-clockwise seen from above


@dataclass(frozen=True)
class BoatLimits:
    surge: float = 300.0
    sway: float = 150.0
    yaw_rate: float = 15.0


def step_boat(state: BoatState, cmd: Command, dt: float, limits: BoatLimits = BoatLimits()) -> BoatState:
    """First-order holonomic integration of saturated body-frame velocities."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = float(np.clip(cmd.surge, -limits.surge, limits.surge))
    v = float(np.clip(cmd.sway, -limits.sway, limits.sway))
    r = float(np.clip(cmd.yaw_rate, -limits.yaw_rate, limits.yaw_rate))
    h = np.radians(state.heading)
    # starboard is (sin h, -cos h) with world +Z up
    x = state.x + (u * np.cos(h) + v * np.sin(h)) * dt
    y = state.y + (u * np.sin(h) - v * np.cos(h)) * dt
    return BoatState(x, y, state.heading + r * dt, (u, v, r))


@dataclass(frozen=True)
class GuidanceGains:
    k_x: float = 0.8
    k_y: float = 1.5
    k_psi: float = 1.0
    creep: float = 40.0  # mm/s floor on surge while outside the standoff
    align_dy: float = 150.0  # surge fades to 0 as |d_y| approaches this
    limits: BoatLimits = BoatLimits()


def guidance(planar: PlanarPose, gains: GuidanceGains = GuidanceGains(), dx_standoff: float = 0.0) -> Command:
    """Proportional visual-servo command; every term drives its error to zero.

    ``d_y > 0`` (tag to starboard) asks for starboard sway; ``psi > 0`` asks
    for a clockwise turn.
    """
    ex = planar.d_x - dx_standoff
    surge = gains.k_x * ex
    if ex > 0:
        surge = max(surge, gains.creep)
        surge *= float(np.clip(1.0 - abs(planar.d_y) / gains.align_dy, 0.0, 1.0))
    lim = gains.limits
    return Command(
        float(np.clip(surge, -lim.surge, lim.surge)),
        float(np.clip(gains.k_y * planar.d_y, -lim.sway, lim.sway)),
        float(np.clip(-gains.k_psi * planar.psi, -lim.yaw_rate, lim.yaw_rate)),
    )


def check_latch(planar: PlanarPose, th: LatchThresholds) -> bool:
    return planar.d_x < th.dx_max and abs(planar.d_y) < th.dy_max and abs(planar.psi) < th.yaw_max


# --------------------------------------------------------------------------
# estimator plumbing


class StreamEstimator:
    """Per-camera-stream estimator: ``classic_single`` or ``bundle3d``."""

    def __init__(
        self,
        bundle: BundleGeometry,
        k: CameraIntrinsics,
        mode: str = "bundle3d",
        window: int = DEFAULT_WINDOW,
        d_ref_mm: float = DEFAULT_D_REF_MM,
        fusion: str = "weighted",
    ):
        if mode not in ("classic_single", "bundle3d"):
            raise ValueError(f"unknown estimator {mode!r}")
        self.bundle = bundle
        self.k = k
        self.mode = mode
        self.window = window
        self.d_ref_mm = d_ref_mm
        self.fusion = fusion
        self.win = FilterWindow(window)

    def reset(self) -> None:
        self.win = FilterWindow(self.window)

    def update(self, dets, bundle: BundleGeometry | None = None) -> BundleEstimate | None:
        b = bundle or self.bundle
        if self.mode == "classic_single":
            return estimate_leader_only(dets, b, self.k)
        return estimate_bundle(dets, b, self.k, self.win, self.d_ref_mm, self.fusion)


# --------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class LatchScenario:
    """Everything a docking episode needs besides the estimator and noise."""

    bundle: BundleGeometry
    k: CameraIntrinsics
    thresholds: LatchThresholds = INDOOR_THRESHOLDS
    start: PlanarPose = PlanarPose(1800.0, 0.0, 0.0)
    camera_setback_mm: float = 0.0  # camera-to-contact offset along the boresight
    dx_standoff: float = 0.0
    gains: GuidanceGains = GuidanceGains()
    tick_hz: float = 30.0
    lost_timeout_s: float = 0.7
    hold_s: float = 0.3
    attempt_timeout_s: float = 40.0
    retreat_speed: float = 400.0
    target_drift_mm: float = 0.0  # amplitude of the tag carrier's station-keeping wander
    target_drift_period_s: float = 20.0


@dataclass(frozen=True)
class TraceRow:
    tick: int
    attempt: int
    truth: PlanarPose
    estimate: PlanarPose | None
    command: Command


@dataclass
class EpisodeResult:
    success: bool
    attempts: int
    frames: int
    final_planar: PlanarPose
    yaw_errors: list[float] = field(default_factory=list)
    detected_frames: int = 0
    vision_frames: int = 0
    trace: list[TraceRow] = field(default_factory=list)
    outcomes: list[str] = field(default_factory=list)


def world_from_target(sc: LatchScenario, seed: int, t_s: float) -> Pose6D:
    """Tag carrier pose in the world; at rest it sits at the origin facing -X."""
    if sc.target_drift_mm == 0.0:
        return heading_frame(0.0)
    ph = rng_for(seed, 0, 0, CH_DRIFT).uniform(0.0, 2.0 * np.pi, size=2)
    w = 2.0 * np.pi * t_s / sc.target_drift_period_s
    dx = sc.target_drift_mm * np.sin(w + ph[0])
    dy = sc.target_drift_mm * np.sin(0.7 * w + ph[1])
    return heading_frame(0.0, (dx, dy, 0.0))


def camera_from_target(state: BoatState, world_target: Pose6D) -> Pose6D:
    return heading_frame(state.heading, (state.x, state.y, 0.0)).inverse() @ world_target


def start_state(sc: LatchScenario) -> BoatState:
    """Boat pose that sees the resting target at ``sc.start``."""
    p = sc.start
    # place the camera so that to_planar(camera_from_target) == start
    d_cam = p.d_x + sc.camera_setback_mm
    h = p.psi
    # tag position in camera coords, rotated into world
    hr = np.radians(h)
    fwd = np.array([np.cos(hr), np.sin(hr)])
    right = np.array([np.sin(hr), -np.cos(hr)])
    pos = -(d_cam * fwd + p.d_y * right)
    return BoatState(float(pos[0]), float(pos[1]), h)


def latch_planar(planar: PlanarPose, sc: LatchScenario) -> PlanarPose:
    return PlanarPose(planar.d_x - sc.camera_setback_mm, planar.d_y, planar.psi)


def run_episode(
    sc: LatchScenario,
    profile: NoiseProfile,
    estimator: StreamEstimator,
    max_attempts: int = 10,
    initial: BoatState | None = None,
    keep_trace: bool = False,
) -> EpisodeResult:
    """Approach, latch or fail, retreat and retry until success or the budget runs out."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    dt = 1.0 / sc.tick_hz
    seed = profile.seed
    home = initial or start_state(sc)
    lost_limit = int(round(sc.lost_timeout_s * sc.tick_hz))
    hold_ticks = int(round(sc.hold_s * sc.tick_hz))
    max_ticks = int(round(sc.attempt_timeout_s * sc.tick_hz))

    frame = 0
    yaw_errors: list[float] = []
    trace: list[TraceRow] = []
    outcomes: list[str] = []
    detected = vision = 0
    state = home
    final = to_planar(camera_from_target(state, world_from_target(sc, seed, 0.0)))

    for attempt in range(1, max_attempts + 1):
        estimator.reset()
        last_cmd = Command()
        lost = 0
        outcome = "timeout"
        for _ in range(max_ticks):
            target = world_from_target(sc, seed, frame * dt)
            truth = camera_from_target(state, target)
            if truth.translation[2] <= 0:
                outcome = "lost"
                break
            truth_planar = latch_planar(to_planar(truth), sc)
            final = truth_planar
            if truth_planar.d_x < sc.thresholds.dx_max:
                outcome = "latched" if check_latch(truth_planar, sc.thresholds) else "missed"
                break
            sim = simulate_frame(truth, sc.bundle, sc.k, profile, frame)
            est = estimator.update(sim.detections)
            vision += 1
            est_planar = None
            if est is not None:
                detected += 1
                lost = 0
                est_planar = latch_planar(to_planar(est.pose), sc)
                yaw_errors.append(wrap_deg(est_planar.psi - to_planar(sim.truth).psi))
                cmd = guidance(est_planar, sc.gains, sc.dx_standoff)
            else:
                lost += 1
                cmd = last_cmd if lost <= hold_ticks else Command()
                if lost > lost_limit:
                    outcome = "lost"
                    break
            if keep_trace:
                trace.append(TraceRow(frame, attempt, truth_planar, est_planar, cmd))
            last_cmd = cmd
            state = step_boat(state, cmd, dt, sc.gains.limits)
            frame += 1
        outcomes.append(outcome)
        if outcome == "latched":
            return EpisodeResult(True, attempt, frame, final, yaw_errors, detected, vision, trace, outcomes)
        if attempt == max_attempts:
            break
        state, frame = _recover(state, home, sc, seed, attempt, frame)
    return EpisodeResult(False, max_attempts, frame, final, yaw_errors, detected, vision, trace, outcomes)


def recovery_waypoint(home: BoatState, seed: int, attempt: int) -> BoatState:
    g = rng_for(seed, attempt, 0, CH_RECOVERY)
    dx, dy = g.uniform(-RECOVERY_WAYPOINT_NOISE_MM, RECOVERY_WAYPOINT_NOISE_MM, size=2)
    return BoatState(home.x + dx, home.y + dy, home.heading)


def _recover(state: BoatState, home: BoatState, sc: LatchScenario, seed: int, attempt: int, frame: int):
    """Straight-line retreat to a noisy copy of the start pose; consumes ticks."""
    goal = recovery_waypoint(home, seed, attempt)
    dist = float(np.hypot(goal.x - state.x, goal.y - state.y))
    ticks = max(1, int(np.ceil(dist / sc.retreat_speed * sc.tick_hz)))
    return goal, frame + ticks


# --------------------------------------------------------------------------
# traces

TRACE_COLUMNS = (
    "tick", "attempt",
    "true_dx_mm", "true_dy_mm", "true_psi_deg",
    "est_dx_mm", "est_dy_mm", "est_psi_deg",
    "surge_mm_s", "sway_mm_s", "yaw_rate_deg_s",
)


def write_trace(path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            e = r.estimate
            w.writerow(
                [r.tick, r.attempt, f"{r.truth.d_x:.3f}", f"{r.truth.d_y:.3f}", f"{r.truth.psi:.4f}"]
                + ([f"{e.d_x:.3f}", f"{e.d_y:.3f}", f"{e.psi:.4f}"] if e else ["", "", ""])
                + [f"{r.command.surge:.3f}", f"{r.command.sway:.3f}", f"{r.command.yaw_rate:.4f}"]
            )
