"""Train-link formation driven only by the tag ids robots display to each other.

Each robot shows a tag bundle on its stern and watches the bundle of the robot
ahead. The id it shows encodes a message from a shared codebook; the robot
behind decodes it by majority vote over a short window of frames. Robots tick
in lock-step and every observation in tick ``t`` uses the tags displayed at
the end of tick ``t - 1``.
"""

from __future__ import annotations

import copy
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .estimation import DEFAULT_WINDOW, Detection, FilterWindow, estimate_bundle
from .geometry import (
    DEFAULT_INTRINSICS,
    BundleGeometry,
    CameraIntrinsics,
    PlanarPose,
    Pose6D,
    build_bundle,
    heading_frame,
    to_planar,
)
from .latching import (
    OUTDOOR_THRESHOLDS,
    BoatState,
    GuidanceGains,
    LatchThresholds,
    check_latch,
    guidance,
    recovery_waypoint,
    step_boat,
)
from .simulator import ZERO_NOISE, NoiseProfile, simulate_frame

STAND_BY = "STAND_BY"
FORM_TRAIN_LINK = "FORM_TRAIN_LINK"
LATCHED_FORM_TRAIN_LINK = "LATCHED_FORM_TRAIN_LINK"

TRAIN_LINK = "train_link"

TAG_CHANGED = "TAG_CHANGED"
LATCH_SUCCESS = "LATCH_SUCCESS"
LATCH_FAIL = "LATCH_FAIL"
PHASE = "PHASE"


class ConfigError(ValueError):
    """Scenario or codebook that cannot be run."""


class Phase(str, Enum):
    WAITING = "WAITING"
    APPROACHING = "APPROACHING"
    LATCHED = "LATCHED"


def form_message(formation: str) -> str:
    return f"FORM_{formation.upper()}"


def latched_message(formation: str) -> str:
    return f"LATCHED_FORM_{formation.upper()}"


def formation_of(message: str) -> str | None:
    """``"FORM_TRAIN_LINK"`` and ``"LATCHED_FORM_TRAIN_LINK"`` both give ``"train_link"``."""
    for prefix in ("LATCHED_FORM_", "FORM_"):
        if message.startswith(prefix):
            return message[len(prefix):].lower()
    return None


class TagCodebook:
    """Bijection between displayed base tag ids and messages."""

    def __init__(self, entries: dict[int, str], tags_per_bundle: int = 2):
        ids = [int(i) for i in entries]
        msgs = list(entries.values())
        if len(set(msgs)) != len(msgs):
            raise ConfigError("codebook maps two tag ids to the same message")
        if STAND_BY not in msgs:
            raise ConfigError("codebook needs a STAND_BY entry")
        ids_sorted = sorted(ids)
        # every bundle id base + slot must decode to exactly one entry
        if any(b - a < tags_per_bundle for a, b in zip(ids_sorted, ids_sorted[1:])):
            raise ConfigError(f"codebook ids must be at least {tags_per_bundle} apart")
        self._by_id = {int(i): m for i, m in entries.items()}
        self._by_msg = {m: int(i) for i, m in entries.items()}
        self.tags_per_bundle = tags_per_bundle

    @classmethod
    def default(cls, tags_per_bundle: int = 2) -> "TagCodebook":
        return cls({0: STAND_BY, 10: FORM_TRAIN_LINK, 20: LATCHED_FORM_TRAIN_LINK}, tags_per_bundle)

    def tag_for(self, message: str) -> int:
        try:
            return self._by_msg[message]
        except KeyError:
            raise ConfigError(f"no codebook entry for {message!r}") from None

    def message_for(self, tag_id: int) -> str | None:
        return self._by_id.get(int(tag_id))

    def decode(self, tag_id: int) -> tuple[int, int] | None:
        """``(base id, slot)`` of a displayed tag id, or ``None`` if unknown."""
        for base in self._by_id:
            slot = tag_id - base
            if 0 <= slot < self.tags_per_bundle:
                return base, slot
        return None

    def to_dict(self) -> dict[str, str]:
        return {str(i): m for i, m in sorted(self._by_id.items())}

    @classmethod
    def from_dict(cls, d: dict, tags_per_bundle: int = 2) -> "TagCodebook":
        try:
            return cls({int(k): str(v) for k, v in d.items()}, tags_per_bundle)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad codebook: {e}") from None


@dataclass
class SwarmRobot:
    id: int
    boat: BoatState
    displayed_tag: int
    phase: Phase = Phase.WAITING
    sees: int | None = None
    bundle: BundleGeometry = field(default_factory=lambda: build_bundle(130.0, 1, 10.0, 40.0))
    formation: str | None = None
    # runtime
    home: BoatState | None = None
    votes: deque = field(default_factory=lambda: deque(maxlen=DEFAULT_WINDOW))
    window: FilterWindow = field(default_factory=FilterWindow)
    lost: int = 0
    busy_until: int = -1  # retreat in progress until this tick
    attempts: int = 0

    @property
    def is_leader(self) -> bool:
        return self.sees is None


@dataclass
class Event:
    tick: int
    robot: int
    event: str
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tick": self.tick, "robot": self.robot, "event": self.event, **self.detail}


@dataclass
class FormationScenario:
    robots: list[SwarmRobot]
    codebook: TagCodebook
    formation: str = TRAIN_LINK
    spacing_mm: float = 1000.0
    hull_length_mm: float = 900.0
    order_tick: int | None = 1  # tick at which the leader is told to form up
    k: CameraIntrinsics = DEFAULT_INTRINSICS
    profile: NoiseProfile = ZERO_NOISE
    thresholds: LatchThresholds = OUTDOOR_THRESHOLDS
    dx_standoff: float = 500.0
    gains: GuidanceGains = GuidanceGains()
    tick_hz: float = 30.0
    lost_timeout_s: float = 0.7
    retreat_speed: float = 400.0
    events: list[Event] = field(default_factory=list)
    tick: int = 0

    def __post_init__(self):
        if self.spacing_mm <= 0:
            raise ConfigError("spacing must be positive")
        if self.formation != TRAIN_LINK:
            raise ConfigError(f"unsupported formation {self.formation!r}")
        ids = [r.id for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate robot ids")
        by_id = {r.id: r for r in self.robots}
        for r in self.robots:
            seen, cur = set(), r
            while cur.sees is not None:
                if cur.id in seen or cur.sees not in by_id:
                    raise ConfigError("visibility chain must be acyclic and reference known robots")
                seen.add(cur.id)
                cur = by_id[cur.sees]

    def robot(self, rid: int) -> SwarmRobot:
        return next(r for r in self.robots if r.id == rid)


def train_link_scenario(
    n: int,
    spacing_mm: float = 1000.0,
    profile: NoiseProfile = ZERO_NOISE,
    codebook: TagCodebook | None = None,
    **kw,
) -> FormationScenario:
    """``n`` robots in a line along world +X, robot 1 in front, all facing +X."""
    if n < 1:
        raise ConfigError("need at least one robot")
    cb = codebook or TagCodebook.default()
    hull = kw.get("hull_length_mm", 900.0)
    robots = []
    for i in range(1, n + 1):
        boat = BoatState(-(i - 1) * (spacing_mm + hull), 0.0, 0.0)
        robots.append(SwarmRobot(i, boat, cb.tag_for(STAND_BY), sees=i - 1 if i > 1 else None, home=boat))
    return FormationScenario(robots, cb, spacing_mm=spacing_mm, profile=profile, **kw)


def encode_state(robot: SwarmRobot, codebook: TagCodebook) -> int:
    if robot.phase == Phase.LATCHED:
        return codebook.tag_for(latched_message(robot.formation or TRAIN_LINK))
    if robot.is_leader and robot.formation is not None:
        return codebook.tag_for(form_message(robot.formation))
    return codebook.tag_for(STAND_BY)


def world_from_stern_bundle(robot: SwarmRobot, hull_length_mm: float) -> Pose6D:
    """The stern bundle faces backwards; its +Z points along the robot's heading."""
    h = np.radians(robot.boat.heading)
    pos = (robot.boat.x - hull_length_mm * np.cos(h), robot.boat.y - hull_length_mm * np.sin(h), 0.0)
    return heading_frame(robot.boat.heading, pos)


def camera_from_ahead(observer: SwarmRobot, ahead: SwarmRobot, hull_length_mm: float) -> Pose6D:
    cam = heading_frame(observer.boat.heading, (observer.boat.x, observer.boat.y, 0.0))
    return cam.inverse() @ world_from_stern_bundle(ahead, hull_length_mm)


def robot_profile(profile: NoiseProfile, robot_id: int) -> NoiseProfile:
    """Independent noise stream per observing robot."""
    seed = int(np.random.SeedSequence([profile.seed & (2**64 - 1), robot_id]).generate_state(1, np.uint64)[0])
    return profile.with_seed(seed)


def observe(
    observer: SwarmRobot,
    dets: list[Detection],
    codebook: TagCodebook,
    k: CameraIntrinsics,
) -> tuple[int, PlanarPose] | None:
    """Decode the ahead robot's message and pose from one frame of detections.

    Detections are mapped to bundle slots before estimation, so the filter
    history and the pose do not depend on which id the bundle shows.
    """
    canon = []
    ids = []
    for d in dets:
        dec = codebook.decode(d.tag_id)
        if dec is None:
            continue
        base, slot = dec
        if slot >= len(observer.bundle.placements):
            continue
        ids.append(base)
        canon.append(Detection(observer.bundle.placements[slot].tag_id, d.corners, d.frame_index))
    if not canon:
        return None
    # this frame's id, then the vote across the window
    frame_id = Counter(ids).most_common(1)[0][0]
    observer.votes.append(frame_id)
    est = estimate_bundle(canon, observer.bundle, k, observer.window)
    if est is None:
        return None
    return majority(observer.votes), to_planar(est.pose)


def majority(votes) -> int:
    """Most common id; ties go to the most recent of the tied ids."""
    counts = Counter(votes)
    best = max(counts.values())
    for v in reversed(votes):
        if counts[v] == best:
            return v
    raise ValueError("empty vote")


def _set_phase(sc: FormationScenario, r: SwarmRobot, phase: Phase) -> None:
    if r.phase != phase:
        sc.events.append(Event(sc.tick, r.id, PHASE, {"from": r.phase.value, "to": phase.value}))
        r.phase = phase


def _approach(sc: FormationScenario, r: SwarmRobot, planar: PlanarPose | None, truth: PlanarPose) -> None:
    dt = 1.0 / sc.tick_hz
    if truth.d_x < sc.thresholds.dx_max:
        r.attempts += 1
        if check_latch(truth, sc.thresholds):
            sc.events.append(Event(sc.tick, r.id, LATCH_SUCCESS, {"attempt": r.attempts}))
            _set_phase(sc, r, Phase.LATCHED)
        else:
            _fail(sc, r, "missed")
        return
    if planar is None:
        r.lost += 1
        if r.lost > int(round(sc.lost_timeout_s * sc.tick_hz)):
            r.attempts += 1
            _fail(sc, r, "lost")
        return
    r.lost = 0
    cmd = guidance(planar, sc.gains, sc.dx_standoff)
    r.boat = step_boat(r.boat, cmd, dt, sc.gains.limits)


def _fail(sc: FormationScenario, r: SwarmRobot, why: str) -> None:
    sc.events.append(Event(sc.tick, r.id, LATCH_FAIL, {"attempt": r.attempts, "reason": why}))
    home = r.home or r.boat
    goal = recovery_waypoint(home, sc.profile.seed + r.id, r.attempts)
    dist = float(np.hypot(goal.x - r.boat.x, goal.y - r.boat.y))
    r.busy_until = sc.tick + max(1, int(np.ceil(dist / sc.retreat_speed * sc.tick_hz)))
    r.boat = goal
    r.lost = 0
    r.window.clear()


def step_swarm(scenario: FormationScenario, tick: int | None = None) -> FormationScenario:
    """Advance every robot by one tick; returns a new scenario."""
    sc = copy.deepcopy(scenario)
    sc.tick = scenario.tick + 1 if tick is None else tick
    shown = {r.id: r.displayed_tag for r in scenario.robots}  # end of previous tick
    prev = {r.id: r for r in scenario.robots}

    for r in sc.robots:
        if r.is_leader:
            if sc.order_tick is not None and sc.tick >= sc.order_tick and r.formation is None:
                r.formation = sc.formation
            continue
        if r.phase == Phase.LATCHED or sc.tick < r.busy_until:
            continue
        ahead = prev[r.sees]
        truth_pose = camera_from_ahead(r, ahead, sc.hull_length_mm)
        bundle = r.bundle.with_base_id(shown[ahead.id])
        frame = simulate_frame(truth_pose, bundle, sc.k, robot_profile(sc.profile, r.id), sc.tick)
        seen = observe(r, frame.detections, sc.codebook, sc.k)
        msg = sc.codebook.message_for(seen[0]) if seen else None
        if r.phase == Phase.WAITING:
            f = formation_of(msg) if msg else None
            if f is not None:
                r.formation = f
                _set_phase(sc, r, Phase.APPROACHING)
                r.window.clear()
            continue
        _approach(sc, r, seen[1] if seen else None, to_planar(truth_pose))

    for r in sc.robots:
        tag = encode_state(r, sc.codebook)
        if tag != r.displayed_tag:
            sc.events.append(
                Event(sc.tick, r.id, TAG_CHANGED, {"from": r.displayed_tag, "to": tag, "message": sc.codebook.message_for(tag)})
            )
            r.displayed_tag = tag
    return sc


def formation_complete(scenario: FormationScenario) -> bool:
    return all(r.phase == Phase.LATCHED for r in scenario.robots if not r.is_leader)


@dataclass
class SwarmResult:
    complete: bool
    ticks: int
    events: list[Event]
    scenario: FormationScenario


def run_swarm(scenario: FormationScenario, max_ticks: int = 3000) -> SwarmResult:
    sc = scenario
    while sc.tick < max_ticks:
        sc = step_swarm(sc)
        if formation_complete(sc):
            return SwarmResult(True, sc.tick, sc.events, sc)
    return SwarmResult(False, sc.tick, sc.events, sc)


def write_events(path, events: list[Event]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# scenario files


def load_scenario(path, profile: NoiseProfile = ZERO_NOISE, **kw) -> FormationScenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read scenario {path}: {e}") from None
    return scenario_from_dict(doc, profile, base_dir=path.parent, **kw)


def scenario_from_dict(doc: dict, profile: NoiseProfile = ZERO_NOISE, base_dir=".", **kw) -> FormationScenario:
    try:
        robots_doc = doc["robots"]
        spacing = float(doc.get("spacing_mm", 1000.0))
        formation = doc.get("formation", TRAIN_LINK)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad scenario: {e}") from None
    if not isinstance(robots_doc, list) or not robots_doc:
        raise ConfigError("scenario needs a non-empty robots list")
    if not all(isinstance(rd, dict) and isinstance(rd.get("id"), int) for rd in robots_doc):
        raise ConfigError("every robot needs an integer id")
    bundles = []
    for rd in robots_doc:
        bf = rd.get("bundle_file")
        try:
            bundles.append(BundleGeometry.load(Path(base_dir) / bf) if bf else build_bundle(130.0, 1, 10.0, 40.0))
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"bundle_file {bf}: {e}") from None
    n_tags = max(len(b.placements) for b in bundles)
    cb = TagCodebook.from_dict(doc["codebook"], n_tags) if "codebook" in doc else TagCodebook.default(n_tags)
    hull = kw.pop("hull_length_mm", 900.0)
    robots = []
    for i, (rd, b) in enumerate(zip(robots_doc, bundles)):
        rid = int(rd["id"])
        sp = rd.get("start_pose")
        if sp is None:
            boat = BoatState(-i * (spacing + hull), 0.0, 0.0)
        else:
            boat = BoatState(float(sp["x"]), float(sp["y"]), float(sp.get("heading", 0.0)))
        sees = rd.get("sees", int(robots_doc[i - 1]["id"]) if i > 0 else None)
        robots.append(SwarmRobot(rid, boat, cb.tag_for(STAND_BY), sees=sees, bundle=b.with_base_id(0), home=boat))
    return FormationScenario(robots, cb, formation, spacing, hull_length_mm=hull, profile=profile, **kw)
