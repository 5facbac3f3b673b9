"""Experiment runner: static detection survey plus closed-loop episodes.

A run has two parts. The survey holds the camera at the scenario's start
pose and measures detection rate and yaw error frame by frame; this is what
the comparison table reports. The episodes then run the full loop
(docking or swarm formation) to measure success rate and attempts.

Work is cut into fixed chunks before it is handed to a process pool, and
results are reassembled in order, so the report does not depend on the
number of workers.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .estimation import FilterWindow, estimate_bundle, estimate_leader_only
from .geometry import (
    DEFAULT_INTRINSICS,
    BundleGeometry,
    CameraIntrinsics,
    PlanarPose,
    Pose6D,
    build_bundle,
    to_planar,
    wrap_deg,
)
from .latching import (
    INDOOR_THRESHOLDS,
    OUTDOOR_THRESHOLDS,
    GuidanceGains,
    LatchScenario,
    StreamEstimator,
    camera_from_target,
    run_episode,
    start_state,
    world_from_target,
)
from .simulator import NoiseProfile, SimFrame, dump_detections, simulate_frame
from .swarm import ConfigError, run_swarm, scenario_from_dict, train_link_scenario, write_events

SCENARIOS = ("indoor_dock", "outdoor_boats", "swarm_train")
ESTIMATORS = ("classic_single", "bundle3d")
SURVEY_CHUNK = 1000


# --------------------------------------------------------------------------
# noise profiles shipped with the package


def profile_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("tagbundle3d.profiles").iterdir() if p.name.endswith(".json"))


def load_profile(ref, base_dir: Path | None = None) -> NoiseProfile:
    """A shipped profile name, a path to a profile JSON file, or an inline dict."""
    if isinstance(ref, dict):
        doc = ref
    elif isinstance(ref, str) and ref in profile_names():
        doc = json.loads(resources.files("tagbundle3d.profiles").joinpath(f"{ref}.json").read_text())
    elif isinstance(ref, str):
        path = Path(ref) if base_dir is None else Path(base_dir) / ref
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"noise profile {ref!r}: {e}") from None
    else:
        raise ConfigError(f"noise_profile must be a name, path or object, got {ref!r}")
    doc = {k: v for k, v in doc.items() if not k.startswith("_")}
    try:
        return NoiseProfile.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"noise profile: {e}") from None


# --------------------------------------------------------------------------
# scenario definitions

# the carrier's station-keeping wander and the sway gain that tracks it
OUTDOOR_SWAY_GAIN = 3.0
OUTDOOR_DRIFT_PERIOD_S = 5.0

DEFAULT_BUNDLE = dict(leader_side=130.0, follower_count=1, g_deg=10.0, hinge_offset=40.0)


def default_bundle() -> BundleGeometry:
    return build_bundle(**DEFAULT_BUNDLE)


def latch_scenario(name: str, bundle: BundleGeometry, k: CameraIntrinsics) -> LatchScenario:
    if name == "indoor_dock":
        # dock-face tag; the funnel sits 500 mm ahead of the camera
        return LatchScenario(bundle, k, INDOOR_THRESHOLDS, PlanarPose(1800.0, 0.0, 0.0), camera_setback_mm=500.0)
    if name == "outdoor_boats":
        # tag mounted inside the carrier; the carrier holds station to about 100 mm
        return LatchScenario(
            bundle,
            k,
            OUTDOOR_THRESHOLDS,
            PlanarPose(2000.0, 0.0, 0.0),
            dx_standoff=500.0,
            gains=GuidanceGains(k_y=OUTDOOR_SWAY_GAIN),
            target_drift_mm=100.0,
            target_drift_period_s=OUTDOOR_DRIFT_PERIOD_S,
        )
    raise ConfigError(f"no latching scenario {name!r}")


# --------------------------------------------------------------------------
# config and report


@dataclass
class ExperimentConfig:
    scenario: str
    estimator: str
    noise_profile: NoiseProfile
    episodes: int = 100
    seed: int = 0
    survey_frames: int = 10_000
    max_attempts: int = 10
    swarm_robots: int = 3
    workers: int = 1
    dump_detections: bool = False
    bundle: BundleGeometry = field(default_factory=default_bundle)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    # swarm layout document and the directory its bundle files are relative to
    swarm_scenario: dict | None = None
    swarm_base_dir: str = "."

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.survey_frames < 0 or self.max_attempts < 1 or self.workers < 1:
            raise ConfigError("survey_frames >= 0, max_attempts >= 1 and workers >= 1 required")
        if self.swarm_robots < 2:
            raise ConfigError("swarm_robots must be >= 2")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        known = {
            "scenario", "estimator", "noise_profile", "episodes", "seed", "survey_frames",
            "max_attempts", "swarm_robots", "workers", "dump_detections", "bundle_file", "intrinsics",
            "scenario_file",
        }
        unknown = set(d) - known - {"description"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("scenario", "estimator", "noise_profile"):
            if key not in d:
                raise ConfigError(f"config lacks {key!r}")
        kw = {k: d[k] for k in ("episodes", "seed", "survey_frames", "max_attempts", "swarm_robots", "workers") if k in d}
        for k, v in kw.items():
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{k} must be an integer")
        if "bundle_file" in d:
            path = Path(d["bundle_file"]) if base_dir is None else Path(base_dir) / d["bundle_file"]
            try:
                kw["bundle"] = BundleGeometry.load(path)
            except (OSError, KeyError, ValueError) as e:
                raise ConfigError(f"bundle_file: {e}") from None
        if "intrinsics" in d:
            try:
                kw["intrinsics"] = CameraIntrinsics.from_dict(d["intrinsics"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"intrinsics: {e}") from None
        if "scenario_file" in d:
            path = Path(d["scenario_file"]) if base_dir is None else Path(base_dir) / d["scenario_file"]
            try:
                kw["swarm_scenario"] = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"scenario_file: {e}") from None
            kw["swarm_base_dir"] = str(path.parent)
            # validate now rather than inside a worker
            scenario_from_dict(kw["swarm_scenario"], base_dir=kw["swarm_base_dir"])
        return cls(
            scenario=d["scenario"],
            estimator=d["estimator"],
            noise_profile=load_profile(d["noise_profile"], base_dir),
            dump_detections=bool(d.get("dump_detections", False)),
            **kw,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "estimator": self.estimator,
            "noise_profile": self.noise_profile.to_dict(),
            "episodes": self.episodes,
            "seed": self.seed,
            "survey_frames": self.survey_frames,
            "max_attempts": self.max_attempts,
            "swarm_robots": self.swarm_robots,
            "bundle": self.bundle.to_dict(),
            "intrinsics": self.intrinsics.to_dict(),
            **({"swarm_scenario": self.swarm_scenario} if self.swarm_scenario is not None else {}),
        }


@dataclass
class Report:
    scenario: str
    estimator: str
    profile: str
    detection_pct: float
    yaw_rmse_deg: float
    yaw_max_abs_deg: float
    success_rate: float  # percent
    mean_attempts: float
    survey_frames: int
    episodes: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    SCALARS = ("detection_pct", "yaw_rmse_deg", "yaw_max_abs_deg", "success_rate", "mean_attempts")

    def __post_init__(self):
        for name in ("detection_pct", "success_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} outside [0, 100]: {v}")
        if self.yaw_rmse_deg < 0:
            raise ValueError("yaw_rmse_deg must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(_rounded(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "Report":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"cannot read report {path}: {e}") from None


def _rounded(obj, digits: int = 9):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj


# --------------------------------------------------------------------------
# work units (module level so they pickle)


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), index]).generate_state(1, np.uint64)[0])


def survey_pose(cfg: ExperimentConfig) -> Pose6D:
    """Camera-from-bundle at the scenario's start position."""
    if cfg.scenario == "swarm_train":
        return Pose6D((0.0, 0.0, 1000.0))
    sc = replace(latch_scenario(cfg.scenario, cfg.bundle, cfg.intrinsics), target_drift_mm=0.0)
    return camera_from_target(start_state(sc), world_from_target(sc, 0, 0.0))


def survey_chunk(cfg: ExperimentConfig, start: int, stop: int) -> tuple[list[bool], list[float], list[SimFrame]]:
    """Detections and yaw errors for frames ``[start, stop)`` with a fresh filter."""
    truth = survey_pose(cfg)
    profile = cfg.noise_profile.with_seed(cfg.seed)
    win = FilterWindow()
    hits, errors, frames = [], [], []
    for i in range(start, stop):
        sim = simulate_frame(truth, cfg.bundle, cfg.intrinsics, profile, i)
        if cfg.estimator == "classic_single":
            est = estimate_leader_only(sim.detections, cfg.bundle, cfg.intrinsics)
        else:
            est = estimate_bundle(sim.detections, cfg.bundle, cfg.intrinsics, win)
        hits.append(est is not None)
        if est is not None:
            errors.append(wrap_deg(to_planar(est.pose).psi - to_planar(sim.truth).psi))
        if cfg.dump_detections:
            frames.append(sim)
    return hits, errors, frames


def latch_episode(cfg: ExperimentConfig, index: int) -> dict:
    sc = latch_scenario(cfg.scenario, cfg.bundle, cfg.intrinsics)
    seed = episode_seed(cfg.seed, index)
    est = StreamEstimator(cfg.bundle, cfg.intrinsics, cfg.estimator)
    try:
        r = run_episode(sc, cfg.noise_profile.with_seed(seed), est, cfg.max_attempts)
    except Exception as e:  # recorded, never fatal for the batch
        return {"episode": index, "seed": seed, "error": f"{type(e).__name__}: {e}"}
    yaw = np.asarray(r.yaw_errors)
    return {
        "episode": index,
        "seed": seed,
        "success": r.success,
        "attempts": r.attempts,
        "frames": r.frames,
        "outcomes": r.outcomes,
        "final_dx_mm": r.final_planar.d_x,
        "final_dy_mm": r.final_planar.d_y,
        "final_psi_deg": r.final_planar.psi,
        "loop_detection_pct": 100.0 * r.detected_frames / max(1, r.vision_frames),
        "loop_yaw_rmse_deg": float(np.sqrt(np.mean(yaw**2))) if len(yaw) else 0.0,
    }


def swarm_episode(cfg: ExperimentConfig, index: int, keep_events: bool = False) -> dict:
    seed = episode_seed(cfg.seed, index)
    profile = cfg.noise_profile.with_seed(seed)
    if cfg.swarm_scenario is not None:
        sc = scenario_from_dict(cfg.swarm_scenario, profile, base_dir=cfg.swarm_base_dir, k=cfg.intrinsics)
    else:
        sc = train_link_scenario(cfg.swarm_robots, profile=profile, k=cfg.intrinsics)
        for r in sc.robots:
            r.bundle = cfg.bundle.with_base_id(0)
    try:
        res = run_swarm(sc, max_ticks=SWARM_MAX_TICKS_PER_ROBOT * len(sc.robots))
    except Exception as e:
        return {"episode": index, "seed": seed, "error": f"{type(e).__name__}: {e}"}
    latches = [e for e in res.events if e.event == "LATCH_SUCCESS"]
    attempts = [e.detail["attempt"] for e in latches]
    row = {
        "episode": index,
        "seed": seed,
        "success": res.complete,
        "attempts": float(np.mean(attempts)) if attempts else float(cfg.max_attempts),
        "frames": res.ticks,
        "tag_changes": sum(e.event == "TAG_CHANGED" for e in res.events),
        "latch_failures": sum(e.event == "LATCH_FAIL" for e in res.events),
    }
    if keep_events:
        row["_events"] = res.events
    return row


SWARM_MAX_TICKS_PER_ROBOT = 1800


def _call(job):
    fn, args = job
    return fn(*args)


def _map(jobs: list, workers: int) -> list:
    if workers == 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, jobs))


# --------------------------------------------------------------------------


def run(cfg: ExperimentConfig, out_dir=None) -> Report:
    """Survey plus episodes; writes report files when ``out_dir`` is given."""
    chunks = [(s, min(s + SURVEY_CHUNK, cfg.survey_frames)) for s in range(0, cfg.survey_frames, SURVEY_CHUNK)]
    episode_fn = swarm_episode if cfg.scenario == "swarm_train" else latch_episode
    jobs = [(survey_chunk, (cfg, a, b)) for a, b in chunks] + [(episode_fn, (cfg, i)) for i in range(cfg.episodes)]
    results = _map(jobs, cfg.workers)
    survey, rows = results[: len(chunks)], results[len(chunks):]

    hits = [h for c in survey for h in c[0]]
    yaw = np.array([e for c in survey for e in c[1]])
    ok = [r for r in rows if "error" not in r]
    report = Report(
        scenario=cfg.scenario,
        estimator=cfg.estimator,
        profile=cfg.noise_profile.name,
        detection_pct=100.0 * float(np.mean(hits)) if hits else 0.0,
        yaw_rmse_deg=float(np.sqrt(np.mean(yaw**2))) if len(yaw) else 0.0,
        yaw_max_abs_deg=float(np.max(np.abs(yaw))) if len(yaw) else 0.0,
        success_rate=100.0 * sum(bool(r["success"]) for r in ok) / len(rows),
        mean_attempts=float(np.mean([r["attempts"] for r in ok])) if ok else float("nan"),
        survey_frames=cfg.survey_frames,
        episodes=rows,
        config=cfg.to_dict(),
    )
    if out_dir is not None:
        write_outputs(report, cfg, Path(out_dir), [f for c in survey for f in c[2]])
    return report


def write_outputs(report: Report, cfg: ExperimentConfig, out: Path, frames: list[SimFrame]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "table.txt").write_text(table([report]))
    cols = sorted({k for r in report.episodes for k in r})
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in report.episodes:
            w.writerow({k: (json.dumps(v) if isinstance(v, list) else _rounded(v)) for k, v in r.items()})
    if frames:
        dump_detections(out / "detections.jsonl", frames, cfg.bundle, cfg.intrinsics)
    if cfg.scenario == "swarm_train":
        write_events(out / "events.jsonl", swarm_episode(cfg, 0, keep_events=True)["_events"])


# --------------------------------------------------------------------------
# tables

_PLACE = {"indoor_dock": "Indoors", "outdoor_boats": "Outdoors", "swarm_train": "Swarm"}
_METHOD = {"classic_single": "Single tag", "bundle3d": "Tag bundle"}


def table(reports: list[Report]) -> str:
    """Detection and yaw error grouped by scenario, one row per estimator."""
    lines = [f"{'':<14}| {'Tag detection %':>15} | {'Yaw RMSE (deg)':>14} | {'Yaw max (deg)':>13} | {'Success %':>9} | {'Attempts':>8}"]
    lines.append("-" * len(lines[0]))
    for scen in SCENARIOS:
        group = [r for r in reports if r.scenario == scen]
        if not group:
            continue
        lines.append(_PLACE[scen])
        for r in sorted(group, key=lambda r: ESTIMATORS.index(r.estimator)):
            lines.append(
                f"  {_METHOD[r.estimator]:<12}| {r.detection_pct:>15.1f} | {r.yaw_rmse_deg:>14.2f} | "
                f"{r.yaw_max_abs_deg:>13.2f} | {r.success_rate:>9.1f} | {r.mean_attempts:>8.2f}"
            )
    return "\n".join(lines) + "\n"


def compare(a: Report, b: Report) -> dict[str, float]:
    """``b - a`` for every report scalar; both must come from one scenario."""
    if a.scenario != b.scenario:
        raise ConfigError(f"cannot compare {a.scenario!r} with {b.scenario!r}")
    return {k: getattr(b, k) - getattr(a, k) for k in Report.SCALARS}


def compare_table(a: Report, b: Report) -> str:
    delta = compare(a, b)
    body = table([a, b]) if a.estimator != b.estimator else table([a]) + table([b])
    row = "  ".join(f"{k}={v:+.2f}" for k, v in delta.items())
    return body + f"delta ({_METHOD[b.estimator]} - {_METHOD[a.estimator]}): {row}\n"
