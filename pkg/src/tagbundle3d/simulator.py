"""Seeded generator of tag detections with corner jitter and specular glare.

Every random draw comes from a PCG64 stream keyed on ``(seed, frame, slot,
channel)``, so frame ``i`` is reproducible on its own and adding followers
does not disturb the leader's noise.

Glare model: each frame spawns ``Poisson(reflection_rate)`` light sources.
A light's travel direction is fixed relative to the carrier's *resting*
frame (azimuth/elevation plus Gaussian jitter). For every tag the light is
mirrored about the tag's current normal; the glint shows up in the image
where the mirrored ray meets the camera, as a disk of fixed pixel radius
(or, when ``reflection_radius_px`` is 0, a fraction of that tag's image
diagonal). Tags facing different ways therefore glint at different image
points, so one light rarely blinds a non-coplanar bundle.

With ``reflection_persistence_s > 0`` lights are not redrawn each frame:
they are born at a constant rate and live an exponential time.
"""

from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import Point, Polygon

from . import rotations as rot
from .estimation import Detection
from .geometry import (
    BundleGeometry,
    CameraIntrinsics,
    Pose6D,
    project_points,
    tag_corners_bundle_frame,
)

CH_JITTER = 0
CH_LIGHT = 1
CH_CORRUPT = 2
CH_WAVE = 3
CH_LIGHT_BIRTH = 4

# lights older than this many mean lifetimes are ignored
_LIFETIME_CUTOFF = 8.0


@dataclass(frozen=True)
class NoiseProfile:
    pixel_sigma: float = 0.0
    reflection_rate: float = 0.0
    reflection_radius_frac: float = 0.3
    # fixed highlight size; overrides the fraction when > 0
    reflection_radius_px: float = 0.0
    occlusion_kill_frac: float = 0.25
    wave_amplitude_deg: float = 0.0
    wave_period_s: float = 4.0
    seed: int = 0
    # light direction relative to the carrier's inward normal
    light_azimuth_deg: float = 0.0
    light_elevation_deg: float = 0.0
    light_jitter_deg: float = 5.0
    # mean glint lifetime; 0 draws fresh lights every frame
    reflection_persistence_s: float = 0.0
    corrupt_instead_of_kill: bool = False
    fps: float = 30.0
    name: str = ""

    def __post_init__(self):
        for f in ("pixel_sigma", "reflection_rate", "reflection_radius_frac", "reflection_radius_px", "wave_amplitude_deg", "light_jitter_deg",
                  "reflection_persistence_s"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        if not 0.0 < self.occlusion_kill_frac <= 1.0:
            raise ValueError("occlusion_kill_frac must lie in (0, 1]")
        if self.wave_period_s <= 0 or self.fps <= 0:
            raise ValueError("wave_period_s and fps must be positive")

    def with_seed(self, seed: int) -> "NoiseProfile":
        return NoiseProfile(**{**asdict(self), "seed": int(seed)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown noise profile keys: {sorted(unknown)}")
        return cls(**d)


ZERO_NOISE = NoiseProfile(reflection_rate=0.0, light_jitter_deg=0.0, name="zero")


@dataclass(frozen=True)
class ReflectionEvent:
    center: tuple[float, float]
    radius: float
    frame_index: int
    tag_id: int = -1  # tag whose plane produced the glint

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")


@dataclass
class SimFrame:
    frame_index: int
    detections: list[Detection]
    reflections: list[ReflectionEvent] = field(default_factory=list)
    truth: Pose6D | None = None  # wave-perturbed camera_from_bundle


def rng_for(seed: int, frame: int, slot: int, channel: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), frame, slot, channel])))


def wave_phases(seed: int) -> tuple[float, float]:
    """(carrier phase, camera-boat phase) in radians."""
    g = rng_for(seed, 0, 0, CH_WAVE)
    return tuple(float(v) for v in g.uniform(0.0, 2.0 * np.pi, size=2))


def wave_rotation(amplitude_deg: float, period_s: float, t_s: float, phase: float) -> Pose6D:
    """Roll (about +Z) and pitch (about +X) sharing one sinusoidal phase."""
    a = np.radians(amplitude_deg) * np.sin(2.0 * np.pi * t_s / period_s + phase)
    q = rot.multiply(rot.from_axis_angle((0, 0, 1), a), rot.from_axis_angle((1, 0, 0), a))
    return Pose6D((0, 0, 0), q)


def perturbed_truth(truth: Pose6D, np_: NoiseProfile, frame: int) -> Pose6D:
    if np_.wave_amplitude_deg == 0.0:
        return truth
    phi_tag, phi_cam = wave_phases(np_.seed)
    t_s = frame / np_.fps
    w_tag = wave_rotation(np_.wave_amplitude_deg, np_.wave_period_s, t_s, phi_tag)
    w_cam = wave_rotation(np_.wave_amplitude_deg, np_.wave_period_s, t_s, phi_cam)
    return w_cam.inverse() @ truth @ w_tag


def light_direction(np_: NoiseProfile, g: np.random.Generator) -> np.ndarray:
    """Travel direction of one light in the carrier's resting bundle frame."""
    az = np.radians(np_.light_azimuth_deg + np_.light_jitter_deg * g.standard_normal())
    el = np.radians(np_.light_elevation_deg + np_.light_jitter_deg * g.standard_normal())
    # +Z is into the tag; azimuth swings about the vertical, elevation about X
    d = np.array([np.sin(az) * np.cos(el), -np.sin(el), np.cos(az) * np.cos(el)])
    return d / np.linalg.norm(d)


class _BirthCache:
    """Lights switched on at each frame, memoised per profile."""

    def __init__(self, np_: NoiseProfile):
        self.np_ = np_
        self.life = np_.reflection_persistence_s * np_.fps
        self.table: dict[int, tuple] = {}

    def __call__(self, frame: int) -> tuple:
        hit = self.table.get(frame)
        if hit is None:
            g = rng_for(self.np_.seed, frame + 2**32, 0, CH_LIGHT_BIRTH)
            n = int(g.poisson(self.np_.reflection_rate / self.life))
            # (last frame alive, direction)
            hit = tuple((frame + g.exponential(self.life), light_direction(self.np_, g)) for _ in range(n))
            if len(self.table) > 20_000:
                self.table.clear()
            self.table[frame] = hit
        return hit


@lru_cache(maxsize=64)
def _births_for(np_: NoiseProfile) -> _BirthCache:
    return _BirthCache(np_)


def active_lights(np_: NoiseProfile, frame: int) -> list[np.ndarray]:
    """Light directions present at ``frame``.

    Without persistence each frame draws ``Poisson(rate)`` fresh lights. With
    it, lights are born as a Poisson process and live an exponential time;
    the count per frame is still ``Poisson(rate)`` but neighbouring frames
    share most of their lights.
    """
    if np_.reflection_rate <= 0.0:
        return []
    if np_.reflection_persistence_s <= 0.0:
        g = rng_for(np_.seed, frame, 0, CH_LIGHT)
        return [light_direction(np_, g) for _ in range(int(g.poisson(np_.reflection_rate)))]
    span = int(np.ceil(_LIFETIME_CUTOFF * np_.reflection_persistence_s * np_.fps))
    births = _births_for(np_)
    return [d for j in range(frame - span, frame + 1) for end, d in births(j) if end >= frame]


def glint_points(lights_cam: np.ndarray, camera_from_tag: Pose6D, k: CameraIntrinsics) -> np.ndarray:
    """Image points where a tag plane mirrors directional lights into the camera.

    ``lights_cam`` is (M, 3) travel directions in camera coordinates. Rows of
    the result are NaN for lights that produce no visible glint.
    """
    L = np.atleast_2d(np.asarray(lights_cam, dtype=float))
    n = -camera_from_tag.R[:, 2]  # outward normal
    d = L @ n
    ray = -(L - 2.0 * d[:, None] * n)
    # lit from the front, reflected towards the camera, and seen on the front face
    ok = (d < 0.0) & (ray[:, 2] > 0.0) & (ray @ n < 0.0)
    out = np.full((len(L), 2), np.nan)
    z = np.where(ok, ray[:, 2], 1.0)
    out[ok, 0] = (k.fx * ray[:, 0] / z + k.cx)[ok]
    out[ok, 1] = (k.fy * ray[:, 1] / z + k.cy)[ok]
    return out


def covered_fraction(quad: np.ndarray, center, radius: float) -> float:
    """Fraction of the quadrilateral's area inside the disk."""
    poly = Polygon(quad)
    if radius <= 0.0 or poly.area <= 0.0:
        return 0.0
    disk = Point(float(center[0]), float(center[1])).buffer(radius, quad_segs=64)
    return float(poly.intersection(disk).area / poly.area)


def _quad_diagonal(quad: np.ndarray) -> float:
    return 0.5 * (np.linalg.norm(quad[2] - quad[0]) + np.linalg.norm(quad[3] - quad[1]))


def simulate_frame(
    truth_camera_from_bundle: Pose6D,
    bundle: BundleGeometry,
    k: CameraIntrinsics,
    np_: NoiseProfile,
    frame: int,
) -> SimFrame:
    """Detections and glints for one frame; deterministic in ``(np_.seed, frame)``."""
    truth = perturbed_truth(truth_camera_from_bundle, np_, frame)

    # exact projections
    quads = {}
    for slot, pl in enumerate(bundle.placements):
        uv = project_points(k, truth.apply(tag_corners_bundle_frame(pl)))
        if uv is None or not k.contains(uv):
            continue
        quads[slot] = uv

    # glare
    reflections: list[ReflectionEvent] = []
    lights = active_lights(np_, frame) if quads else []
    if lights:
        lights_cam = np.array(lights) @ truth_camera_from_bundle.R.T
        glints = {
            slot: glint_points(lights_cam, truth @ bundle.placements[slot].tag_to_bundle, k) for slot in quads
        }
        # light-major order keeps the event list stable
        for i in range(len(lights)):
            for slot, uv in quads.items():
                c = glints[slot][i]
                if np.isnan(c[0]):
                    continue
                r = np_.reflection_radius_px or np_.reflection_radius_frac * _quad_diagonal(uv)
                reflections.append(ReflectionEvent((float(c[0]), float(c[1])), float(r), frame, bundle.placements[slot].tag_id))

    detections = []
    for slot, uv in quads.items():
        pl = bundle.placements[slot]
        mine = [ev for ev in reflections if ev.tag_id == pl.tag_id]  # a glint lives on the surface that mirrors it
        corrupt_mask = np.zeros(4, dtype=bool)
        if mine:
            centers = np.array([ev.center for ev in mine])
            radii = np.array([ev.radius for ev in mine])
            inside = np.linalg.norm(uv[None, :, :] - centers[:, None, :], axis=2) <= radii[:, None]
            if inside.any() and not np_.corrupt_instead_of_kill:
                continue
            corrupt_mask = inside.any(axis=0)
            lo, hi = uv.min(axis=0), uv.max(axis=0)
            near = np.all(centers + radii[:, None] >= lo, axis=1) & np.all(centers - radii[:, None] <= hi, axis=1)
            if any(covered_fraction(uv, centers[i], radii[i]) >= np_.occlusion_kill_frac for i in np.flatnonzero(near)):
                continue
        corners = uv.copy()
        if np_.pixel_sigma > 0.0:
            corners = corners + rng_for(np_.seed, frame, slot, CH_JITTER).normal(0.0, np_.pixel_sigma, (4, 2))
        if corrupt_mask.any():
            gc = rng_for(np_.seed, frame, slot, CH_CORRUPT)
            r_max = float(radii.max())
            for i in np.flatnonzero(corrupt_mask):
                ang = gc.uniform(0.0, 2.0 * np.pi)
                corners[i] += gc.uniform(0.0, r_max) * np.array([np.cos(ang), np.sin(ang)])
        if not k.contains(corners):
            continue
        detections.append(Detection(pl.tag_id, corners, frame))
    return SimFrame(frame, detections, reflections, truth)


def detection_rate(frames: Sequence[Sequence[Detection]], mode: str = "bundle", leader_id: int = 0) -> float:
    """``single``: share of frames where the leader was seen; ``bundle``: any tag."""
    if len(frames) == 0:
        raise ValueError("no frames")
    if mode == "single":
        hits = sum(any(d.tag_id == leader_id for d in f) for f in frames)
    elif mode == "bundle":
        hits = sum(len(f) > 0 for f in frames)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return hits / len(frames)


# --------------------------------------------------------------------------
# JSON-lines streams: one header line, then one line per frame


def dump_detections(
    path,
    frames: Iterable[SimFrame],
    bundle: BundleGeometry,
    k: CameraIntrinsics,
) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": {"bundle": bundle.to_dict(), "intrinsics": k.to_dict()}}) + "\n")
        for f in frames:
            rec = {
                "frame": f.frame_index,
                "detections": [d.to_dict() for d in f.detections],
            }
            if f.truth is not None:
                rec["truth"] = f.truth.to_dict()
            fh.write(json.dumps(rec) + "\n")


def load_detections(path) -> tuple[BundleGeometry, CameraIntrinsics, list[SimFrame]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError("empty detection stream")
    header = json.loads(lines[0]).get("header")
    if header is None:
        raise ValueError("detection stream lacks a header line")
    bundle = BundleGeometry.from_dict(header["bundle"])
    k = CameraIntrinsics.from_dict(header["intrinsics"])
    frames = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        truth = Pose6D.from_dict(rec["truth"]) if "truth" in rec else None
        frames.append(SimFrame(int(rec["frame"]), [Detection.from_dict(d) for d in rec["detections"]], [], truth))
    return bundle, k, frames
