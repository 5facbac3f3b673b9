"""Frames, rigid transforms, pinhole projection and multi-plane bundle layout.

Conventions used throughout the package:

* camera frame: +Z forward (boresight), +X right, +Y down;
* tag frame: corners at ``(+-l/2, +-l/2, 0)``, +Z points *into* the tag, so a
  camera facing a tag frontally sees it with identity rotation;
* bundle frame: the leader tag's frame;
* world frame: the water plane, +Z up.

Lengths are millimetres. Angles are degrees at the public boundary and
radians internally.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rotations as rot

# Hinge axis in bundle coordinates: the tag's vertical (world "up") axis.
# Tag +Y points down, hence the sign.
DEFAULT_HINGE_AXIS = (0.0, -1.0, 0.0)

LEADER = "leader"
FOLLOWER = "follower"


class Pose6D:
    """Rigid transform ``target_from_source``: ``p_target = R p_source + t``."""

    __slots__ = ("translation", "rotation", "_R")

    def __init__(self, translation=(0.0, 0.0, 0.0), rotation=(1.0, 0.0, 0.0, 0.0)):
        t = np.array(translation, dtype=float).reshape(3)
        q = rot.normalize(np.array(rotation, dtype=float).reshape(4))
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    def __setattr__(self, name, value):
        raise AttributeError("Pose6D is immutable")

    def __copy__(self):
        return self

    def __deepcopy__(self, memo):
        return self

    def __reduce__(self):
        return (_pose_raw, (self.translation.tolist(), self.rotation.tolist()))

    def __repr__(self) -> str:
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        return f"Pose6D(t=[{t}], q=[{q}])"

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose6D":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], rot.from_matrix(T[:3, :3]))

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose6D":
        return cls(t, rot.from_matrix(R))

    @classmethod
    def from_axis_angle(cls, axis, angle_deg: float, translation=(0.0, 0.0, 0.0)) -> "Pose6D":
        return cls(translation, rot.from_axis_angle(axis, np.radians(angle_deg)))

    @property
    def R(self) -> np.ndarray:
        try:
            return self._R
        except AttributeError:
            R = rot.to_matrix(self.rotation)
            R.setflags(write=False)
            object.__setattr__(self, "_R", R)
            return R

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose6D") -> "Pose6D":
        """``self ∘ other``: apply ``other`` first."""
        t = self.R @ other.translation + self.translation
        return Pose6D(t, rot.multiply(self.rotation, other.rotation))

    __matmul__ = compose

    def inverse(self) -> "Pose6D":
        q = rot.conjugate(self.rotation)
        return Pose6D(-(rot.to_matrix(q) @ self.translation), q)

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.translation

    def distance_to(self, other: "Pose6D") -> tuple[float, float]:
        """(translation error mm, rotation error rad)."""
        dt = float(np.linalg.norm(self.translation - other.translation))
        return dt, rot.angle_between(self.rotation, other.rotation)

    def to_dict(self) -> dict:
        return {"t": [float(v) for v in self.translation], "q": [float(v) for v in self.rotation]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6D":
        return cls(d["t"], d["q"])


def _pose_raw(t, q) -> Pose6D:
    """Unpickle without renormalising, so round trips are bit-exact."""
    p = object.__new__(Pose6D)
    t = np.array(t, dtype=float)
    q = np.array(q, dtype=float)
    t.setflags(write=False)
    q.setflags(write=False)
    object.__setattr__(p, "translation", t)
    object.__setattr__(p, "rotation", q)
    return p


def heading_frame(heading_deg: float, position=(0.0, 0.0, 0.0)) -> Pose6D:
    """``world_from_frame`` for a camera-style frame looking along ``heading_deg``.

    The frame's +Z is the horizontal heading direction, +X is to its right and
    +Y points down. Use it for boat cameras and for tags mounted so that a
    viewer looking along ``heading_deg`` sees them frontally.
    """
    h = np.radians(heading_deg)
    z = np.array([np.cos(h), np.sin(h), 0.0])
    x = np.array([np.sin(h), -np.cos(h), 0.0])
    y = np.array([0.0, 0.0, -1.0])
    return Pose6D.from_rt(np.column_stack([x, y, z]), position)


@dataclass(frozen=True)
class PlanarPose:
    """Water-plane relation between a camera and a tag.

    ``d_x`` is the longitudinal distance along the boresight, ``d_y`` the
    lateral offset of the tag (positive to the camera's right) and ``psi`` the
    yaw of the tag plane relative to the boresight, in (-180, 180].
    """

    d_x: float
    d_y: float
    psi: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv: np.ndarray) -> bool:
        uv = np.atleast_2d(uv)
        return bool(
            np.all((uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height))
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**d)


# 1080p camera with a ~69 degree horizontal field of view.
DEFAULT_INTRINSICS = CameraIntrinsics(fx=1400.0, fy=1400.0, cx=960.0, cy=540.0, width=1920, height=1080)


@dataclass(frozen=True)
class TagPlacement:
    tag_id: int
    side_length: float
    tag_to_bundle: Pose6D = field(default_factory=Pose6D.identity)
    role: str = LEADER

    def __post_init__(self):
        if not self.side_length > 0:
            raise ValueError("side_length must be positive")
        if self.role not in (LEADER, FOLLOWER):
            raise ValueError(f"unknown role {self.role!r}")

    def outward_normal(self) -> np.ndarray:
        """Unit normal pointing out of the tag face, in the bundle frame."""
        return -self.tag_to_bundle.R[:, 2]


@dataclass(frozen=True)
class BundleGeometry:
    placements: tuple[TagPlacement, ...]
    hinge_axis: tuple[float, float, float] = DEFAULT_HINGE_AXIS
    rotation_step_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(self.placements))
        leaders = [p for p in self.placements if p.role == LEADER]
        if len(leaders) != 1:
            raise ValueError("a bundle needs exactly one leader placement")
        ids = [p.tag_id for p in self.placements]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate tag ids in bundle")
        axis = np.asarray(self.hinge_axis, dtype=float)
        object.__setattr__(self, "hinge_axis", tuple(float(v) for v in axis / np.linalg.norm(axis)))

    @property
    def leader(self) -> TagPlacement:
        return next(p for p in self.placements if p.role == LEADER)

    @property
    def tag_ids(self) -> list[int]:
        return [p.tag_id for p in self.placements]

    def placement(self, tag_id: int) -> TagPlacement:
        for p in self.placements:
            if p.tag_id == tag_id:
                return p
        raise KeyError(f"tag {tag_id} is not part of this bundle")

    def with_base_id(self, base_id: int) -> "BundleGeometry":
        """Same layout with tag ids ``base_id + slot`` (slot 0 is the leader)."""
        placements = tuple(
            TagPlacement(base_id + i, p.side_length, p.tag_to_bundle, p.role)
            for i, p in enumerate(self.placements)
        )
        return BundleGeometry(placements, self.hinge_axis, self.rotation_step_deg)

    def to_dict(self) -> dict:
        return {
            "placements": [
                {
                    "tag_id": p.tag_id,
                    "side_mm": p.side_length,
                    "pose": p.tag_to_bundle.to_dict(),
                    "role": p.role,
                }
                for p in self.placements
            ],
            "g_deg": self.rotation_step_deg,
            "hinge": list(self.hinge_axis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BundleGeometry":
        placements = [
            TagPlacement(int(p["tag_id"]), float(p["side_mm"]), Pose6D.from_dict(p["pose"]), p["role"])
            for p in d["placements"]
        ]
        return cls(tuple(placements), tuple(d.get("hinge", DEFAULT_HINGE_AXIS)), float(d.get("g_deg", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BundleGeometry":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_bundle(
    leader_side: float,
    follower_count: int,
    g_deg: float,
    hinge_offset: float = 0.0,
    first_id: int = 0,
) -> BundleGeometry:
    """Leader tag on the bundle XY-plane plus ``follower_count`` hinged followers.

    Follower ``k`` hangs off the right edge of tag ``k-1``, like pages of a
    book, and is rotated ``k * g_deg`` about the vertical hinge axis. Positive
    angles fold the followers away from a camera facing the leader.
    ``hinge_offset`` is the gap between adjacent screens, measured in-plane
    perpendicular to the hinge.
    """
    if not leader_side > 0:
        raise ValueError("leader_side must be positive")
    if follower_count < 0:
        raise ValueError("follower_count must be >= 0")
    if abs(g_deg) >= 90.0:
        raise ValueError("|g_deg| must be < 90, the follower would face away")
    if hinge_offset < 0:
        raise ValueError("hinge_offset must be >= 0")

    half = 0.5 * leader_side
    axis = np.array(DEFAULT_HINGE_AXIS)
    placements = [TagPlacement(first_id, leader_side, Pose6D.identity(), LEADER)]
    prev = placements[0].tag_to_bundle
    for k in range(1, follower_count + 1):
        # hinge line: right edge of the previous tag plus half the gap
        hinge = prev.apply([half + 0.5 * hinge_offset, 0.0, 0.0])
        q = rot.from_axis_angle(axis, np.radians(k * g_deg))
        center = hinge + rot.to_matrix(q) @ np.array([0.5 * hinge_offset + half, 0.0, 0.0])
        pose = Pose6D(center, q)
        placements.append(TagPlacement(first_id + k, leader_side, pose, FOLLOWER))
        prev = pose
    return BundleGeometry(tuple(placements), DEFAULT_HINGE_AXIS, float(g_deg))


def tag_corners_local(side_length: float) -> np.ndarray:
    """Corners in the tag frame, counter-clockwise from bottom-left."""
    h = 0.5 * side_length
    return np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])


def tag_corners_bundle_frame(placement: TagPlacement) -> np.ndarray:
    return placement.tag_to_bundle.apply(tag_corners_local(placement.side_length))


def project(intrinsics: CameraIntrinsics, camera_from_point) -> np.ndarray | None:
    """Pinhole projection of one point; ``None`` when it is not in front of the camera."""
    X, Y, Z = np.asarray(camera_from_point, dtype=float)
    if Z <= 0.0:
        return None
    return np.array([intrinsics.fx * X / Z + intrinsics.cx, intrinsics.fy * Y / Z + intrinsics.cy])


def project_points(intrinsics: CameraIntrinsics, points: np.ndarray) -> np.ndarray | None:
    """Vectorised :func:`project`; ``None`` if any point has Z <= 0."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(P[:, 2] <= 0.0):
        return None
    uv = np.empty((len(P), 2))
    uv[:, 0] = intrinsics.fx * P[:, 0] / P[:, 2] + intrinsics.cx
    uv[:, 1] = intrinsics.fy * P[:, 1] / P[:, 2] + intrinsics.cy
    return uv


def view_angle(camera_from_tag: Pose6D) -> float:
    """Angle in degrees between the tag's outward normal and the tag-to-camera ray."""
    t = camera_from_tag.translation
    if t[2] <= 0.0:
        raise ValueError("tag is behind the camera")
    to_camera = -t / np.linalg.norm(t)
    normal = -camera_from_tag.R[:, 2]
    c = float(np.clip(np.dot(normal, to_camera), -1.0, 1.0))
    # atan2 form keeps precision near 0 degrees
    s = float(np.linalg.norm(np.cross(normal, to_camera)))
    angle = np.degrees(np.arctan2(s, c))
    if angle >= 90.0:
        raise ValueError("tag faces away from the camera")
    return angle


def wrap_deg(a: float) -> float:
    """Wrap an angle to (-180, 180]."""
    a = float(np.fmod(a, 360.0))
    if a > 180.0:
        a -= 360.0
    elif a <= -180.0:
        a += 360.0
    return a


def to_planar(camera_from_tag: Pose6D) -> PlanarPose:
    t = camera_from_tag.translation
    if t[2] <= 0.0:
        raise ValueError("tag is behind the camera")
    z_tag = camera_from_tag.R[:, 2]
    psi = np.degrees(np.arctan2(z_tag[0], z_tag[2]))
    return PlanarPose(float(t[2]), float(t[0]), wrap_deg(psi))


def normals_angle_deg(a: TagPlacement, b: TagPlacement) -> float:
    na, nb = a.outward_normal(), b.outward_normal()
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(na, nb)), np.dot(na, nb))))

