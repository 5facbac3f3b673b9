"""Single-tag PnP, confidence weights, median filtering and bundle fusion."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from . import rotations as rot
from .geometry import (
    BundleGeometry,
    CameraIntrinsics,
    Pose6D,
    TagPlacement,
    tag_corners_local,
    to_planar,
    view_angle,
)

DEFAULT_D_REF_MM = 1000.0
DEFAULT_WINDOW = 5
DLT_RANK_TOL = 1e-8
AMBIGUITY_RATIO = 0.05
GN_MAX_ITER = 50
GN_STEP_TOL = 1e-10


class EstimationFailed(Exception):
    """Raised when a detection cannot be turned into a pose."""


@dataclass(frozen=True)
class Detection:
    """One tag's four image corners, counter-clockwise from bottom-left."""

    tag_id: int
    corners: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        c = np.array(self.corners, dtype=float).reshape(4, 2)
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)

    def to_dict(self) -> dict:
        return {
            "tag_id": self.tag_id,
            "corners": [[float(u), float(v)] for u, v in self.corners],
            "frame": self.frame_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(int(d["tag_id"]), np.asarray(d["corners"]), int(d.get("frame", 0)))


@dataclass(frozen=True)
class TagEstimate:
    pose: Pose6D  # camera_from_tag
    rms_px: float
    ambiguous: bool = False


@dataclass(frozen=True)
class WeightedPose:
    camera_from_tag: Pose6D
    w_dist: float
    w_angle: float
    source_tag_id: int
    ambiguous: bool = False

    def __post_init__(self):
        for w in (self.w_dist, self.w_angle):
            if not 0.0 < w <= 1.0:
                raise ValueError(f"weight factor {w} outside (0, 1]")

    @property
    def weight(self) -> float:
        return self.w_dist * self.w_angle


@dataclass(frozen=True)
class BundleEstimate:
    pose: Pose6D  # camera_from_bundle
    confidence: float
    n_tags: int
    ambiguous: bool = False
    tag_ids: tuple[int, ...] = ()


# --------------------------------------------------------------------------
# single tag


def is_convex_quad(corners: np.ndarray, tol: float = 1e-9) -> bool:
    c = np.asarray(corners, dtype=float)
    e = np.roll(c, -1, axis=0) - c
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    scale = max(np.max(np.abs(e)) ** 2, 1e-300)
    return bool(np.all(cross > tol * scale) or np.all(cross < -tol * scale))


def _hartley(points: np.ndarray) -> np.ndarray:
    mean = points.mean(axis=0)
    d = np.sqrt(((points - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])


def homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Plane-to-image homography from >= 4 correspondences, normalised DLT."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    Ts, Td = _hartley(src), _hartley(dst)
    s = (np.column_stack([src, np.ones(len(src))]) @ Ts.T)[:, :2]
    d = (np.column_stack([dst, np.ones(len(dst))]) @ Td.T)[:, :2]
    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    A = np.asarray(rows)
    _, sv, Vt = np.linalg.svd(A)
    # the null space must be one-dimensional
    if sv[7] / sv[0] < DLT_RANK_TOL:
        raise EstimationFailed("degenerate corner configuration")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return H / H[2, 2] if abs(H[2, 2]) > 1e-300 else H


def _decompose(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pose from a tag-plane -> normalised-image homography."""
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2, t = lam * h1, lam * h2, lam * h3
    M = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R, t


@njit(cache=True)
def _residual(R, t, X, uv, fx, fy, cx, cy):
    n = X.shape[0]
    r = np.empty(2 * n)
    P = np.empty((n, 3))
    for i in range(n):
        for j in range(3):
            P[i, j] = R[j, 0] * X[i, 0] + R[j, 1] * X[i, 1] + R[j, 2] * X[i, 2] + t[j]
        r[2 * i] = fx * P[i, 0] / P[i, 2] + cx - uv[i, 0]
        r[2 * i + 1] = fy * P[i, 1] / P[i, 2] + cy - uv[i, 1]
    return r, P


@njit(cache=True)
def _jacobian(P, RX, fx, fy):
    """d(residual)/d(rotvec, t) for a left-multiplied rotation update."""
    n = P.shape[0]
    J = np.zeros((2 * n, 6))
    for i in range(n):
        x, y, z = P[i, 0], P[i, 1], P[i, 2]
        p, q, s = RX[i, 0], RX[i, 1], RX[i, 2]
        a = fx / z
        b = fy / z
        au = -a * x / z
        bv = -b * y / z
        # rotation columns are RX x (dproj/dP row), written out
        J[2 * i, 0] = q * au
        J[2 * i, 1] = s * a - p * au
        J[2 * i, 2] = -q * a
        J[2 * i + 1, 0] = q * bv - s * b
        J[2 * i + 1, 1] = -p * bv
        J[2 * i + 1, 2] = p * b
        J[2 * i, 3] = a
        J[2 * i, 5] = au
        J[2 * i + 1, 4] = b
        J[2 * i + 1, 5] = bv
    return J


@njit(cache=True)
def _exp_so3(w):
    theta = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * (K @ K)


@njit(cache=True)
def _gauss_newton(R, t, X, uv, fx, fy, cx, cy, max_iter, step_tol):
    r, P = _residual(R, t, X, uv, fx, fy, cx, cy)
    cost = r @ r
    for _ in range(max_iter):
        if np.any(P[:, 2] <= 0.0):
            break
        J = _jacobian(P, X @ R.T, fx, fy)
        JtJ = J.T @ J
        if abs(np.linalg.det(JtJ)) < 1e-300:
            break
        step = np.linalg.solve(JtJ, -(J.T @ r))
        alpha = 1.0
        accepted = False
        for _ in range(6):
            Rn = _exp_so3(alpha * step[:3]) @ R
            tn = t + alpha * step[3:]
            rn, Pn = _residual(Rn, tn, X, uv, fx, fy, cx, cy)
            cn = rn @ rn
            # tolerance absorbs round-off once converged
            if cn <= cost * (1.0 + 1e-9) + 1e-24:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        R, t, r, P, cost = Rn, tn, rn, Pn, cn
        if np.sqrt(step @ step) * alpha < step_tol:
            break
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    r, P = _residual(R, t, X, uv, fx, fy, cx, cy)
    return R, t, np.sqrt(2.0 * np.mean(r**2))


def _refine(R, t, X, uv, k: CameraIntrinsics):
    """Gauss-Newton on the reprojection residual with step halving."""
    R, t, rms = _gauss_newton(
        np.ascontiguousarray(R, dtype=np.float64),
        np.ascontiguousarray(t, dtype=np.float64),
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(uv, dtype=np.float64),
        float(k.fx), float(k.fy), float(k.cx), float(k.cy),
        GN_MAX_ITER,
        GN_STEP_TOL,
    )
    return R, t, float(rms)


def _flipped(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Second planar-pose candidate: tag normal mirrored about the line of sight."""
    v = t / np.linalg.norm(t)
    n = R[:, 2]
    n2 = 2.0 * np.dot(n, v) * v - n
    axis = np.cross(n, n2)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return R
    angle = np.arctan2(s, np.dot(n, n2))
    return rot.to_matrix(rot.from_axis_angle(axis / s, angle)) @ R


def estimate_single_tag(
    det: Detection, placement: TagPlacement, k: CameraIntrinsics
) -> TagEstimate:
    """``camera_from_tag`` minimising the reprojection error of the 4 corners.

    Raises :class:`EstimationFailed` for degenerate quadrilaterals or when the
    solution puts the tag behind the camera.
    """
    uv = np.asarray(det.corners, dtype=float)
    if uv.shape != (4, 2) or not np.all(np.isfinite(uv)):
        raise EstimationFailed("detection needs 4 finite corners")
    if not is_convex_quad(uv):
        raise EstimationFailed("corners do not form a convex quadrilateral")
    X = tag_corners_local(placement.side_length)
    norm = np.column_stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy])
    H = homography_dlt(X[:, :2], norm)
    R0, t0 = _decompose(H)
    if t0[2] <= 0:
        raise EstimationFailed("homography places the tag behind the camera")

    candidates = []
    for Rinit in (R0, _flipped(R0, t0)):
        R, t, rms = _refine(Rinit, t0.copy(), X, uv, k)
        if t[2] > 0 and np.dot(R[:, 2], t) > 0:
            candidates.append((rms, Pose6D.from_rt(R, t)))
    if not candidates:
        raise EstimationFailed("no candidate pose in front of the camera")
    candidates.sort(key=lambda c: c[0])
    best_rms, best = candidates[0]
    if len(candidates) == 1:
        return TagEstimate(best, best_rms)
    other_rms, other = candidates[1]
    distinct = rot.angle_between(best.rotation, other.rotation) > 1e-6
    if distinct and other_rms - best_rms <= AMBIGUITY_RATIO * other_rms:
        pick = min(candidates[:2], key=lambda c: view_angle(c[1]))
        return TagEstimate(pick[1], pick[0], ambiguous=True)
    return TagEstimate(best, best_rms)


# --------------------------------------------------------------------------
# weights


def distance_weight(d_mm: float, d_ref_mm: float = DEFAULT_D_REF_MM) -> float:
    """``min(1, d_ref / d)``: nearer tags are trusted more."""
    if not (d_mm > 0 and d_ref_mm > 0):
        raise ValueError("distances must be positive")
    return min(1.0, d_ref_mm / d_mm)


def angle_weight(view_deg: float) -> float:
    """``cos^2`` of the viewing angle."""
    if not 0.0 <= view_deg < 90.0:
        raise ValueError("view angle must lie in [0, 90) degrees")
    return float(np.cos(np.radians(view_deg)) ** 2)


def weigh(pose: Pose6D, tag_id: int, d_ref_mm: float = DEFAULT_D_REF_MM, ambiguous: bool = False) -> WeightedPose:
    wd = distance_weight(float(np.linalg.norm(pose.translation)), d_ref_mm)
    wa = angle_weight(view_angle(pose))
    if wa <= 0.0:
        raise EstimationFailed("tag seen edge-on")
    return WeightedPose(pose, wd, wa, tag_id, ambiguous)


# --------------------------------------------------------------------------
# median filter


@dataclass
class FilterWindow:
    """Per-tag ring buffers of recent poses; one window per camera stream."""

    capacity: int = DEFAULT_WINDOW
    histories: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 1 or self.capacity % 2 == 0:
            raise ValueError("capacity must be an odd integer >= 1")

    def push(self, tag_id: int, pose: Pose6D) -> Pose6D:
        return median_filter_push(self, tag_id, pose)

    def clear(self) -> None:
        self.histories.clear()


def rotation_medoid(quats: Sequence[np.ndarray]) -> np.ndarray:
    """The buffered quaternion with the smallest summed geodesic distance to the rest."""
    Q = np.asarray(quats)
    if len(Q) == 1:
        return Q[0]
    # |<qi, qj>| handles the double cover; clip guards arccos
    dots = np.clip(np.abs(Q @ Q.T), 0.0, 1.0)
    cost = (2.0 * np.arccos(dots)).sum(axis=1)
    return Q[int(np.argmin(cost))]


def median_filter_push(win: FilterWindow, tag_id: int, pose: Pose6D) -> Pose6D:
    hist = win.histories.get(tag_id)
    if hist is None:
        hist = win.histories[tag_id] = deque(maxlen=win.capacity)
    hist.append(pose)
    if len(hist) == 1:
        return pose
    t = np.median(np.array([p.translation for p in hist]), axis=0)
    q = rotation_medoid([p.rotation for p in hist])
    return Pose6D(t, q)


# --------------------------------------------------------------------------
# fusion


def weighted_quaternion_mean(quats: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Principal eigenvector of the weighted 4x4 outer-product accumulator."""
    Q = np.array(quats, dtype=float)
    w = np.asarray(weights, dtype=float)
    ref = Q[0]
    signs = np.where(Q @ ref < 0.0, -1.0, 1.0)
    Q = Q * signs[:, None]
    M = (Q * w[:, None]).T @ Q
    vals, vecs = np.linalg.eigh(M)
    q = vecs[:, -1]
    return q if np.dot(q, ref) >= 0 else -q


def fuse(
    estimates: Sequence[WeightedPose], bundle: BundleGeometry, mode: str = "weighted"
) -> tuple[Pose6D, float] | None:
    """Combine per-tag estimates into ``camera_from_bundle`` and a confidence.

    ``mode="weighted"`` averages every estimate by weight; ``"argmax"`` keeps
    only the heaviest. Returns ``None`` when there is nothing to fuse.
    """
    if not estimates:
        return None
    if mode not in ("weighted", "argmax"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    poses = [e.camera_from_tag @ bundle.placement(e.source_tag_id).tag_to_bundle.inverse() for e in estimates]
    weights = np.array([e.weight for e in estimates])
    total = float(weights.sum())
    if total < 1e-12:
        return None
    if len(estimates) == 1:
        return poses[0], min(1.0, total)
    if mode == "argmax":
        i = int(np.argmax(weights))
        return poses[i], float(weights[i])
    t = (weights[:, None] * np.array([p.translation for p in poses])).sum(axis=0) / total
    q = weighted_quaternion_mean([p.rotation for p in poses], weights)
    return Pose6D(t, q), min(1.0, total)


def estimate_bundle(
    dets: Iterable[Detection],
    bundle: BundleGeometry,
    k: CameraIntrinsics,
    win: FilterWindow,
    d_ref_mm: float = DEFAULT_D_REF_MM,
    fusion: str = "weighted",
) -> BundleEstimate | None:
    """Per tag: PnP, median filter, weigh; then fuse. ``None`` if no tag was usable."""
    weighted = []
    for det in dets:
        try:
            placement = bundle.placement(det.tag_id)
        except KeyError:
            continue
        try:
            est = estimate_single_tag(det, placement, k)
            filtered = win.push(det.tag_id, est.pose)
            weighted.append(weigh(filtered, det.tag_id, d_ref_mm, est.ambiguous))
        except (EstimationFailed, ValueError):
            continue
    fused = fuse(weighted, bundle, fusion)
    if fused is None:
        return None
    pose, conf = fused
    return BundleEstimate(
        pose,
        conf,
        len(weighted),
        any(w.ambiguous for w in weighted),
        tuple(w.source_tag_id for w in weighted),
    )


def estimate_leader_only(
    dets: Iterable[Detection], bundle: BundleGeometry, k: CameraIntrinsics
) -> BundleEstimate | None:
    """Classic single-marker pipeline: the leader tag alone, unfiltered."""
    leader = bundle.leader
    for det in dets:
        if det.tag_id != leader.tag_id:
            continue
        try:
            est = estimate_single_tag(det, leader, k)
            w = weigh(est.pose, leader.tag_id, ambiguous=est.ambiguous)
        except (EstimationFailed, ValueError):
            return None
        return BundleEstimate(est.pose, w.weight, 1, est.ambiguous, (leader.tag_id,))
    return None


# --------------------------------------------------------------------------
# logging

LOG_COLUMNS = ("frame", "n_tags", "d_x_mm", "d_y_mm", "psi_deg", "confidence", "ambiguous_flag")


def log_row(frame: int, est: BundleEstimate | None) -> dict:
    if est is None:
        return {"frame": frame, "n_tags": 0, "d_x_mm": "", "d_y_mm": "", "psi_deg": "", "confidence": 0.0, "ambiguous_flag": 0}
    p = to_planar(est.pose)
    return {
        "frame": frame,
        "n_tags": est.n_tags,
        "d_x_mm": round(p.d_x, 6),
        "d_y_mm": round(p.d_y, 6),
        "psi_deg": round(p.psi, 6),
        "confidence": round(est.confidence, 6),
        "ambiguous_flag": int(est.ambiguous),
    }


def write_estimate_log(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
