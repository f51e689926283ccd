"""Initial object poses from 2D bounding-box keypoints (PnP).

A detector predicts the image positions of the 8 corners and the center of
each object's 3D bounding box. With the box dimensions known, the pose
follows from minimizing the reprojection error: a DLT estimate refined by
Gauss-Newton. ``synth_detections`` stands in for the detector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .geometry.transform import RigidTransform
from .scene import InstanceId, InstanceKind, SceneGraph
from .sensor import PinholeModel

N_KEYPOINTS = 9
MIN_POINTS = 6


class PnPError(RuntimeError):
    """PnP failure; ``best_pose`` holds the best estimate reached, if any."""

    def __init__(self, message: str, best_pose: Optional[RigidTransform] = None, best_error: float = np.inf):
        super().__init__(message)
        self.best_pose = best_pose
        self.best_error = best_error


def bbox_keypoints(dimensions) -> np.ndarray:
    """8 corners in bit order (bit 0 -> x, bit 1 -> y, bit 2 -> z; set bit = +),
    then the center."""
    dims = np.asarray(dimensions, dtype=np.float64).reshape(3)
    if np.any(dims <= 0):
        raise ValueError(f"box dimensions must be positive, got {dims}")
    bits = np.array([[(i >> k) & 1 for k in range(3)] for i in range(8)], dtype=np.float64)
    corners = (bits - 0.5) * dims
    return np.vstack([corners, corners.mean(axis=0)])


@dataclass(frozen=True, eq=False)
class BBoxModel:
    dimensions: np.ndarray  # width (x), height (y), depth (z)
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))  # box center in the object frame

    def __post_init__(self):
        object.__setattr__(self, "dimensions", np.asarray(self.dimensions, dtype=np.float64).reshape(3))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))
        bbox_keypoints(self.dimensions)

    @classmethod
    def from_mesh(cls, mesh) -> "BBoxModel":
        lo, hi = mesh.bounds()
        return cls(hi - lo, 0.5 * (lo + hi))

    def keypoints(self) -> np.ndarray:
        return bbox_keypoints(self.dimensions) + self.offset


@dataclass
class KeypointDetection:
    label: str
    points2d: np.ndarray
    confidence: np.ndarray = None
    frame_id: int = 0

    def __post_init__(self):
        self.points2d = np.asarray(self.points2d, dtype=np.float64)
        if self.points2d.shape != (N_KEYPOINTS, 2) or not np.all(np.isfinite(self.points2d)):
            raise ValueError(f"detection {self.label!r}: need {N_KEYPOINTS} finite (u, v) points")
        if self.confidence is None:
            self.confidence = np.ones(N_KEYPOINTS)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(N_KEYPOINTS)
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError(f"detection {self.label!r}: confidences must lie in [0, 1]")

    def to_dict(self) -> dict:
        pts = [[float(u), float(v), float(c)] for (u, v), c in zip(self.points2d, self.confidence)]
        return {"label": self.label, "points": pts, "frame_id": self.frame_id}

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointDetection":
        pts = np.asarray(data["points"], dtype=np.float64)
        if pts.shape != (N_KEYPOINTS, 3):
            raise ValueError(f"'points' must be {N_KEYPOINTS} triples [u, v, conf], got shape {pts.shape}")
        return cls(str(data["label"]), pts[:, :2], pts[:, 2], int(data.get("frame_id", 0)))


def project_points(pose: RigidTransform, model: PinholeModel, points3d) -> np.ndarray:
    """Pixel coordinates of object points under ``pose`` (object -> camera)."""
    p = pose.apply(np.atleast_2d(np.asarray(points3d, dtype=np.float64)))
    behind = np.flatnonzero(~(p[:, 2] > 1e-6))
    if behind.size:
        raise ValueError(f"point {int(behind[0])} is not in front of the camera (z = {p[behind[0], 2]:.6g})")
    return np.column_stack([model.fx * p[:, 0] / p[:, 2] + model.cx, model.fy * p[:, 1] / p[:, 2] + model.cy])


def _similarity(points: np.ndarray, target_rms: float) -> np.ndarray:
    """Homogeneous map centering ``points`` and scaling their mean norm to ``target_rms``."""
    d = points.shape[1]
    c = points.mean(axis=0)
    spread = np.mean(np.linalg.norm(points - c, axis=1))
    k = target_rms / spread if spread > 0 else 1.0
    T = np.eye(d + 1)
    T[:d, :d] *= k
    T[:d, d] = -k * c
    return T


def _dlt(obj: np.ndarray, norm: np.ndarray) -> RigidTransform:
    """Linear pose from normalized image coordinates, projected onto SE(3).

    Both point sets are centered and scaled first; without this the system
    is badly conditioned for small boxes seen from afar.
    """
    n = len(obj)
    T = _similarity(obj, np.sqrt(3.0))
    H = _similarity(norm, np.sqrt(2.0))
    Xh = np.hstack([obj, np.ones((n, 1))])
    Xn = Xh @ T.T
    un = np.hstack([norm, np.ones((n, 1))]) @ H.T
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -un[:, :1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -un[:, 1:2] * Xn
    Pn = np.linalg.svd(A)[2][-1].reshape(3, 4)
    P = np.linalg.solve(H, Pn @ T)
    # the null vector's sign is arbitrary; pick the one that puts the points in front of
    # the camera (the sign of det(P[:, :3]) is unreliable when that block is near singular)
    if np.sum(Xh @ P[2]) < 0:
        P = -P
    U, S, Vt = np.linalg.svd(P[:, :3])
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    t = P[:, 3] / S.mean()
    return RigidTransform.from_matrix(R, t)


def _in_front(R, t, obj) -> bool:
    return bool(np.all(obj @ R[2] + t[2] > 1e-6))


def _residuals(R, t, obj, pix, w, model):
    p = obj @ R.T + t
    z = p[:, 2]
    uv = np.column_stack([model.fx * p[:, 0] / z + model.cx, model.fy * p[:, 1] / z + model.cy])
    return p, (uv - pix) * w[:, None]


def solve_pnp(
    detection: KeypointDetection,
    bbox: BBoxModel,
    model: PinholeModel,
    min_confidence: float = 0.5,
    max_iterations: int = 50,
    tol: float = 1e-10,
) -> tuple[RigidTransform, float]:
    """Object -> camera pose and the mean reprojection error in pixels."""
    keep = detection.confidence >= min_confidence
    if np.count_nonzero(keep) < MIN_POINTS:
        raise PnPError(
            f"underdetermined: {np.count_nonzero(keep)} confident keypoints for {detection.label!r}, need {MIN_POINTS}"
        )
    obj = bbox.keypoints()[keep]
    pix = detection.points2d[keep]
    w = np.sqrt(detection.confidence[keep])
    norm = np.column_stack([(pix[:, 0] - model.cx) / model.fx, (pix[:, 1] - model.cy) / model.fy])

    pose = _dlt(obj, norm)
    R, t = pose.rotation.copy(), pose.t.copy()
    if not _in_front(R, t, obj):
        raise PnPError(f"no initial pose with all keypoints in front of the camera for {detection.label!r}")
    p, r = _residuals(R, t, obj, pix, w, model)
    cost = float(np.sum(r**2))
    best = (cost, R, t)
    rising = 0
    for _ in range(max_iterations):
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        # d(uv)/dp, then dp/d(omega) = -[p - t]x for a left rotation increment, dp/dt = I
        Jp = np.zeros((len(p), 2, 3))
        Jp[:, 0, 0] = model.fx / z
        Jp[:, 0, 2] = -model.fx * x / z**2
        Jp[:, 1, 1] = model.fy / z
        Jp[:, 1, 2] = -model.fy * y / z**2
        q = p - t
        skew = np.zeros((len(p), 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = -q[:, 2], q[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = q[:, 2], -q[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = -q[:, 1], q[:, 0]
        J = np.concatenate([-Jp @ skew, Jp], axis=2) * w[:, None, None]
        step = np.linalg.lstsq(J.reshape(-1, 6), -r.reshape(-1), rcond=None)[0]
        for _ in range(20):  # shorten steps that would carry a keypoint behind the camera
            U, _, Vt = np.linalg.svd(RigidTransform.from_rotvec(step[:3]).rotation @ R)  # re-orthonormalize
            R_new, t_new = U @ Vt, t + step[3:]
            if _in_front(R_new, t_new, obj):
                break
            step = 0.5 * step
        else:
            break
        R, t = R_new, t_new
        p, r = _residuals(R, t, obj, pix, w, model)
        new_cost = float(np.sum(r**2))
        rising = rising + 1 if new_cost > cost else 0
        cost = new_cost
        if cost < best[0]:
            best = (cost, R, t)
        if rising >= 5:
            pose = RigidTransform.from_matrix(best[1], best[2])
            raise PnPError(f"PnP diverged for {detection.label!r}", pose, _mean_error(pose, obj, pix, model))
        if np.linalg.norm(step) < tol:
            break
    pose = RigidTransform.from_matrix(best[1], best[2])
    return pose, _mean_error(pose, obj, pix, model)


def _mean_error(pose, obj, pix, model) -> float:
    return float(np.mean(np.linalg.norm(project_points(pose, model, obj) - pix, axis=1)))


def synth_detections(
    graph: SceneGraph,
    model: PinholeModel,
    sensor_pose: RigidTransform,
    noise_px: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    frame_id: int = 0,
) -> list[KeypointDetection]:
    """Project every visible dynamic instance's box keypoints, plus pixel noise."""
    rng = rng if rng is not None else np.random.default_rng()
    world_to_cam = sensor_pose.inverse()
    out = []
    for iid in graph.ids(InstanceKind.DYNAMIC):
        bbox = BBoxModel.from_mesh(graph.instance(iid).mesh)
        pose = world_to_cam @ graph.world_pose(iid)
        cam_pts = pose.apply(bbox.keypoints())
        if np.any(cam_pts[:, 2] <= 1e-6):
            continue
        uv = project_points(pose, model, bbox.keypoints())
        cu, cv = uv[-1]
        if not (0 <= cu < model.width and 0 <= cv < model.height):
            continue
        if noise_px > 0:
            uv = uv + rng.normal(scale=noise_px, size=uv.shape)
        out.append(KeypointDetection(graph.instance(iid).label, uv, np.ones(N_KEYPOINTS), frame_id))
    return out


def read_detections(path: str | Path) -> list[KeypointDetection]:
    """JSON Lines, one ``{label, points: [[u, v, conf] x 9], frame_id}`` per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(KeypointDetection.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_detections(path: str | Path, detections: Iterable[KeypointDetection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(det.to_dict()) + "\n")


def associate(
    graph: SceneGraph, detection: KeypointDetection, camera_pose: RigidTransform, object_pose: RigidTransform
) -> Optional[InstanceId]:
    """Existing dynamic instance with the detection's label nearest to the
    PnP estimate (object -> map), or None when the label is new."""
    candidates = [i for i in graph.find(detection.label) if graph.instance(i).kind is InstanceKind.DYNAMIC]
    if not candidates:
        return None
    guess = (camera_pose @ object_pose).t
    return min(candidates, key=lambda i: (np.linalg.norm(graph.world_pose(i).t - guess), i))
