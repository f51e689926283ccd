"""Ray-cast correspondences and iterative per-instance pose refinement.

Each measured ray is paired with the simulated hit of the same ray against
the current scene, so data and model points share a ray and the residual is
a range difference. Pairs beyond a distance threshold are dropped (which
also prunes false-positive instances); the rest are grouped per instance
and aligned rigidly. The scan is simulated once per outer iteration; inner
iterations re-solve on the fixed pairs without casting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .geometry.transform import RigidTransform
from .scene import InstanceId, InstanceKind, SceneGraph
from .sensor import PinholeModel, Scan, SimScan, simulate_scan

SOLVERS = ("point_to_plane", "point_to_point")


class TrackingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Correspondence:
    ray_index: int
    data_point: np.ndarray
    model_point: np.ndarray
    normal: np.ndarray
    instance: InstanceId
    residual: float


@dataclass(eq=False)
class CorrespondenceSet:
    """Accepted pairs stored column-wise, plus the finite rays left unpaired.

    Iterating yields :class:`Correspondence` records in ray order.
    """

    ray_index: np.ndarray
    data_points: np.ndarray
    model_points: np.ndarray
    normals: np.ndarray
    instance: np.ndarray
    residual: np.ndarray
    unmatched_rays: np.ndarray
    data_normals: Optional[np.ndarray] = None  # estimated from the scan grid, NaN where undefined

    def __len__(self) -> int:
        return len(self.ray_index)

    def __iter__(self) -> Iterator[Correspondence]:
        for k in range(len(self)):
            yield Correspondence(
                int(self.ray_index[k]),
                self.data_points[k],
                self.model_points[k],
                self.normals[k],
                int(self.instance[k]),
                float(self.residual[k]),
            )

    @property
    def matched(self) -> list[Correspondence]:
        return list(self)

    def subset(self, rows: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.ray_index[rows],
            self.data_points[rows],
            self.model_points[rows],
            self.normals[rows],
            self.instance[rows],
            self.residual[rows],
            np.zeros(0, dtype=np.int64),
            None if self.data_normals is None else self.data_normals[rows],
        )

    def counts(self) -> dict[InstanceId, int]:
        ids, n = np.unique(self.instance, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, n)}


@dataclass
class RefinementConfig:
    outer_iterations: int = 4
    inner_iterations: int = 10
    max_corr_dist: float = 0.05
    min_corr_count: int = 10
    # inner solver; point_to_point is the plain closed-form alignment
    solver: str = "point_to_plane"
    # pairs whose model and measured surface normals differ by more than this
    # are left out of the alignment (not out of the matched set); None disables
    max_normal_angle: Optional[float] = 30.0
    threads: int = 1

    def __post_init__(self):
        for name in ("outer_iterations", "inner_iterations", "min_corr_count", "threads"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.max_corr_dist > 0:
            raise ValueError("max_corr_dist must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.max_normal_angle is not None and not 0 < self.max_normal_angle <= 180:
            raise ValueError("max_normal_angle must lie in (0, 180] degrees")

    @classmethod
    def for_localization(cls, **overrides) -> "RefinementConfig":
        """Wider capture range: a few degrees of heading error move far walls by decimeters."""
        params = dict(outer_iterations=12, inner_iterations=10, max_corr_dist=1.0, min_corr_count=10)
        params.update(overrides)
        return cls(**params)


@dataclass
class TrackState:
    instance: InstanceId
    consecutive_failures: int = 0
    visible: bool = False


# -- correspondences ----------------------------------------------------------


def estimate_normals(scan: Scan) -> np.ndarray:
    """Per-ray surface normals from central differences on the range grid,
    oriented toward the sensor; NaN where a neighbor is missing."""
    rows, cols = scan.model.shape
    pts = scan.points().reshape(rows, cols, 3)
    du = np.full_like(pts, np.nan)
    dv = np.full_like(pts, np.nan)
    du[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    if not isinstance(scan.model, PinholeModel):  # full azimuth sweep wraps around
        du[:, 0] = pts[:, 1] - pts[:, -1]
        du[:, -1] = pts[:, 0] - pts[:, -2]
    dv[1:-1] = pts[2:] - pts[:-2]
    n = np.cross(du, dv).reshape(-1, 3)
    with np.errstate(invalid="ignore", divide="ignore"):
        n /= np.linalg.norm(n, axis=1, keepdims=True)
    facing = np.einsum("ij,ij->i", n, scan.directions_world())
    return n * -np.sign(facing)[:, None]


def _check_shape(scan: Scan) -> None:
    if scan.ranges.size != scan.model.ray_count:
        raise TrackingError(f"scan has {scan.ranges.size} ranges but its model casts {scan.model.ray_count} rays")


def find_correspondences(
    graph: SceneGraph,
    scan: Scan,
    config: Optional[RefinementConfig] = None,
    instances: Optional[set[InstanceId]] = None,
    sim: Optional[SimScan] = None,
) -> CorrespondenceSet:
    """Pair every finite measurement with the simulated hit of the same ray.

    With ``instances`` given, hits on other instances count as unmatched.
    """
    config = config or RefinementConfig()
    _check_shape(scan)
    if sim is None:
        sim = simulate_scan(graph, scan.model, scan.sensor_pose, threads=config.threads)
    measured = scan.flat_ranges
    finite = np.isfinite(measured)
    residual = np.abs(measured - sim.flat_ranges)
    ok = finite & np.isfinite(residual) & (residual <= config.max_corr_dist)
    if instances is not None:
        ok &= np.isin(sim.hit_instance, np.fromiter(instances, dtype=np.int64, count=len(instances)))
    rows = np.flatnonzero(ok)
    data = scan.points()[rows]
    return CorrespondenceSet(
        ray_index=rows,
        data_points=data,
        model_points=sim.hit_points[rows],
        normals=sim.hit_normals[rows],
        instance=sim.hit_instance[rows],
        residual=residual[rows],
        unmatched_rays=np.flatnonzero(finite & ~ok),
    )


def group_by_instance(cs: CorrespondenceSet) -> dict[InstanceId, CorrespondenceSet]:
    """Matched pairs per instance, each group in ray order."""
    return {int(i): cs.subset(np.flatnonzero(cs.instance == i)) for i in np.unique(cs.instance)}


def write_correspondences_csv(path: str | Path, cs: CorrespondenceSet) -> None:
    """Debug dump: ray_index, instance_id, residual and data - model offset."""
    delta = cs.data_points - cs.model_points
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ray_index", "instance_id", "residual", "dx", "dy", "dz"])
        for k in range(len(cs)):
            w.writerow([int(cs.ray_index[k]), int(cs.instance[k]), repr(float(cs.residual[k]))]
                       + [repr(float(v)) for v in delta[k]])


def read_correspondences_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"ray_index": int(r["ray_index"]), "instance_id": int(r["instance_id"]), "residual": float(r["residual"]),
             "offset": [float(r["dx"]), float(r["dy"]), float(r["dz"])]}
            for r in csv.DictReader(fh)
        ]


# -- alignment ---------------------------------------------------------------


def umeyama_align(source, target) -> RigidTransform:
    """Least-squares rigid transform (no scale) taking ``source`` onto ``target``."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError(f"point count mismatch: {len(src)} source vs {len(dst)} target")
    if len(src) < 3:
        raise ValueError(f"need at least 3 point pairs, got {len(src)}")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - ms, dst - md
    spread = np.linalg.svd(sc, compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1e-300):
        raise ValueError("rank-deficient covariance: source points are collinear (rank <= 1)")
    H = dc.T @ sc
    U, _, Vt = np.linalg.svd(H)
    D = np.ones(3)
    D[2] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    R = (U * D) @ Vt
    return RigidTransform.from_matrix(R, md - R @ ms)


def point_to_plane_step(source: np.ndarray, normals: np.ndarray, target: np.ndarray) -> RigidTransform:
    """One Gauss-Newton step on sum(((T s - d) . n)^2), linearized about the
    source centroid. Unobservable directions get the minimum-norm update."""
    c = source.mean(axis=0)
    J = np.hstack([np.cross(source - c, normals), normals])
    r = np.einsum("ij,ij->i", target - source, normals)
    x = np.linalg.lstsq(J, r, rcond=1e-10)[0]
    rot = RigidTransform.from_rotvec(x[:3])
    return RigidTransform(rot.q, c + x[3:] - rot.rotation @ c)


def _solve(source, normals, target, config: RefinementConfig) -> RigidTransform:
    """Accumulated transform moving ``source`` (with ``normals``) onto ``target``."""
    delta = RigidTransform.identity()
    for _ in range(config.inner_iterations):
        moved = delta.apply(source)
        if config.solver == "point_to_point":
            step = umeyama_align(moved, target)
        else:
            step = point_to_plane_step(moved, delta.rotate(normals), target)
        delta = step @ delta
    return delta


def _compatible(model_normals, data_normals, dirs, max_angle: Optional[float]) -> np.ndarray:
    if max_angle is None or data_normals is None:
        return np.ones(len(model_normals), dtype=bool)
    # orient model normals toward the sensor like the measured ones
    m = model_normals * -np.sign(np.einsum("ij,ij->i", model_normals, dirs))[:, None]
    with np.errstate(invalid="ignore"):
        return np.einsum("ij,ij->i", m, data_normals) >= math.cos(math.radians(max_angle))


# -- refinement ---------------------------------------------------------------


@dataclass
class RefinementReport:
    """Per-instance accumulated delta and mean residual of each outer iteration."""

    deltas: dict[InstanceId, RigidTransform] = field(default_factory=dict)
    residuals: dict[InstanceId, list[float]] = field(default_factory=dict)
    matched: dict[InstanceId, list[int]] = field(default_factory=dict)
    skipped: dict[InstanceId, int] = field(default_factory=dict)  # outer iterations without enough pairs
    last_correspondences: Optional[CorrespondenceSet] = None
    last_sim: Optional[SimScan] = None

    def to_dict(self) -> dict:
        ids = sorted(set(self.deltas) | set(self.residuals))
        return {
            str(i): {
                "delta": self.deltas.get(i, RigidTransform.identity()).to_list(),
                "delta_translation": float(np.linalg.norm(self.deltas.get(i, RigidTransform.identity()).t)),
                "delta_angle_deg": math.degrees(self.deltas.get(i, RigidTransform.identity()).angle),
                "mean_residual": self.residuals.get(i, []),
                "matched": self.matched.get(i, []),
                "skipped_iterations": self.skipped.get(i, 0),
            }
            for i in ids
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def refine_instances(
    graph: SceneGraph,
    scan: Scan,
    config: Optional[RefinementConfig] = None,
    report: Optional[RefinementReport] = None,
    dump_dir: Optional[str | Path] = None,
) -> dict[InstanceId, RigidTransform]:
    """Refine every dynamic instance against ``scan``; returns total deltas
    (map frame, pre-multiplied onto each world pose)."""
    config = config or RefinementConfig()
    report = report if report is not None else RefinementReport()
    dynamic = graph.ids(InstanceKind.DYNAMIC)
    totals = {i: RigidTransform.identity() for i in dynamic}
    if not dynamic:
        return totals
    data_normals = estimate_normals(scan) if config.max_normal_angle is not None else None
    dirs = scan.directions_world()
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    for it in range(config.outer_iterations):
        sim = simulate_scan(graph, scan.model, scan.sensor_pose, threads=config.threads)
        cs = find_correspondences(graph, scan, config, sim=sim)
        if data_normals is not None:
            cs.data_normals = data_normals[cs.ray_index]
        if dump_dir is not None:
            write_correspondences_csv(Path(dump_dir) / f"correspondences_{it}.csv", cs)
        groups = group_by_instance(cs)
        report.last_correspondences, report.last_sim = cs, sim
        updates = {}
        for iid in dynamic:
            g = groups.get(iid)
            n = 0 if g is None else len(g)
            report.matched.setdefault(iid, []).append(n)
            report.residuals.setdefault(iid, []).append(float(g.residual.mean()) if n else float("nan"))
            if n < config.min_corr_count:
                report.skipped[iid] = report.skipped.get(iid, 0) + 1
                continue
            keep = _compatible(g.normals, g.data_normals, dirs[g.ray_index], config.max_normal_angle)
            if np.count_nonzero(keep) < config.min_corr_count:
                report.skipped[iid] = report.skipped.get(iid, 0) + 1
                continue
            updates[iid] = _solve(g.model_points[keep], g.normals[keep], g.data_points[keep], config)
        # single writer: apply all updates after every instance was solved
        for iid, delta in updates.items():
            graph.set_world_pose(iid, delta @ graph.world_pose(iid))
            totals[iid] = delta @ totals[iid]
    report.deltas.update(totals)
    return totals


def localize(
    graph: SceneGraph,
    scan: Scan,
    prior: RigidTransform,
    config: Optional[RefinementConfig] = None,
) -> RigidTransform:
    """Correct the sensor pose (sensor -> map) against the static instances."""
    config = config or RefinementConfig.for_localization()
    static = set(graph.ids(InstanceKind.STATIC))
    if not static:
        raise TrackingError("localization needs static instances in the scene")
    pose = prior
    for _ in range(config.outer_iterations):
        current = scan.with_pose(pose)
        cs = find_correspondences(graph, current, config, instances=static)
        if len(cs) < config.min_corr_count:
            raise TrackingError(
                f"localization underdetermined: {len(cs)} static correspondences, need {config.min_corr_count}"
            )
        keep = np.ones(len(cs), dtype=bool)
        if config.max_normal_angle is not None:
            dn = estimate_normals(current)[cs.ray_index]
            keep = _compatible(cs.normals, dn, current.directions_world()[cs.ray_index], config.max_normal_angle)
            if np.count_nonzero(keep) < config.min_corr_count:
                keep[:] = True
        # data moves onto the model here, so the roles of the two point sets swap
        delta = _solve_data_to_model(cs.data_points[keep], cs.model_points[keep], cs.normals[keep], config)
        pose = delta @ pose
    return pose


def _solve_data_to_model(data, model, normals, config: RefinementConfig) -> RigidTransform:
    delta = RigidTransform.identity()
    for _ in range(config.inner_iterations):
        moved = delta.apply(data)
        if config.solver == "point_to_point":
            step = umeyama_align(moved, model)
        else:
            # fixed model planes: minimize ((T d - m) . n)^2
            step = point_to_plane_step(moved, normals, model)
        delta = step @ delta
    return delta


def presegment(cs: CorrespondenceSet, scan: Scan) -> np.ndarray:
    """Measured points no instance explains (map frame)."""
    return scan.points()[cs.unmatched_rays]


# -- track bookkeeping --------------------------------------------------------


def update_tracks(
    states: dict[InstanceId, TrackState],
    cs: CorrespondenceSet,
    sim: SimScan,
    min_corr_count: int = 10,
    max_failures: int = 5,
) -> tuple[dict[InstanceId, TrackState], list[InstanceId]]:
    """Count failures only while an instance is predicted visible; prune at
    ``max_failures`` consecutive visible failures."""
    matched = cs.counts()
    ids, n = np.unique(sim.hit_instance[sim.hit_instance >= 0], return_counts=True)
    hits = {int(i): int(c) for i, c in zip(ids, n)}
    out: dict[InstanceId, TrackState] = {}
    pruned = []
    for iid, st in sorted(states.items()):
        success = matched.get(iid, 0) >= min_corr_count
        visible = hits.get(iid, 0) >= min_corr_count
        failures = 0 if success else st.consecutive_failures + (1 if visible else 0)
        new = TrackState(iid, failures, visible)
        if failures >= max_failures:
            pruned.append(iid)
        else:
            out[iid] = new
    return out, pruned


def config_to_dict(config: RefinementConfig) -> dict:
    return asdict(config)
