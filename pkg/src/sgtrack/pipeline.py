"""Frame-by-frame tracking: localize, initialize from detections, refine, prune."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .geometry.mesh import TABLE_I_OBJECTS, TriangleMesh, builtin_mesh
from .geometry.transform import RigidTransform, pose_error
from .pose_init import BBoxModel, KeypointDetection, PnPError, associate, solve_pnp
from .scene import InstanceId, InstanceKind, SceneGraph
from .sensor import PinholeModel, Scan
from .tracking import (
    RefinementConfig,
    RefinementReport,
    TrackingError,
    TrackState,
    localize,
    refine_instances,
    update_tracks,
)

log = logging.getLogger(__name__)

TIMING_KEY = "timing"


@dataclass
class TrackerConfig:
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    localization: Optional[RefinementConfig] = None  # None: keep the scan's sensor pose
    max_failures: int = 5
    min_keypoint_confidence: float = 0.5


def default_catalog(label: str) -> TriangleMesh:
    if label in TABLE_I_OBJECTS:
        return builtin_mesh(f"builtin:{label}")
    raise TrackingError(f"no mesh known for detected label {label!r}")


def _pose_dict(pose: RigidTransform) -> dict:
    return {"t": [float(x) for x in pose.t], "q": [float(x) for x in pose.q]}


class Tracker:
    """Stateful tracker over an evolving scene graph."""

    def __init__(
        self,
        graph: SceneGraph,
        config: Optional[TrackerConfig] = None,
        catalog: Callable[[str], TriangleMesh] = default_catalog,
        truth: Optional[SceneGraph] = None,
    ):
        self.graph = graph
        self.config = config or TrackerConfig()
        self.catalog = catalog
        self.truth = truth
        self.states = {i: TrackState(i) for i in graph.ids(InstanceKind.DYNAMIC)}
        self.frame = 0

    def process(self, scan: Scan, detections: Iterable[KeypointDetection] = ()) -> dict:
        cfg = self.config
        timing = {}
        t_start = t0 = time.perf_counter()

        sensor_pose = scan.sensor_pose
        if cfg.localization is not None:
            sensor_pose = localize(self.graph, scan, scan.sensor_pose, cfg.localization)
            scan = scan.with_pose(sensor_pose)
        timing["localize_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        added = self._initialize(scan, list(detections))
        timing["init_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        report = RefinementReport()
        deltas = refine_instances(self.graph, scan, cfg.refinement, report)
        timing["refine_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        cs, sim = report.last_correspondences, report.last_sim
        pruned = []
        if cs is not None:
            self.states, pruned = update_tracks(
                self.states, cs, sim, cfg.refinement.min_corr_count, cfg.max_failures
            )
            for iid in pruned:
                log.info("frame %d: pruned instance %d (%s)", self.frame, iid, self.graph.instance(iid).label)
                self.graph.remove_instance(iid)
        timing["tracks_s"] = time.perf_counter() - t0
        timing["total_s"] = time.perf_counter() - t_start

        record = {
            "frame": self.frame,
            "sensor_pose": _pose_dict(sensor_pose),
            "matched": 0 if cs is None else len(cs),
            "unmatched": 0 if cs is None else int(len(cs.unmatched_rays)),
            "valid_rays": int(scan.n_valid),
            "added": added,
            "pruned": pruned,
            "instances": {},
            TIMING_KEY: timing,
        }
        for iid in self.graph.ids(InstanceKind.DYNAMIC):
            delta = deltas.get(iid, RigidTransform.identity())
            entry = {
                "label": self.graph.instance(iid).label,
                "pose": _pose_dict(self.graph.world_pose(iid)),
                "delta_translation": float(np.linalg.norm(delta.t)),
                "delta_angle_deg": math.degrees(delta.angle),
                "mean_residual": report.residuals.get(iid, []),
                "consecutive_failures": self.states[iid].consecutive_failures if iid in self.states else 0,
            }
            err = self._truth_error(iid)
            if err is not None:
                entry["error_translation"], entry["error_angle_deg"] = err
            record["instances"][str(iid)] = entry
        self.frame += 1
        return record

    def _initialize(self, scan: Scan, detections: list[KeypointDetection]) -> list[int]:
        """New instances from detections whose label is not tracked yet."""
        if not detections:
            return []
        if not isinstance(scan.model, PinholeModel):
            raise TrackingError("keypoint detections need a pinhole sensor")
        added = []
        for det in detections:
            try:
                mesh = self.catalog(det.label)
                obj_to_cam, err = solve_pnp(det, BBoxModel.from_mesh(mesh), scan.model, self.config.min_keypoint_confidence)
            except PnPError as exc:
                log.warning("frame %d: %s", self.frame, exc)
                continue
            existing = associate(self.graph, det, scan.sensor_pose, obj_to_cam)
            if existing is not None:
                continue
            iid = self.graph.add_instance(mesh, scan.sensor_pose @ obj_to_cam, det.label)
            self.states[iid] = TrackState(iid)
            added.append(iid)
            log.info("frame %d: added %s as instance %d (reprojection %.3f px)", self.frame, det.label, iid, err)
        return added

    def _truth_error(self, iid: InstanceId) -> Optional[tuple[float, float]]:
        if self.truth is None:
            return None
        label = self.graph.instance(iid).label
        match = self.truth.find(label)
        if len(match) != 1:
            return None
        return pose_error(self.graph.world_pose(iid), self.truth.world_pose(match[0]))


def strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != TIMING_KEY}


class FrameLog:
    """JSON Lines writer, one record per processed frame."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "FrameLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
