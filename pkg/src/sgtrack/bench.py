"""Per-frame correspondence + refinement time against map size."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from .fixtures import grid_scene, perturb
from .geometry.transform import RigidTransform
from .scene import SceneGraph
from .sensor import PinholeModel, SensorModel, simulate_scan
from .tracking import RefinementConfig, refine_instances


@dataclass
class BenchRow:
    instances: int
    faces: int
    ms_per_frame: float


def total_faces(graph: SceneGraph) -> int:
    return sum(graph.instance(i).mesh.n_faces for i in graph.ids())


def bench_size(
    n_instances: int,
    frames: int = 3,
    seed: int = 0,
    model: Optional[SensorModel] = None,
    config: Optional[RefinementConfig] = None,
) -> BenchRow:
    """Track a perturbed grid of objects seen by a camera at the origin."""
    model = model or PinholeModel.xtion()
    config = config or RefinementConfig()
    rng = np.random.default_rng(seed)
    truth = grid_scene(n_instances, seed)
    est = truth.copy()
    for iid in est.ids():
        est.set_world_pose(iid, perturb(truth.world_pose(iid), rng, 0.005, 1.0))
    scan = simulate_scan(truth, model, RigidTransform.identity(), threads=config.threads).as_scan()
    refine_instances(est.copy(), scan, RefinementConfig(outer_iterations=1, threads=config.threads))  # warm-up
    times = []
    for _ in range(frames):
        t0 = time.perf_counter()
        refine_instances(est, scan, config)
        times.append(time.perf_counter() - t0)
    return BenchRow(n_instances, total_faces(truth), 1000.0 * float(np.mean(times)))


def run_bench(sizes: Iterable[int], frames: int = 3, seed: int = 0, threads: int = 1) -> list[BenchRow]:
    config = RefinementConfig(threads=threads)
    return [bench_size(n, frames, seed, config=config) for n in sizes]


def write_bench_csv(rows: list[BenchRow], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["instances", "faces", "ms_per_frame"])
    for r in rows:
        w.writerow([r.instances, r.faces, f"{r.ms_per_frame:.3f}"])


def time_ratio(rows: list[BenchRow]) -> float:
    """Time of the largest scene over time of the smallest."""
    lo = min(rows, key=lambda r: r.instances)
    hi = max(rows, key=lambda r: r.instances)
    return hi.ms_per_frame / lo.ms_per_frame
