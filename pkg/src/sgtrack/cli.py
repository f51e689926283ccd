"""Command-line front end: simulate | track | presegment | query | bench.

Exit codes: 0 success, 1 tracking or assertion failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bench import run_bench, time_ratio, write_bench_csv
from .geometry.mesh import MeshFormatError
from .geometry.transform import RigidTransform
from .pipeline import FrameLog, Tracker, TrackerConfig
from .pose_init import read_detections
from .scene import SceneError, SceneGraph
from .sensor import SensorError, load_sensor, read_scan, simulate_scan, write_scan, write_scan_csv
from .spatial import Relation, RelationConfig, query_relations, relations_to_json
from .tracking import RefinementConfig, TrackingError, find_correspondences, presegment

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2

log = logging.getLogger("sgtrack")


class InputError(Exception):
    pass


@dataclass
class ExperimentConfig:
    """Optional JSON config for ``track``/``presegment``: every field may be omitted."""

    scene: Optional[str] = None
    sensor: Optional[str] = None
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    localization: Optional[RefinementConfig] = None
    noise: float = 0.0
    seed: int = 0
    output_dir: Optional[str] = None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        except OSError as exc:
            raise InputError(f"{path}: {exc.strerror}") from None
        if not isinstance(data, dict):
            raise InputError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"{path}: unknown config fields {sorted(unknown)}; known: {sorted(known)}")
        try:
            if "refinement" in data:
                data["refinement"] = RefinementConfig(**data["refinement"])
            if data.get("localization") is not None:
                data["localization"] = RefinementConfig.for_localization(**data["localization"])
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}: {exc}") from None
        return cls(**data)


def _parse_pose(values: Optional[Sequence[float]]) -> RigidTransform:
    if values is None:
        return RigidTransform.identity()
    try:
        return RigidTransform.from_list(values)
    except ValueError as exc:
        raise InputError(f"--pose: {exc}") from None


def _need(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such file")
    return p


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    graph = SceneGraph.load(_need(args.scene))
    model = load_sensor(_need(args.sensor))
    pose = _parse_pose(args.pose)
    rng = np.random.default_rng(args.seed)
    scan = simulate_scan(graph, model, pose, noise_sigma=args.noise, rng=rng, threads=args.threads)
    write_scan(args.out, scan)
    if args.csv:
        write_scan_csv(args.csv, scan)
    print(f"{model.ray_count} rays, {scan.n_valid} valid returns -> {args.out}")
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    return ExperimentConfig.load(_need(args.config)) if args.config else ExperimentConfig()


def cmd_track(args) -> int:
    exp = _experiment(args)
    graph = SceneGraph.load(_need(args.scene))
    truth = SceneGraph.load(_need(args.truth)) if args.truth else None
    scans = [read_scan(_need(p)) for p in args.scans]
    detections = read_detections(_need(args.detections)) if args.detections else []
    localization = exp.localization
    if args.localize and localization is None:
        localization = RefinementConfig.for_localization()
    exp.refinement.threads = args.threads
    config = TrackerConfig(refinement=exp.refinement, localization=localization, max_failures=args.max_failures)
    tracker = Tracker(graph, config, truth=truth)
    out_dir = Path(args.out_dir or exp.output_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    worst = 0.0
    with FrameLog(out_dir / "frames.jsonl") as frame_log:
        for k, scan in enumerate(scans):
            dets = [d for d in detections if d.frame_id == k]
            record = tracker.process(scan, dets)
            frame_log.write(record)
            log.info("frame %d: %d matched, %d unmatched", k, record["matched"], record["unmatched"])
            errs = [e["error_translation"] for e in record["instances"].values() if "error_translation" in e]
            if errs:
                worst = max(errs)
    graph.save(out_dir / "scene.json")
    print(f"tracked {len(scans)} frames, {len(graph.ids('dynamic'))} instances -> {out_dir}")
    if truth is not None:
        print(f"final worst translation error {worst:.3e} m")
        if args.max_error is not None and worst >= args.max_error:
            print(f"error above --max-error {args.max_error}", file=sys.stderr)
            return EXIT_FAILURE
    return EXIT_OK


def cmd_presegment(args) -> int:
    exp = _experiment(args)
    graph = SceneGraph.load(_need(args.scene))
    scan = read_scan(_need(args.scan))
    exp.refinement.threads = args.threads
    cs = find_correspondences(graph, scan, exp.refinement)
    points = presegment(cs, scan)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("x,y,z\n")
        for p in points.tolist():
            fh.write(f"{p[0]!r},{p[1]!r},{p[2]!r}\n")
    total = scan.n_valid
    pct = 100.0 * len(points) / total if total else 0.0
    print(f"{len(points)} of {total} points unexplained ({pct:.1f}%)")
    return EXIT_OK


def cmd_query(args) -> int:
    try:
        relation = Relation.parse(args.relation)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    graph = SceneGraph.load(_need(args.scene))
    pairs = query_relations(graph, relation, RelationConfig(args.depth, args.tolerance))
    print(relations_to_json(graph, relation, pairs))
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = run_bench(args.sizes, frames=args.frames, seed=args.seed, threads=args.threads)
    write_bench_csv(rows, sys.stdout)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            write_bench_csv(rows, fh)
    if len(rows) > 1:
        ratio = time_ratio(rows)
        print(f"time ratio largest/smallest: {ratio:.2f} (limit {args.max_ratio})", file=sys.stderr)
        if ratio >= args.max_ratio:
            return EXIT_FAILURE
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags without defaults so either position works
    def default(value):
        return argparse.SUPPRESS if suppress else value

    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--seed", type=int, default=default(0), help="random seed (default 0)")
    flags.add_argument("--threads", type=int, default=default(1), help="ray casting threads")
    flags.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="sgtrack", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="ray cast a scan of a scene")
    s.add_argument("scene")
    s.add_argument("sensor", help="sensor JSON (type pinhole/spherical or preset xtion/vlp16)")
    s.add_argument("--pose", type=float, nargs=7, metavar=("TX", "TY", "TZ", "QW", "QX", "QY", "QZ"))
    s.add_argument("--noise", type=float, default=0.0, help="range noise sigma in meters")
    s.add_argument("--csv", help="also write ray_index,range CSV")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("track", parents=[common], help="track scene instances through scans")
    t.add_argument("scene")
    t.add_argument("scans", nargs="+")
    t.add_argument("--detections", help="keypoint detections, JSON Lines")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--localize", action="store_true", help="correct the sensor pose against static instances")
    t.add_argument("--truth", help="ground-truth scene; logs per-instance errors")
    t.add_argument("--max-error", type=float, help="exit 1 if the final translation error reaches this")
    t.add_argument("--max-failures", type=int, default=5, help="prune after this many visible failures")
    t.add_argument("-o", "--out-dir")
    t.set_defaults(func=cmd_track)

    g = sub.add_parser("presegment", parents=[common], help="write measurements no instance explains")
    g.add_argument("scene")
    g.add_argument("scan")
    g.add_argument("--config")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_presegment)

    q = sub.add_parser("query", parents=[common], help="spatial relation query")
    q.add_argument("scene")
    q.add_argument("relation", help=", ".join(r.value for r in Relation))
    q.add_argument("--depth", type=float, default=2.0)
    q.add_argument("--tolerance", type=float, default=0.02, help="contact tolerance for 'on'")
    q.set_defaults(func=cmd_query)

    b = sub.add_parser("bench", parents=[common], help="frame time against map size")
    b.add_argument("sizes", type=int, nargs="+")
    b.add_argument("--frames", type=int, default=3)
    b.add_argument("--max-ratio", type=float, default=10.0)
    b.add_argument("-o", "--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, SceneError, SensorError, MeshFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrackingError as exc:
        print(f"tracking failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
