"""Pipeline orchestration and the `planelite` command line.

Subcommands: all | partition | simplify | texture | geometry | synth. Stages
hand off through a versioned bundle directory (mesh PLY + label array +
proxies JSON + texel blob) so each step can run standalone.

Exit codes: 0 ok, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from planelite import bundle
from planelite.config import PipelineConfig
from planelite.geom_opt import optimize_geometry
from planelite.joint_opt import make_state, optimize
from planelite.mesh_core import (
    IndexedMesh,
    load_mesh,
    save_cluster_debug_ply,
    save_mesh,
    save_textured_mesh,
)
from planelite.partition import ClusterSet, PlaneProxy, cluster_adjacency, merge_planes, partition_planes
from planelite.rgbd_io import FrameData, blurriness, load_sequence, read_color, read_depth, select_keyframes
from planelite.simplify import make_plan, simplify_two_step
from planelite.texel_atlas import bake_atlas, build_patches_and_texels, face_uvs, pack_atlas

log = logging.getLogger(__name__)

STAGES = ("partition", "simplify", "texture", "geometry")


class _Timer:
    def __init__(self):
        self.times: dict[str, float] = {}

    def stage(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
                log.info("stage %s: start", name)
                return self_inner

            def __exit__(self_inner, *exc):
                timer.times[name] = time.perf_counter() - self_inner.t0
                log.info("stage %s: %.2fs", name, timer.times[name])
                return False

        return _Ctx()


def _proxies_from_state(state, old_proxies: list[PlaneProxy]) -> list[PlaneProxy]:
    """Carry optimized (n, w) back into proxies; recenter old centroids."""
    out = []
    for j, old in enumerate(old_proxies):
        n = state.normals[j]
        w = float(state.offsets[j])
        c = old.centroid - (old.centroid @ n + w) * n
        out.append(PlaneProxy(normal=n.copy(), offset=w, centroid=c))
    return out


def load_keyframes(
    seq_dir: str | Path, fmt: str, cfg: PipelineConfig
) -> tuple[list[FrameData], object, list[int]]:
    """Stream blur scores over the sequence, then materialize only keyframes."""
    frames, intr = load_sequence(seq_dir, fmt, cfg, with_images=False)
    scores = []
    for f in frames:
        img = read_color(Path(f.color_path))
        scores.append(blurriness(img))
    picks = select_keyframes(scores, cfg.keyframe_interval)
    keyframes = []
    for new_idx, idx in enumerate(picks):
        f = frames[idx]
        keyframes.append(
            FrameData(
                index=new_idx,
                color=read_color(Path(f.color_path)),
                depth=read_depth(Path(f.depth_path), intr.depth_scale),
                pose=f.pose,
                blur=scores[idx],
                timestamp=f.timestamp,
            )
        )
    log.info("keyframes: %d of %d frames", len(keyframes), len(frames))
    return keyframes, intr, picks


def run_all(
    mesh_path: str | Path,
    seq_dir: str | Path | None,
    out_dir: str | Path,
    cfg: PipelineConfig,
    fmt: str = "tum",
    stop_after: str | None = None,
) -> dict:
    """Full pipeline: partition, simplify, texture, geometry, export.

    Returns the run report (also written to out_dir/report.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timer = _Timer()
    metrics: dict = {}
    warnings: list[str] = []

    mesh = load_mesh(mesh_path) if not isinstance(mesh_path, IndexedMesh) else mesh_path
    metrics["input_vertices"] = mesh.n_vertices
    metrics["input_faces"] = mesh.n_faces
    if mesh.dropped_faces:
        warnings.append(f"dropped {mesh.dropped_faces} degenerate input faces")

    with timer.stage("partition"):
        clusters = partition_planes(mesh, cfg)
        metrics["clusters_before_merge"] = clusters.n_clusters
        clusters = merge_planes(mesh, clusters, cfg)
        metrics["clusters_after_merge"] = clusters.n_clusters
    bundle.write_labels(clusters.face_labels, out / "dense_labels.npy")
    bundle.write_proxies(clusters.proxies, out / "proxies.json")
    save_cluster_debug_ply(mesh, clusters.face_labels, out / "partition_debug.ply")
    bundle.write_meta(out / "meta.json", "partition", mesh=str(mesh_path))
    if stop_after == "partition":
        return _finish_report(out, metrics, timer, warnings, cfg)

    with timer.stage("simplify"):
        plan = make_plan(mesh, clusters, cfg.simplify_ratio, cfg.min_cluster_faces)
        smesh, sclusters = simplify_two_step(mesh, clusters, plan)
        metrics["output_vertices"] = smesh.n_vertices
        metrics["output_faces"] = smesh.n_faces
        metrics["face_ratio"] = smesh.n_faces / mesh.n_faces
    save_mesh(smesh, out / "simplified.ply")
    bundle.write_labels(sclusters.face_labels, out / "simplified_labels.npy")
    bundle.write_meta(out / "meta.json", "simplify", mesh=str(mesh_path))
    if stop_after == "simplify":
        return _finish_report(out, metrics, timer, warnings, cfg)

    with timer.stage("texel_atlas"):
        patches, texels = build_patches_and_texels(smesh, sclusters, cfg.texel_density)
        metrics["texel_count"] = len(texels)
        metrics["patch_count"] = len(patches)

    if seq_dir is None:
        raise ValueError("texture stage requires an RGB-D sequence directory")
    with timer.stage("keyframes"):
        keyframes, intr, picks = load_keyframes(seq_dir, fmt, cfg)
        metrics["keyframe_count"] = len(keyframes)

    with timer.stage("joint_opt"):
        state = make_state(texels, keyframes, sclusters.proxies, intr, cfg)
        optimize(state)
        metrics["E_tex_initial"] = state.trace[0]["E_tex"]
        metrics["E_tex_final"] = state.trace[-1]["E_tex"]
        metrics["outer_iterations"] = state.trace[-1]["iteration"]
    opt_proxies = _proxies_from_state(state, sclusters.proxies)
    sclusters = ClusterSet(
        face_labels=sclusters.face_labels,
        proxies=opt_proxies,
        adjacency=sclusters.adjacency,
    )
    bundle.write_texels(texels, out / "texels.bin")
    bundle.write_proxies(opt_proxies, out / "proxies_opt.json")
    _write_trace(state.trace, out / "energy.csv")
    bundle.write_meta(out / "meta.json", "texture", mesh=str(mesh_path))
    if stop_after == "texture":
        return _finish_report(out, metrics, timer, warnings, cfg)

    with timer.stage("geom_opt"):
        normals = np.stack([p.normal for p in opt_proxies])
        offsets = np.array([p.offset for p in opt_proxies])
        final_mesh, geo_report = optimize_geometry(
            smesh, texels, normals, offsets, cfg.lambda3
        )
        metrics.update({k: float(v) for k, v in geo_report.items()})

    with timer.stage("export"):
        layout = pack_atlas(patches, cfg.atlas_gutter, cfg.atlas_max_dim)
        pages = bake_atlas(patches, layout, texels)
        uvs, fpages = face_uvs(final_mesh, patches, layout, cfg.texel_density)
        if len(pages) > 1:
            warnings.append(f"atlas spans {len(pages)} pages; exporting page 0 UVs only")
        save_textured_mesh(final_mesh, pages[0], uvs, out / "final.obj")
        save_mesh(final_mesh, out / "final.ply")
        metrics["atlas_pages"] = len(pages)
        metrics["atlas_size"] = list(layout.pages[0])
    bundle.write_meta(out / "meta.json", "geometry", mesh=str(mesh_path))
    return _finish_report(out, metrics, timer, warnings, cfg)


def _write_trace(trace: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "E_c", "E_p", "E_s", "E_tex"])
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _finish_report(out: Path, metrics, timer, warnings, cfg) -> dict:
    report = {
        "metrics": metrics,
        "timings": {k: round(v, 3) for k, v in timer.times.items()},
        "warnings": warnings,
        "config": asdict(cfg),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# stage-wise entry points over the bundle directory
# ---------------------------------------------------------------------------


def stage_partition(mesh_path, out_dir, cfg) -> dict:
    return run_all(mesh_path, None, out_dir, cfg, stop_after="partition")


def stage_simplify(mesh_path, out_dir, cfg) -> dict:
    out = Path(out_dir)
    meta = bundle.read_meta(out / "meta.json")
    mesh = load_mesh(mesh_path)
    labels = bundle.read_labels(out / "dense_labels.npy")
    proxies = bundle.read_proxies(out / "proxies.json")
    if len(labels) != mesh.n_faces:
        raise ValueError("label array does not match mesh face count")
    clusters = ClusterSet(
        face_labels=labels, proxies=proxies,
        adjacency=cluster_adjacency(mesh, labels, len(proxies)),
    )
    plan = make_plan(mesh, clusters, cfg.simplify_ratio, cfg.min_cluster_faces)
    smesh, sclusters = simplify_two_step(mesh, clusters, plan)
    save_mesh(smesh, out / "simplified.ply")
    bundle.write_labels(sclusters.face_labels, out / "simplified_labels.npy")
    bundle.write_meta(out / "meta.json", "simplify", mesh=str(mesh_path))
    return {"output_faces": smesh.n_faces, "meta_stage_was": meta["stage"]}


def stage_texture(seq_dir, fmt, out_dir, cfg) -> dict:
    out = Path(out_dir)
    meta = bundle.read_meta(out / "meta.json")
    if meta["stage"] not in ("simplify", "texture", "geometry"):
        raise ValueError(f"texture stage needs simplify outputs, found stage {meta['stage']!r}")
    smesh = load_mesh(out / "simplified.ply")
    labels = bundle.read_labels(out / "simplified_labels.npy")
    proxies = bundle.read_proxies(out / "proxies.json")
    sclusters = ClusterSet(
        face_labels=labels, proxies=proxies,
        adjacency=cluster_adjacency(smesh, labels, len(proxies)),
    )
    patches, texels = build_patches_and_texels(smesh, sclusters, cfg.texel_density)
    keyframes, intr, _ = load_keyframes(seq_dir, fmt, cfg)
    state = make_state(texels, keyframes, sclusters.proxies, intr, cfg)
    optimize(state)
    opt_proxies = _proxies_from_state(state, sclusters.proxies)
    bundle.write_texels(texels, out / "texels.bin")
    bundle.write_proxies(opt_proxies, out / "proxies_opt.json")
    _write_trace(state.trace, out / "energy.csv")
    bundle.write_meta(out / "meta.json", "texture", mesh=meta.get("mesh", ""))
    return {"E_tex_final": state.trace[-1]["E_tex"], "keyframes": len(keyframes)}


def stage_geometry(out_dir, cfg) -> dict:
    out = Path(out_dir)
    meta = bundle.read_meta(out / "meta.json")
    if meta["stage"] not in ("texture", "geometry"):
        raise ValueError(f"geometry stage needs texture outputs, found stage {meta['stage']!r}")
    smesh = load_mesh(out / "simplified.ply")
    texels = bundle.read_texels(out / "texels.bin")
    proxies = bundle.read_proxies(out / "proxies_opt.json")
    normals = np.stack([p.normal for p in proxies])
    offsets = np.array([p.offset for p in proxies])
    final_mesh, geo_report = optimize_geometry(smesh, texels, normals, offsets, cfg.lambda3)
    save_mesh(final_mesh, out / "final.ply")
    bundle.write_meta(out / "meta.json", "geometry", mesh=meta.get("mesh", ""))
    return geo_report


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, help="JSON config file (flags override it)")
    p.add_argument("--merge-angle", type=float, dest="merge_angle_deg")
    p.add_argument("--merge-dist", type=float, dest="merge_dist")
    p.add_argument("--alpha", type=float, dest="alpha")
    p.add_argument("--simplify-ratio", type=float, dest="simplify_ratio")
    p.add_argument("--min-cluster-faces", type=int, dest="min_cluster_faces")
    p.add_argument("--texel-density", type=float, dest="texel_density")
    p.add_argument("--keyframe-interval", type=int, dest="keyframe_interval")
    p.add_argument("--depth-scale", type=float, dest="depth_scale")
    p.add_argument("--lambda2", type=float, dest="lambda2")
    p.add_argument("--lambda3", type=float, dest="lambda3")
    p.add_argument("--max-outer", type=int, dest="max_outer")
    p.add_argument("--tol", type=float, dest="tol")
    p.add_argument("--grid", type=str, dest="grid", help="correction grid, e.g. 20x16")
    p.add_argument("--grayscale", action="store_true", dest="grayscale", default=None)
    p.add_argument("--vis-refresh", type=int, dest="vis_refresh")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--threads", type=int, dest="threads")


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for name in (
        "merge_angle_deg", "merge_dist", "alpha", "simplify_ratio",
        "min_cluster_faces", "texel_density", "keyframe_interval", "depth_scale",
        "lambda2", "lambda3", "max_outer", "tol", "grayscale", "vis_refresh",
        "seed", "threads",
    ):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    grid = getattr(args, "grid", None)
    if grid:
        gw, gh = grid.lower().split("x")
        overrides["grid_width"] = int(gw)
        overrides["grid_height"] = int(gh)
    return cfg.replace(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planelite",
        description="Plane-structured simplification and texturing of dense RGB-D meshes",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_all = sub.add_parser("all", help="run the full pipeline")
    p_all.add_argument("--mesh", required=True)
    p_all.add_argument("--seq", required=True)
    p_all.add_argument("--format", default="tum", choices=("tum", "icl", "bundlefusion"))
    p_all.add_argument("--out", required=True)
    p_all.add_argument("--stop-after", choices=STAGES, default=None)
    _add_config_flags(p_all)

    p_part = sub.add_parser("partition", help="plane partition stage")
    p_part.add_argument("--mesh", required=True)
    p_part.add_argument("--out", required=True)
    _add_config_flags(p_part)

    p_simp = sub.add_parser("simplify", help="cluster-aware simplification stage")
    p_simp.add_argument("--mesh", required=True)
    p_simp.add_argument("--out", required=True)
    _add_config_flags(p_simp)

    p_tex = sub.add_parser("texture", help="texel sampling + joint optimization stage")
    p_tex.add_argument("--seq", required=True)
    p_tex.add_argument("--format", default="tum", choices=("tum", "icl", "bundlefusion"))
    p_tex.add_argument("--out", required=True)
    _add_config_flags(p_tex)

    p_geo = sub.add_parser("geometry", help="plane-consistent geometry solve stage")
    p_geo.add_argument("--out", required=True)
    _add_config_flags(p_geo)

    p_syn = sub.add_parser("synth", help="generate a synthetic scene + sequence")
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--room", default="4x3x2.5")
    p_syn.add_argument("--edge", type=float, default=0.02)
    p_syn.add_argument("--frames", type=int, default=24)
    p_syn.add_argument("--pattern", default="sine", choices=("sine", "checker", "flat"))
    p_syn.add_argument("--box", action="append", default=[],
                       help="cx,cy,sx,sy,sz (repeatable)")
    p_syn.add_argument("--image-size", default="320x240")
    p_syn.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_synth(args) -> int:
    from planelite.rgbd_io import Intrinsics
    from planelite.synth_oracle import Box, SceneSpec, build_scene, orbit_poses, write_sequence

    room = tuple(float(x) for x in args.room.lower().split("x"))
    boxes = []
    for spec in args.box:
        cx, cy, sx, sy, sz = (float(x) for x in spec.split(","))
        boxes.append(Box(center_xy=(cx, cy), size=(sx, sy, sz)))
    w, h = (int(x) for x in args.image_size.lower().split("x"))
    scene = build_scene(
        SceneSpec(room=room, boxes=boxes, edge=args.edge, pattern=args.pattern,
                  pattern_seed=args.seed)
    )
    intr = Intrinsics(fx=0.8 * w, fy=0.8 * w, cx=w / 2 - 0.5, cy=h / 2 - 0.5,
                      width=w, height=h)
    center = np.array([room[0] / 2, room[1] / 2, room[2] / 2])
    poses = orbit_poses(
        target=center + np.array([room[0] * 0.3, 0.0, 0.0]),
        eye_center=center, radius=min(room[:2]) * 0.25, n=args.frames,
    )
    outdir = Path(args.out)
    write_sequence(scene, poses, intr, outdir)
    save_mesh(scene.mesh, outdir / "dense_mesh.ply")
    bundle.write_proxies(scene.proxies, outdir / "gt_proxies.json")
    print(f"synthetic sequence written to {outdir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        cfg = _config_from_args(args)
        if args.command == "all":
            report = run_all(args.mesh, args.seq, args.out, cfg,
                             fmt=args.format, stop_after=args.stop_after)
            print(json.dumps(report["metrics"], indent=1, sort_keys=True))
        elif args.command == "partition":
            stage_partition(args.mesh, args.out, cfg)
        elif args.command == "simplify":
            stage_simplify(args.mesh, args.out, cfg)
        elif args.command == "texture":
            stage_texture(args.seq, args.format, args.out, cfg)
        elif args.command == "geometry":
            stage_geometry(args.out, cfg)
        return 0
    except (FileNotFoundError, ValueError, bundle.SchemaMismatch) as exc:
        log.error("input error: %s", exc)
        return 2
    except (RuntimeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
