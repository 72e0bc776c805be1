"""``splatsurf`` command-line interface.

Exit codes: 0 success, 1 decoder invariant violated, 2 usage or validation
error, 3 camera sampling exhausted, 4 numerical failure, 5 empty
reconstruction, 6 gradient check failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2
EXIT_SAMPLING = 3
EXIT_NUMERIC = 4
EXIT_EMPTY = 5
EXIT_GRADCHECK = 6

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class UsageError(Exception):
    pass


def _version() -> str:
    from . import __version__

    return __version__


def _limit_threads(n: int) -> None:
    """Cap library thread pools through the environment.

    The rendering kernels are serial; the cap matters for BLAS pools started
    after this call and for any child process.
    """
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: dict,
                    outputs: list, t0: float, status: int) -> None:
    from .io import write_json

    write_json(out / "manifest.json", {
        "command": command,
        "config": config,
        "seeds": seeds,
        "tool_version": _version(),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "exit_code": status,
        "wall_clock_s": time.perf_counter() - t0,
    })


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# Commands --------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    from .scene import bundled_spec, generate_scene, load_scene_spec, sample_trajectory
    from .scenedir import save_scene_dir

    if args.spec is None and args.builtin is None:
        raise UsageError("give --spec FILE or --builtin NAME")
    if args.spec is not None:
        if not Path(args.spec).is_file():
            raise UsageError(f"spec file {args.spec} not found")
        try:
            spec = load_scene_spec(args.spec)
        except json.JSONDecodeError as exc:
            raise UsageError(f"spec file {args.spec} is not valid JSON: {exc}") from exc
    else:
        spec = bundled_spec(args.builtin)
    if not 0 <= args.overlap_lo < args.overlap_hi <= 1:
        raise UsageError("overlap bounds must satisfy 0 <= lo < hi <= 1")
    t0 = time.perf_counter()
    scene = generate_scene(spec, args.seed)
    views = sample_trajectory(scene, args.n_views, (args.overlap_lo, args.overlap_hi), seed=args.seed,
                              width=args.width, height=args.height, fov_deg=args.fov,
                              voxel=args.overlap_voxel, max_attempts=args.max_attempts)
    out = _out_dir(args.out)
    written = save_scene_dir(out, scene, views)
    config = {"spec": spec, "n_views": args.n_views, "overlap": [args.overlap_lo, args.overlap_hi],
              "overlap_voxel": args.overlap_voxel, "max_attempts": args.max_attempts,
              "width": views[0].camera.width, "height": views[0].camera.height,
              "fov_deg": args.fov, "threads": args.threads}
    _write_manifest(out, "gen-scene", config, {"seed": args.seed},
                    {"spec": str(args.spec) if args.spec else f"builtin:{args.builtin}"}, written, t0, EXIT_OK)
    print(f"wrote {len(views)} views to {out}")
    return EXIT_OK


def _fit_config(args):
    from .fit import FitConfig

    base = {}
    if args.config is not None:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read fit config {args.config}: {exc}") from exc
    for key, flag in (("steps", args.steps), ("seed", args.seed),
                      ("init_noise", args.init_noise), ("init_stride", args.stride)):
        if flag is not None:
            base[key] = flag
    return FitConfig.from_json(base).ablate(args.ablate)


def cmd_fit(args) -> int:
    from .fit import NumericalFailure, depth_mae, fit_scene, init_gaussians
    from .io import dumps
    from .scenedir import load_scene_dir, split_views

    cfg = _fit_config(args)
    data = load_scene_dir(args.scene)
    train, _ = split_views(data.views, args.holdout)
    t0 = time.perf_counter()
    init, anchors = init_gaussians(train, cfg.init_noise, cfg.init_stride, cfg.seed,
                                   cfg.init_thickness, return_anchors=True)
    out = _out_dir(args.out)
    config = {"fit": cfg.to_json(), "holdout": args.holdout, "threads": args.threads}
    inputs = {"scene": str(args.scene), "config": args.config}
    try:
        trace = fit_scene(train, init, cfg, anchors=anchors)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_manifest(out, "fit", {**config, "failure": {"step": exc.step, "term": exc.term}},
                        {"seed": cfg.seed}, inputs, [], t0, EXIT_NUMERIC)
        return EXIT_NUMERIC
    trace.gaussians.save_ply(out / "gaussians.ply")
    with open(out / "trace.jsonl", "w") as fh:
        for bd in trace.losses:
            fh.write(dumps(bd.to_json()) + "\n")
    config["result"] = {"n_gaussians": len(trace.gaussians), "final_total": trace.losses[-1].total,
                        "depth_mae_m": depth_mae(trace.gaussians, train),
                        "step_seconds_mean": sum(trace.step_seconds) / len(trace.step_seconds)}
    _write_manifest(out, "fit", config, {"seed": cfg.seed}, inputs,
                    ["gaussians.ply", "trace.jsonl"], t0, EXIT_OK)
    print(f"fit {len(trace.gaussians)} Gaussians, final loss {trace.losses[-1].total:.6g}")
    return EXIT_OK


def _load_gaussians(path):
    from .rasterizer import Gaussians

    if path is None:
        raise UsageError("--gaussians is required")
    if not Path(path).is_file():
        raise UsageError(f"Gaussian file {path} not found")
    return Gaussians.load_ply(path)


def cmd_fuse_eval(args) -> int:
    from .fusion import reconstruct, rendered_depths
    from .io import write_json, write_mesh_ply
    from .metrics import score_mesh
    from .scenedir import load_scene_dir

    if not args.tau > 0:
        raise UsageError("--tau must be positive")
    if not args.voxel > 0:
        raise UsageError("--voxel must be positive")
    trunc = 4.0 * args.voxel if args.trunc is None else args.trunc
    if trunc < 2 * args.voxel:
        raise UsageError("--trunc must be at least twice --voxel")
    data = load_scene_dir(args.scene)
    cams = data.views.cameras
    t0 = time.perf_counter()
    if args.use_gt_depth:
        depths = [v.depth for v in data.views]
        source = "gt-depth"
    else:
        depths = rendered_depths(_load_gaussians(args.gaussians), cams, args.alpha_min)
        source = str(args.gaussians)
    mesh = reconstruct(depths, cams, data.scene.bbox, args.voxel, trunc)
    out = _out_dir(args.out)
    config = {"voxel": args.voxel, "trunc": trunc, "tau": args.tau, "alpha_min": args.alpha_min,
              "spacing": args.spacing if args.spacing else args.tau / 2, "use_gt_depth": args.use_gt_depth,
              "gt_region": "full" if args.full_gt else "observed", "threads": args.threads}
    inputs = {"scene": str(args.scene), "gaussians": source}
    if mesh.is_empty:
        print("error: reconstruction produced an empty mesh", file=sys.stderr)
        _write_manifest(out, "fuse-eval", config, {"seed": args.seed}, inputs, [], t0, EXIT_EMPTY)
        return EXIT_EMPTY
    write_mesh_ply(out / "mesh.ply", mesh.vertices, mesh.faces)
    observed = None if args.full_gt else ([v.depth for v in data.views], cams)
    score = score_mesh(mesh, data.gt_mesh, args.tau, args.spacing, args.seed, observed)
    write_json(out / "scores.json", score.to_json())
    _write_manifest(out, "fuse-eval", config, {"seed": args.seed}, inputs,
                    ["mesh.ply", "scores.json"], t0, EXIT_OK)
    print(f"precision {score.precision:.2f}  recall {score.recall:.2f}  f1 {score.f1:.2f}  (tau {args.tau} m)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, sabotage=args.sabotage)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_decoder_smoke(args) -> int:
    from .decoder import check_invariants

    if not 1 <= args.m <= args.n:
        raise UsageError("need 1 <= m <= n")
    if args.d < 1:
        raise UsageError("need d >= 1")
    fails = check_invariants(args.n, args.m, args.d, args.seed, args.size)
    for f in fails:
        print(f"violated: {f}")
    print(f"decoder n={args.n} m={args.m} d={args.d}: " + ("ok" if not fails else f"{len(fails)} violation(s)"))
    return EXIT_OK if not fails else EXIT_INVARIANT


def cmd_nvs_eval(args) -> int:
    from .io import write_json
    from .metrics import image_score
    from .rasterizer import rasterize
    from .scenedir import load_scene_dir

    data = load_scene_dir(args.scene)
    if not 0 <= args.holdout < len(data.views):
        raise UsageError(f"--holdout must be in 0..{len(data.views) - 1}")
    view = data.views[args.holdout]
    t0 = time.perf_counter()
    if args.inject_gt_render:
        rendered = view.image
        source = "gt-render"
    else:
        rendered = rasterize(_load_gaussians(args.gaussians), view.camera).rgb
        source = str(args.gaussians)
    score = image_score(rendered, view.image)
    out = _out_dir(args.out)
    write_json(out / "nvs.json", {**score.to_json(), "holdout": args.holdout})
    _write_manifest(out, "nvs-eval", {"holdout": args.holdout, "threads": args.threads},
                    {}, {"scene": str(args.scene), "gaussians": source}, ["nvs.json"], t0, EXIT_OK)
    print(f"view {args.holdout}: psnr {score.psnr_db:.2f} dB  ssim {score.ssim:.4f}")
    return EXIT_OK


# Parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .fit import ABLATIONS

    p = argparse.ArgumentParser(prog="splatsurf", description="Flattened-Gaussian surface reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads (1 = bit-exact)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="render a ground-truth view trajectory")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--spec", help="scene spec JSON file")
    src.add_argument("--builtin", choices=("plane", "room"), help="bundled scene spec")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--n-views", type=int, default=6)
    s.add_argument("--overlap-lo", type=float, default=0.3)
    s.add_argument("--overlap-hi", type=float, default=0.7)
    s.add_argument("--overlap-voxel", type=float, default=0.05)
    s.add_argument("--max-attempts", type=int, default=500)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--fov", type=float, help="horizontal field of view in degrees")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("fit", parents=[common], help="fit Gaussians to a generated scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", help="fit config JSON (flags override it)")
    s.add_argument("--ablate", choices=ABLATIONS, default="none")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--init-noise", type=float)
    s.add_argument("--stride", type=int)
    s.add_argument("--holdout", type=int, help="view index excluded from fitting")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("fuse-eval", parents=[common], help="fuse rendered depth and score the mesh")
    s.add_argument("--gaussians")
    s.add_argument("--scene", required=True)
    s.add_argument("--voxel", type=float, default=0.02)
    s.add_argument("--trunc", type=float, help="truncation distance (default 4 voxels)")
    s.add_argument("--tau", type=float, default=0.025)
    s.add_argument("--alpha-min", type=float, default=0.5)
    s.add_argument("--spacing", type=float, help="surface sample spacing in metres (default tau / 2)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--use-gt-depth", action="store_true", help="fuse ground-truth depth instead")
    s.add_argument("--full-gt", action="store_true", help="score against the whole GT mesh, not only observed parts")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sabotage", action="store_true", help="corrupt analytic gradients (negative control)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("decoder-smoke", parents=[common], help="run the decoder and check its invariants")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--m", type=int, default=2)
    s.add_argument("--d", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_decoder_smoke)

    s = sub.add_parser("nvs-eval", parents=[common], help="PSNR/SSIM on a held-out view")
    s.add_argument("--gaussians")
    s.add_argument("--scene", required=True)
    s.add_argument("--holdout", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--inject-gt-render", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_nvs_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from .fit import NumericalFailure
    from .numerics import InvalidInputError
    from .scene import SamplingExhaustedError

    try:
        _limit_threads(args.threads)
        return args.func(args)
    except (UsageError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SamplingExhaustedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
