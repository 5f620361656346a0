"""Command-line front end: interpolation benchmark, inpainting, optical flow.

Configuration precedence is CLI flags > config file > defaults; every run
writes a ``manifest.txt`` echoing the fully resolved configuration.  Exit
codes: 0 success, 2 bad input, 3 solver non-convergence (outputs are still
written).
"""

import argparse
import os
import sys

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NO_CONVERGENCE = 3


def _add_common(sub):
    sub.add_argument("--out-dir", required=True)
    sub.add_argument("--config", help="key-value config file")
    sub.add_argument("--tol", type=float, default=None,
                     help="solver residual tolerance")
    sub.add_argument("--theta-mark", type=float, default=None)
    sub.add_argument("--indicator", choices=["residual", "primal-dual"],
                     default=None)
    sub.add_argument("--interp", choices=["nodal", "l2-lagrange",
                                          "qi-lagrange", "l2-pixel"],
                     default=None)
    sub.add_argument("--setting-s", choices=["id", "grad"], default=None)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--timing", choices=["wall", "none"], default="wall",
                     help="'none' zeroes the seconds column for "
                          "reproducible CSVs")
    for key in ("alpha1", "alpha2", "beta", "lambda", "gamma1", "gamma2"):
        sub.add_argument("--" + key, dest=key, type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="afemtv",
        description="Adaptive FE minimization of the L1-L2-TV model")
    subs = parser.add_subparsers(dest="command", required=True)

    bench = subs.add_parser("interp-bench",
                            help="compare image-to-mesh interpolations")
    bench.add_argument("--input", required=True)
    bench.add_argument("--counts", default="32,16,13",
                       help="comma list of vertex counts per dimension")
    bench.add_argument("--methods",
                       default="nodal,l2-lagrange,qi-lagrange,l2-pixel")
    _add_common(bench)

    inp = subs.add_parser("inpaint", help="adaptive image inpainting")
    inp.add_argument("--input", required=True, help="corrupted image")
    inp.add_argument("--mask", required=True,
                     help="mask image, 0 = inpaint, 255 = keep")
    inp.add_argument("--reference", help="clean image for metrics")
    inp.add_argument("--n-coarsen", type=int, default=None)
    _add_common(inp)

    flow = subs.add_parser("optflow",
                           help="optical flow with adaptive warping")
    flow.add_argument("--frame0", required=True)
    flow.add_argument("--frame1", required=True)
    flow.add_argument("--gt-flow", help="ground-truth .flo for metrics")
    flow.add_argument("--eps-warp", type=float, default=None)
    flow.add_argument("--refinements", type=int, default=None)
    flow.add_argument("--mesh-scale", type=int, default=None)
    _add_common(flow)
    return parser


def _read_config_file(path):
    from .model import read_config
    return read_config(path)


def _resolve(args, file_cfg, defaults):
    """CLI > config file > defaults, for the keys listed in defaults."""
    out = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key.replace("-", "_"), None)
        if cli_val is not None:
            out[key] = cli_val
        elif file_cfg and key in file_cfg:
            val = file_cfg[key]
            out[key] = type(default)(val) if default is not None else val
        else:
            out[key] = default
    return out


def _write_manifest(out_dir, command, cfg):
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("command = %s\n" % command)
        for key in sorted(cfg):
            fh.write("%s = %s\n" % (key, cfg[key]))


def _write_csv(path, columns, rows):
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for c in columns:
                v = row.get(c, "")
                cells.append("%.17g" % v if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")


def _model_params(cfg, base):
    from .model import ModelParams
    merged = dict(base)
    for key in ("alpha1", "alpha2", "beta", "lambda", "gamma1", "gamma2"):
        if cfg.get(key) is not None:
            merged[key] = cfg[key]
    if cfg.get("setting-s") is not None:
        merged["setting_s"] = cfg["setting-s"]
    return ModelParams.from_dict(merged)


def cmd_interp_bench(args, file_cfg):
    import numpy as np

    from .apps.metrics import psnr, ssim
    from .fe_space import interpolate_image, resample_to_image
    from .imageio import load_image, save_image
    from .mesh import build_grid_mesh

    cfg = _resolve(args, file_cfg, {
        "input": None, "counts": "32,16,13",
        "methods": "nodal,l2-lagrange,qi-lagrange,l2-pixel",
        "seed": None, "threads": None})
    img = load_image(cfg["input"])
    n1, n2 = img.shape
    counts = [int(c) for c in str(cfg["counts"]).split(",") if c]
    methods = [m.strip().replace("-", "_")
               for m in str(cfg["methods"]).split(",") if m.strip()]
    _write_manifest(args.out_dir, "interp-bench", cfg)
    rows = []
    for count in counts:
        mesh = build_grid_mesh(count, count, (1.0, float(n1)),
                               (1.0, float(n2)))
        for method in methods:
            gh = interpolate_image(img, mesh, method)
            resampled = resample_to_image(gh, n1, n2)
            rows.append({"vertices": count, "method": method,
                         "psnr": psnr(resampled, img),
                         "ssim": ssim(resampled, img)
                         if min(n1, n2) >= 11 else float("nan")})
            save_image(os.path.join(
                args.out_dir, "render_%d_%s.png" % (count, method)),
                np.clip(resampled, 0.0, 1.0))
    _write_csv(os.path.join(args.out_dir, "interp_bench.csv"),
               ["vertices", "method", "psnr", "ssim"], rows)
    return EXIT_OK


def cmd_inpaint(args, file_cfg):
    from .apps.inpaint import DEFAULT_PARAMS, InpaintTask, inpaint
    from .imageio import load_image, save_image
    from .mesh import save_off, save_vtk

    cfg = _resolve(args, file_cfg, {
        "input": None, "mask": None, "reference": None,
        "n-coarsen": 0, "interp": "qi-lagrange", "indicator": "residual",
        "theta-mark": None, "tol": 1e-4, "seed": None, "threads": None,
        "alpha1": None, "alpha2": None, "beta": None, "lambda": None,
        "gamma1": None, "gamma2": None, "setting-s": None})
    img = load_image(cfg["input"])
    mask_img = load_image(cfg["mask"])
    if mask_img.shape != img.shape:
        print("error: mask-image size mismatch", file=sys.stderr)
        return EXIT_BAD_INPUT
    mask = mask_img < 0.5          # 0 = inpaint, 255 = keep
    reference = load_image(cfg["reference"]) if cfg["reference"] else None
    params = _model_params(cfg, DEFAULT_PARAMS)
    indicator = str(cfg["indicator"]).replace("-", "_")
    theta = cfg["theta-mark"]
    if theta is None:
        theta = 0.99 if indicator == "primal_dual" else 0.5
    _write_manifest(args.out_dir, "inpaint", dict(cfg, resolved_theta=theta))

    snapshots = []

    def snapshot(it, mesh, u, p, eta):
        path = os.path.join(args.out_dir, "mesh_iter_%02d.vtk" % it)
        save_vtk(mesh, path,
                 cell_data=None if eta is None else eta.values)
        snapshots.append(path)

    task = InpaintTask(img, mask, params=params,
                       n_coarsen=int(cfg["n-coarsen"]),
                       interp=str(cfg["interp"]).replace("-", "_"),
                       indicator=indicator, theta_mark=theta,
                       newton_tol=cfg["tol"], reference=reference)
    result = inpaint(task, on_iteration=snapshot)
    save_image(os.path.join(args.out_dir, "restored.png"), result.image)
    save_off(result.mesh, os.path.join(args.out_dir, "mesh_final.off"))

    cumulative = 0.0
    rows = []
    for row in result.trace:
        cumulative += row["seconds"]
        rows.append({"n_coarsen": result.n_coarsen,
                     "n_refine": result.n_refine,
                     "cells": row["cells"],
                     "psnr": row.get("psnr", float("nan")),
                     "ssim": row.get("ssim", float("nan")),
                     "seconds": 0.0 if args.timing == "none"
                     else cumulative})
    _write_csv(os.path.join(args.out_dir, "trace.csv"),
               ["n_coarsen", "n_refine", "cells", "psnr", "ssim",
                "seconds"], rows)
    if any(not rep.converged for rep in result.afem.reports):
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_optflow(args, file_cfg):
    import numpy as np

    from .apps.flowio import read_flo, write_flo
    from .apps.metrics import flow_to_color
    from .apps.optical_flow import DEFAULT_PARAMS, FlowTask, optical_flow
    from .imageio import load_image, save_rgb

    cfg = _resolve(args, file_cfg, {
        "frame0": None, "frame1": None, "gt-flow": None,
        "eps-warp": 5e-2, "refinements": 6, "mesh-scale": 8,
        "interp": "l2-lagrange", "indicator": "residual",
        "theta-mark": 0.5, "tol": 1e-3, "seed": None, "threads": None,
        "alpha1": None, "alpha2": None, "beta": None, "lambda": None,
        "gamma1": None, "gamma2": None, "setting-s": None})
    f0 = load_image(cfg["frame0"])
    f1 = load_image(cfg["frame1"])
    if f0.shape != f1.shape:
        print("error: frame size mismatch", file=sys.stderr)
        return EXIT_BAD_INPUT
    gt = None
    if cfg["gt-flow"]:
        try:
            gt = read_flo(cfg["gt-flow"])
        except ValueError as exc:
            print("error: %s" % exc, file=sys.stderr)
            return EXIT_BAD_INPUT
        if gt.shape[:2] != f0.shape:
            print("error: ground-truth flow size mismatch", file=sys.stderr)
            return EXIT_BAD_INPUT
    params = _model_params(cfg, DEFAULT_PARAMS)
    _write_manifest(args.out_dir, "optflow", cfg)

    task = FlowTask(f0, f1, params=params, eps_warp=cfg["eps-warp"],
                    mesh_scale=int(cfg["mesh-scale"]),
                    total_refinements=int(cfg["refinements"]),
                    interp=str(cfg["interp"]).replace("-", "_"),
                    indicator=str(cfg["indicator"]).replace("-", "_"),
                    theta_mark=cfg["theta-mark"], newton_tol=cfg["tol"],
                    gt_flow=gt)
    result = optical_flow(task)
    write_flo(os.path.join(args.out_dir, "flow.flo"), result.flow)
    norms = np.hypot(result.flow[..., 0], result.flow[..., 1])
    if gt is not None:
        gnorm = np.hypot(gt[..., 0], gt[..., 1])
        gnorm = gnorm[gnorm < 1e9]
        max_norm = float(gnorm.max()) if gnorm.size else 1.0
    else:
        max_norm = float(norms.max())
    save_rgb(os.path.join(args.out_dir, "flow.png"),
             flow_to_color(result.flow, max(max_norm, 1e-9)))

    columns = ["iteration", "cells", "data_diff", "improvement", "refined",
               "solver_iterations", "seconds"]
    if gt is not None:
        columns += ["ee_mean", "ee_std", "ae_mean", "ae_std"]
    rows = []
    for row in result.trace:
        row = dict(row)
        if args.timing == "none":
            row["seconds"] = 0.0
        rows.append(row)
    _write_csv(os.path.join(args.out_dir, "trace.csv"), columns, rows)
    if result.trace and not result.trace[-1]["converged"]:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    file_cfg = None
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            print("error: config file not found: %s" % args.config,
                  file=sys.stderr)
            return EXIT_BAD_INPUT
        file_cfg = _read_config_file(args.config)
    for attr in ("input", "mask", "reference", "frame0", "frame1",
                 "gt_flow"):
        path = getattr(args, attr, None)
        if path and not os.path.exists(path):
            print("error: missing input file: %s" % path, file=sys.stderr)
            return EXIT_BAD_INPUT
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        if args.command == "interp-bench":
            return cmd_interp_bench(args, file_cfg)
        if args.command == "inpaint":
            return cmd_inpaint(args, file_cfg)
        if args.command == "optflow":
            return cmd_optflow(args, file_cfg)
    except (ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_BAD_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
