"""Command-line interface: synth, fit, eval, export-mesh, check-jacobians.

Exit codes: 0 success, 1 failed self-check, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fileio
from .errors import DeformPrimError
from .fitting import FittingConfig, fit
from .geometry import PARAM_NAMES, GlobalParams

log = logging.getLogger("deformprim")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2
DEFAULT_SAMPLES = 2000


class UsageError(Exception):
    """Bad arguments, unreadable inputs or unwritable outputs."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import GENERATORS, generate

    out = _out_dir(args.out)
    params = None
    if args.generator == "superquadric":
        values = GlobalParams().to_dict()
        if args.eps is not None:
            values["eps1"], values["eps2"] = args.eps
        if args.scale is not None:
            values["a1"], values["a2"], values["a3"] = args.scale
        for name in PARAM_NAMES:
            flag = getattr(args, name, None)
            if flag is not None:
                values[name] = flag
        params = GlobalParams(**values)
        if not params.is_valid():
            raise UsageError(f"invalid superquadric parameters {values}")
    elif args.generator not in GENERATORS:
        raise UsageError(f"unknown generator {args.generator!r}; choose from {', '.join(GENERATORS)}")
    shape = generate(args.generator, args.seed, params)
    points = fileio.sample_surface(shape.vertices, shape.faces, args.samples, args.seed)
    fileio.write_obj(out / "target.obj", shape.vertices, shape.faces)
    fileio.write_xyz(out / "target.xyz", points)
    resolved = {"command": "synth", "generator": args.generator, "seed": args.seed, "samples": args.samples}
    if shape.primitive is not None:
        fileio.save_params([shape.primitive], out / "params.json", config={"generator": args.generator})
        resolved["params"] = params.to_dict()
    if shape.parts:
        parts = {k: {"center": c.tolist(), "half_size": h.tolist()} for k, (c, h) in shape.parts.items()}
        fileio.atomic_write_text(out / "parts.json", _dump(parts))
    fileio.atomic_write_text(out / "config.json", _dump(resolved))
    print(f"wrote {args.generator} target ({len(shape.faces)} faces, {len(points)} samples) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

_FIT_FLAGS = {
    "num_primitives": "num_primitives",
    "max_iters": "max_iters",
    "step_size": "step_size",
    "gamma": "gamma",
    "stage_iters": "stage_iters",
    "blocks": "blocks",
    "seed": "seed",
    "threads": "threads",
}


def resolve_fit_config(args) -> tuple:
    """Defaults, then the ``--config`` file, then explicit flags."""
    values = FittingConfig().to_dict()
    run = {"samples": DEFAULT_SAMPLES}
    if args.config:
        path = _existing(args.config, "config file")
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        fitting_doc = dict(doc.get("fitting", {}))
        for key in ("samples", "target"):
            if key in doc:
                run[key] = doc[key]
        unknown = set(fitting_doc) - set(values)
        if unknown:
            raise UsageError(f"unknown fitting keys in {path}: {sorted(unknown)}")
        values.update(fitting_doc)
    for flag, key in _FIT_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.samples is not None:
        run["samples"] = args.samples
    if args.target is not None:
        run["target"] = args.target
    if "target" not in run:
        raise UsageError("no target given (positional argument or 'target' in the config file)")
    try:
        cfg = FittingConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid fitting config: {exc}") from None
    return cfg, run


def cmd_fit(args) -> int:
    cfg, run = resolve_fit_config(args)
    target_path = _existing(run["target"], "target")
    out = _out_dir(args.out)
    resolved = {"command": "fit", "target": str(target_path), "samples": run["samples"], "fitting": cfg.to_dict()}
    fileio.atomic_write_text(out / "config.json", _dump(resolved))
    target = fileio.load_target(target_path, run["samples"], cfg.seed)
    result = fit(target, cfg)
    fileio.save_params(result.primitives, out / "params.json", cfg.to_dict(), result.loss_summary())
    fileio.write_loss_csv(out / "loss.csv", result.history)
    fileio.export_mesh(result.primitives, out / "mesh.obj")
    s = result.loss_summary()
    print(f"fit: {s['iterations']} iterations ({s['reason']}), L_ext={s['L_ext']:.6g}, chamfer={s['chamfer']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / export
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .metrics import evaluate

    prims, _, _ = fileio.load_params(_existing(args.params, "params file"))
    shape = fileio.read_shape(_existing(args.target, "target"))
    if shape.has_faces:
        points = fileio.sample_surface(shape.vertices, shape.faces, args.samples, args.seed)
        mesh = (shape.vertices, shape.faces)
    else:
        points, mesh = shape.vertices, None
    metrics = evaluate(prims, points, mesh, res=args.res, seed=args.seed)
    text = _dump(metrics)
    if args.out:
        out = Path(args.out)
        if out.parent and not out.parent.exists():
            raise UsageError(f"output directory does not exist: {out.parent}")
        fileio.atomic_write_text(out, text)
    else:
        sys.stdout.write(text)
    iou = "n/a" if metrics["iou"] is None else f"{metrics['iou']:.4f}"
    print(f"eval: chamfer_l1={metrics['chamfer_l1']:.6g} iou={iou} primitives={len(prims)}",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_export_mesh(args) -> int:
    prims, _, _ = fileio.load_params(_existing(args.params, "params file"))
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise UsageError(f"output directory does not exist: {out.parent}")
    fileio.export_mesh(prims, out, tuple(args.grid))
    print(f"wrote {len(prims)} primitive meshes to {out}")
    return EXIT_OK


def cmd_check_jacobians(args) -> int:
    from .checks import check_jacobians

    report = check_jacobians(args.seed, args.trials, args.tol)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed_default=0) -> None:
    p.add_argument("--seed", type=int, default=seed_default, help="random seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformprim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic target (OBJ, XYZ samples, parameters)")
    p.add_argument("generator", help="superquadric, union-of-boxes, chair-like or l-bracket")
    p.add_argument("--out", default="synth_out", help="output directory")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES, help="surface samples in target.xyz")
    p.add_argument("--eps", type=float, nargs=2, metavar=("E1", "E2"), help="squareness exponents")
    p.add_argument("--scale", type=float, nargs=3, metavar=("A1", "A2", "A3"), help="aspect ratios")
    for name in PARAM_NAMES:
        p.add_argument(f"--{name}", type=float, default=None, help=argparse.SUPPRESS)
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit deformable primitives to a target")
    p.add_argument("target", nargs="?", default=None, help="OBJ, PLY or XYZ target")
    p.add_argument("--config", help="JSON config: {'fitting': {...}, 'samples': N, 'target': PATH}")
    p.add_argument("--out", default="fit_out", help="output directory")
    p.add_argument("--samples", type=int, default=None, help="target samples drawn from a mesh")
    p.add_argument("--num-primitives", "-P", dest="num_primitives", type=int, default=None)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--stage-iters", dest="stage_iters", type=int, nargs=3, default=None)
    p.add_argument("--blocks", nargs="+", choices=("pose", "global", "local"), default=None)
    _common(p, seed_default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="Chamfer-L1 and IoU of fitted primitives against a target")
    p.add_argument("params", help="parameter JSON from 'fit'")
    p.add_argument("target", help="OBJ, PLY or XYZ target (IoU needs a closed mesh)")
    p.add_argument("--out", help="metrics JSON path (default: stdout)")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--res", type=int, default=64, help="voxel resolution for IoU")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mesh", help="write fitted primitives as an OBJ with one group each")
    p.add_argument("params", help="parameter JSON from 'fit'")
    p.add_argument("--out", default="primitives.obj")
    p.add_argument("--grid", type=int, nargs=2, default=(32, 32), metavar=("NU", "NV"))
    _common(p)
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("check-jacobians", help="finite-difference check of the model Jacobian")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help=argparse.SUPPRESS)
    _common(p)
    p.set_defaults(func=cmd_check_jacobians)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DeformPrimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
