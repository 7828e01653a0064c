"""Command-line driver: ``geotomo <subcommand> [flags]``.

Exit codes: 0 ok, 1 usage or configuration error, 2 numerical failure,
3 file input/output error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import io
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (build_mesh, build_operator, psi_function, run_coverage, run_example,
                          run_oracles, write_oracle_csv, EXAMPLE_DEFAULTS)
from .forward import (RayTransformMatrix, Sinogram, build_grid, load_matrix, ray_integrals,
                      save_matrix, simulate_data)
from .geometry import ConformalMetric, FanBeamCoord, TrappingError, geodesic_trace
from .mesh import MeshError, mass_matrix, project_l2, save_mesh
from .phantoms import SHEPP_LOGAN_TABLE, get_phantom
from .posterior import compute_posterior, cross_section, functional_credible, sample_posterior
from .prior import MaternParams, assemble_prior_cov

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class FileFormatError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> config key
_FLAGS = {
    "profile": str, "metric": str, "mesh_nodes": int, "mesh_file": str, "nbeta": int,
    "nalpha": int, "quad_step": float, "epsilon": float, "sigma": float, "nu": float,
    "ell": float, "phantom": str, "variant": str, "attenuation": float, "seed": int,
    "output": str, "n_draws": int, "level": float, "replicates": int, "truth": str,
    "psi_x1": float, "psi_x2": float, "psi_rate": float, "resolution": int,
}
_RENAME = {"nbeta": "n_beta", "nalpha": "n_alpha"}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment configuration")
    g.add_argument("--config", help="key = value configuration file")
    for name, typ in _FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    return p


def resolve_config(args, example: int | None = None) -> ExperimentConfig:
    overrides = {_RENAME.get(k, k): getattr(args, k) for k in _FLAGS}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    profile = overrides.pop("profile", None)
    if args.config:
        cfg = load_config(args.config)
        if profile is not None:
            cfg = ExperimentConfig.for_profile(profile, **{
                k: getattr(cfg, k) for k in cfg.__dataclass_fields__
                if k not in ("profile", "mesh_nodes", "n_beta", "n_alpha")})
    else:
        cfg = ExperimentConfig.for_profile(profile or "full")
    if example is not None:
        cfg = cfg.with_overrides(**{k: v for k, v in EXAMPLE_DEFAULTS[example].items()
                                    if k not in overrides})
    return cfg.with_overrides(**overrides)


def _outdir(cfg) -> Path:
    return io.ensure_dir(cfg.output)


def _load_sinogram(path, grid, cfg) -> Sinogram:
    try:
        return Sinogram.from_csv(path, grid, cfg.epsilon, cfg.seed)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


def _operator(cfg, mesh, args):
    grid = build_grid(cfg.n_beta, cfg.n_alpha)
    if getattr(args, "matrix", None):
        try:
            A = load_matrix(args.matrix, grid, ConformalMetric.from_name(cfg.metric),
                            cfg.quad_step, mesh)
        except ValueError as exc:
            raise FileFormatError(f"{args.matrix}: {exc}") from exc
        if A.shape[1] != mesh.m:
            raise FileFormatError(f"matrix has {A.shape[1]} columns, mesh has {mesh.m} nodes")
        return A
    return build_operator(cfg, mesh, grid)


def _posterior(cfg, args):
    mesh = build_mesh(cfg)
    A = _operator(cfg, mesh, args)
    y = _load_sinogram(args.sinogram, A.grid, cfg)
    cov = assemble_prior_cov(mesh, MaternParams(cfg.nu, cfg.ell, cfg.sigma))
    return mesh, A, compute_posterior(A, A.grid, cov, cfg.sigma, cfg.epsilon, y)


def cmd_mesh_gen(cfg, args):
    mesh = build_mesh(cfg)
    out = Path(args.out) if args.out else _outdir(cfg) / "mesh.txt"
    save_mesh(mesh, out)
    print(f"wrote {out}: {mesh.m} nodes, {len(mesh.triangles)} triangles, area {mesh.area:.6f}")


def cmd_assemble(cfg, args):
    metric = ConformalMetric.from_name(cfg.metric)
    if args.dump_path:
        try:
            beta, alpha = (float(v) for v in args.dump_path.split(","))
            coord = FanBeamCoord(beta, alpha)
        except ValueError as exc:
            raise UsageError(f"--dump-path expects 'beta,alpha': {exc}") from exc
        path = geodesic_trace(metric, coord, cfg.quad_step)
        out = Path(args.path_out) if args.path_out else _outdir(cfg) / "geodesic.csv"
        path.to_csv(out)
        print(f"wrote {out}: tau = {path.tau:.12g}")
        if args.no_matrix:
            return
    mesh = build_mesh(cfg)
    A = build_operator(cfg, mesh)
    out = Path(args.out) if args.out else _outdir(cfg) / f"A_{A.variant}.txt"
    save_matrix(A, out)
    print(f"wrote {out}: {A.shape[0]} x {A.shape[1]}, nnz {A.matrix.nnz}")


def cmd_simulate(cfg, args):
    grid = build_grid(cfg.n_beta, cfg.n_alpha)
    metric = ConformalMetric.from_name(cfg.metric)
    f = get_phantom(cfg.phantom)
    att = None
    if cfg.variant == "attenuated":
        c = cfg.attenuation
        att = lambda x: np.full(x.shape[0], c)  # noqa: E731
    clean = ray_integrals(f, grid, metric, cfg.quad_step / 4, cfg.variant == "weighted", att)
    shell = RayTransformMatrix(sp.csr_matrix((grid.n, 0)), cfg.variant, grid, metric,
                               cfg.quad_step)
    y = simulate_data(shell, None, cfg.epsilon, cfg.seed, clean=clean)
    out = Path(args.out) if args.out else _outdir(cfg) / "sinogram.csv"
    y.to_csv(out)
    io.write_pgm(out.with_suffix(".pgm"), grid.as_image(y.values))
    print(f"wrote {out} ({grid.n} rays, epsilon {cfg.epsilon:g}, seed {cfg.seed})")


def cmd_invert(cfg, args):
    mesh, A, post = _posterior(cfg, args)
    out = _outdir(cfg)
    files = [out / "posterior_summary.txt", out / "posterior_mean.pgm"]
    io.write_posterior_summary(files[0], post, cfg.nu, cfg.ell, cfg.seed)
    io.write_pgm(files[1], io.rasterize(mesh, post.mean, cfg.resolution))
    inputs = [args.sinogram] + ([args.matrix] if args.matrix else [])
    io.write_manifest(out, cfg.to_text(), inputs=inputs, outputs=files)
    print(f"wrote {files[0]} and {files[1]}")


def cmd_sample(cfg, args):
    mesh, A, post = _posterior(cfg, args)
    count = args.count or cfg.n_draws
    draws = sample_posterior(post, count, cfg.seed + 1)
    out = _outdir(cfg)
    xs = cross_section(draws, mesh)
    xs.to_csv(out / "cross_section.csv")
    if args.draws_out:
        np.savetxt(args.draws_out, draws, delimiter=",", fmt="%.10g")
    print(f"wrote {out / 'cross_section.csv'} ({count} draws)")


def cmd_credible(cfg, args):
    mesh, A, post = _posterior(cfg, args)
    mass = mass_matrix(mesh)
    psi = project_l2(mesh, psi_function(cfg), mass)
    rep = functional_credible(post, psi, mass, cfg.level, cfg.n_draws, cfg.seed + 1)
    lo, hi = rep.interval
    path = _outdir(cfg) / "credible.csv"
    with open(path, "w") as fh:
        fh.write("estimate,radius,radius_gaussian,sd,level,n_draws,lower,upper\n")
        fh.write(f"{rep.estimate:.17g},{rep.radius:.17g},{rep.radius_gaussian:.17g},"
                 f"{rep.sd:.17g},{rep.level},{rep.n_draws},{lo:.17g},{hi:.17g}\n")
    print(f"<f, psi> = {rep.estimate:.8g} +/- {rep.radius:.3g} "
          f"(gaussian {rep.radius_gaussian:.3g}, level {rep.level})")


def cmd_coverage(cfg, args):
    path = _outdir(cfg) / "coverage.csv"
    res = run_coverage(cfg, path)
    io.write_manifest(_outdir(cfg), cfg.to_text(), outputs=[path])
    print(f"coverage {res.coverage:.3f} at level {res.level} over {len(res.covered)} replicates; "
          f"mean radius {res.mean_radius:.4g}")


def cmd_example(cfg, args):
    res = run_example(args.which, cfg, Path(cfg.output) / f"example{args.which}")
    if args.which == 3:
        print(f"boundary band (|x1| >= 0.9): h-route {res.band_h:.4g}, "
              f"f-route x sqrt(d_M) {res.band_f:.4g}")
        print(f"boundary mean error: h-route {res.boundary_error_h:.4g}, "
              f"f-route x sqrt(d_M) {res.boundary_error_f:.4g}")
    else:
        print(f"relative L2 error {res.rel_error:.4f}")
    print(f"artifacts in {res.outdir}")


def cmd_oracles(cfg, args):
    rows = run_oracles(cfg)
    path = _outdir(cfg) / "oracles.csv"
    write_oracle_csv(rows, path)
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.check:24s} expected {r.expected:.8g} observed {r.observed:.8g} "
              f"tol {r.tolerance:.3g}")
    print(f"wrote {path}")
    if args.strict and not all(r.passed for r in rows):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_dump_phantom(cfg, args):
    name = args.name or cfg.phantom
    if args.table:
        if name.replace("-", "_") != "shepp_logan":
            raise UsageError("--table is only available for the Shepp-Logan phantom")
        print("intensity,x0,y0,a,b,angle_deg")
        for row in SHEPP_LOGAN_TABLE:
            print(",".join(f"{v:g}" for v in row))
    f = get_phantom(name)
    out = Path(args.out) if args.out else _outdir(cfg) / f"{name}.pgm"
    io.write_pgm(out, io.rasterize_function(f, cfg.resolution), comment=f"phantom {name}")
    print(f"wrote {out}", file=sys.stderr if args.table else sys.stdout)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="geotomo", description="Bayesian geodesic X-ray tomography on the unit disk")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("mesh-gen", parents=[common], help="generate a concentric-ring disk mesh")
    s.add_argument("--out")
    s.set_defaults(func=cmd_mesh_gen)

    s = sub.add_parser("assemble", parents=[common], help="assemble and save the forward matrix")
    s.add_argument("--out")
    s.add_argument("--dump-path", metavar="BETA,ALPHA", help="also write one traced geodesic")
    s.add_argument("--path-out")
    s.add_argument("--no-matrix", action="store_true", help="with --dump-path: skip assembly")
    s.set_defaults(func=cmd_assemble)

    s = sub.add_parser("simulate", parents=[common], help="noisy data from an analytic phantom")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("invert", cmd_invert, "posterior mean and summary"),
                                 ("sample", cmd_sample, "posterior draws and cross-section"),
                                 ("credible", cmd_credible, "credible interval for <f, psi>")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--sinogram", required=True)
        s.add_argument("--matrix", help="forward matrix file (otherwise assembled)")
        if name == "sample":
            s.add_argument("--count", type=int)
            s.add_argument("--draws-out")
        s.set_defaults(func=func)

    s = sub.add_parser("coverage", parents=[common], help="frequentist coverage experiment")
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("example", parents=[common], help="run example 1, 2 or 3")
    s.add_argument("which", type=int, choices=(1, 2, 3))
    s.set_defaults(func=cmd_example)

    s = sub.add_parser("oracles", parents=[common], help="analytic oracle report")
    s.add_argument("--strict", action="store_true", help="exit 2 if any check fails")
    s.set_defaults(func=cmd_oracles)

    s = sub.add_parser("dump-phantom", parents=[common], help="rasterise a phantom to PGM")
    s.add_argument("--name")
    s.add_argument("--table", action="store_true", help="print the ellipse table")
    s.add_argument("--out")
    s.set_defaults(func=cmd_dump_phantom)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args, args.which if args.command == "example" else None)
        code = args.func(cfg, args)
        return EXIT_OK if code is None else code
    except (ConfigError, UsageError) as exc:
        print(f"geotomo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MeshError, FileFormatError) as exc:
        print(f"geotomo: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (sla.LinAlgError, TrappingError, FloatingPointError, ValueError) as exc:
        print(f"geotomo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
