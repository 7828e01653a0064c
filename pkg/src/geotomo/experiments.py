"""Experiment drivers: the three reconstruction examples, the oracle suite and coverage runs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .forward import (RayTransformMatrix, assemble_A, assemble_A_attenuated, assemble_A_weighted,
                      back_project, build_grid, normal_apply, simulate_data)
from .geometry import ConformalMetric, boundary_ratio_min
from .mesh import TriMesh, generate_disk_mesh, load_mesh, mass_matrix
from .phantoms import gaussian_bump, get_phantom, oracle_N1
from .posterior import (compute_posterior, coverage_experiment, cross_section,
                        sample_posterior, tikhonov_gradient)
from .prior import MaternParams, assemble_prior_cov, dm_eval

__all__ = ["example_config", "build_mesh", "build_operator", "psi_function", "ExampleResult",
           "run_example", "OracleRow", "run_oracles", "oracle_tolerance", "write_oracle_csv", "run_coverage",
           "EXAMPLE_DEFAULTS", "BAND_INNER", "band_comparison", "boundary_mean_error"]

EXAMPLE_DEFAULTS = {
    1: {"metric": "euclidean", "phantom": "shepp_logan", "epsilon": 1e-3},
    2: {"metric": "paper_bump", "phantom": "shepp_logan", "epsilon": 1e-3},
    3: {"metric": "euclidean", "phantom": "h2", "epsilon": 1e-2},
}
BAND_INNER = 0.9
ATTENUATION_CONSTANT = 0.7
ALPHA_MAX = 1.4


def example_config(which: int, base: ExperimentConfig | None = None,
                   **overrides) -> ExperimentConfig:
    """``base`` (default: full profile) with the example's metric, phantom and noise level."""
    if which not in EXAMPLE_DEFAULTS:
        raise ValueError("which must be 1, 2 or 3")
    base = ExperimentConfig() if base is None else base
    return base.with_overrides(**{**EXAMPLE_DEFAULTS[which], **overrides})


def build_mesh(cfg: ExperimentConfig) -> TriMesh:
    return load_mesh(cfg.mesh_file) if cfg.mesh_file else generate_disk_mesh(cfg.mesh_nodes)


def build_operator(cfg: ExperimentConfig, mesh: TriMesh, grid=None, metric=None,
                   variant: str | None = None) -> RayTransformMatrix:
    grid = build_grid(cfg.n_beta, cfg.n_alpha) if grid is None else grid
    metric = ConformalMetric.from_name(cfg.metric) if metric is None else metric
    variant = cfg.variant if variant is None else variant
    if variant == "plain":
        return assemble_A(mesh, grid, metric, cfg.quad_step)
    if variant == "weighted":
        return assemble_A_weighted(mesh, grid, metric, cfg.quad_step)
    a = np.full(mesh.m, cfg.attenuation)
    return assemble_A_attenuated(mesh, grid, metric, a, cfg.quad_step)


def psi_function(cfg: ExperimentConfig):
    return gaussian_bump((cfg.psi_x1, cfg.psi_x2), cfg.psi_rate)


@dataclass
class ExampleResult:
    which: int
    outdir: Path
    files: list
    rel_error: float = float("nan")
    band_h: float = float("nan")
    band_f: float = float("nan")
    boundary_error_h: float = float("nan")
    boundary_error_f: float = float("nan")
    extras: dict = field(default_factory=dict)

    @property
    def boundary_band_narrower(self) -> bool:
        return bool(self.band_h < self.band_f)


def _relative_error(mesh_mass, est, truth) -> float:
    d = est - truth
    return float(np.sqrt(d @ (mesh_mass @ d)) / np.sqrt(truth @ (mesh_mass @ truth)))


def band_comparison(xs_h, xs_f, inner: float = BAND_INNER):
    """Mean pointwise 90% band widths near the boundary on ``inner <= |x1| < 1``.

    The f-route band is mapped to h-coordinates by the factor ``sqrt(d_M)``.
    The endpoints ``|x1| = 1`` are left out because ``d_M`` vanishes there.
    """
    sel = (np.abs(xs_h.x1) >= inner) & (np.abs(xs_h.x1) < 1.0)
    pts = np.column_stack([xs_h.x1[sel], np.zeros(sel.sum())])
    w_h = xs_h.band_width[sel]
    w_f = xs_f.band_width[sel] * np.sqrt(dm_eval(pts))
    return float(np.mean(w_h)), float(np.mean(w_f))


def boundary_mean_error(mesh: TriMesh, mean_h, mean_f, h_true, inner: float = BAND_INNER,
                        resolution: int = 201):
    """Mean ``|estimate - h2|`` on ``inner <= |x1| < 1`` of the x2 = 0 cross-section,
    with the f-route mean mapped to h-coordinates by ``sqrt(d_M)``."""
    x1 = np.linspace(-1.0, 1.0, resolution)
    x1 = x1[(np.abs(x1) >= inner) & (np.abs(x1) < 1.0)]
    pts = np.column_stack([x1, np.zeros_like(x1)])
    t = h_true(pts)
    e_h = np.abs(mesh.evaluate(mean_h, pts, extend=True) - t)
    e_f = np.abs(mesh.evaluate(mean_f, pts, extend=True) * np.sqrt(dm_eval(pts)) - t)
    return float(np.mean(e_h)), float(np.mean(e_f))


def _finish(outdir, cfg, files, inputs=()):
    io.write_manifest(outdir, cfg.to_text(), inputs=inputs, outputs=files)


def run_example(which: int, cfg: ExperimentConfig | None = None, outdir=None,
                mesh: TriMesh | None = None) -> ExampleResult:
    """Run Example 1 (Euclidean), 2 (curved metric) or 3 (boundary-weighted) end to end.

    Writes the sinogram (CSV and PGM), posterior mean PGM, a cross-section CSV
    of ``n_draws`` posterior draws, the posterior summary and a manifest.
    ``cfg`` is used as given; build it with :func:`example_config` to get the
    example's own metric, phantom and noise level.
    """
    if which not in EXAMPLE_DEFAULTS:
        raise ValueError("which must be 1, 2 or 3")
    cfg = example_config(which) if cfg is None else cfg
    out = io.ensure_dir(outdir if outdir is not None else Path(cfg.output) / f"example{which}")
    mesh = build_mesh(cfg) if mesh is None else mesh
    grid = build_grid(cfg.n_beta, cfg.n_alpha)
    metric = ConformalMetric.from_name(cfg.metric)
    cov = assemble_prior_cov(mesh, MaternParams(cfg.nu, cfg.ell, cfg.sigma))
    mass = mass_matrix(mesh)
    files = []
    inputs = [cfg.mesh_file] if cfg.mesh_file else []

    def emit_sino(y):
        p_csv, p_pgm = out / "sinogram.csv", out / "sinogram.pgm"
        y.to_csv(p_csv)
        io.write_pgm(p_pgm, grid.as_image(y.values), comment="sinogram: alpha down, beta across")
        files.extend([p_csv, p_pgm])

    def emit_posterior(post, tag, scale=None):
        suffix = f"_{tag}" if tag else ""
        p_mean = out / f"posterior_mean{suffix}.pgm"
        io.write_pgm(p_mean, io.rasterize(mesh, post.mean, cfg.resolution))
        p_sum = out / f"posterior_summary{suffix}.txt"
        io.write_posterior_summary(p_sum, post, cfg.nu, cfg.ell, cfg.seed)
        draws = sample_posterior(post, cfg.n_draws, cfg.seed + 1)
        xs = cross_section(draws, mesh, scale=scale)
        p_xs = out / f"cross_section{suffix}.csv"
        xs.to_csv(p_xs)
        files.extend([p_mean, p_sum, p_xs])
        return xs

    result = ExampleResult(which, out, files)
    if which in (1, 2):
        A = assemble_A(mesh, grid, metric, cfg.quad_step)
        f1 = get_phantom(cfg.phantom)
        y = simulate_data(A, f1, cfg.epsilon, cfg.seed)
        emit_sino(y)
        post = compute_posterior(A, grid, cov, cfg.sigma, cfg.epsilon, y)
        emit_posterior(post, "")
        result.rel_error = _relative_error(mass, post.mean, mesh.nodal(f1))
        result.extras["posterior"] = post
    else:
        h2 = get_phantom(cfg.phantom)
        A_d = assemble_A_weighted(mesh, grid, metric, cfg.quad_step)
        A = assemble_A(mesh, grid, metric, cfg.quad_step)
        # I_d h2 = I (h2 / sqrt(d_M)): one data set serves both routes
        y = simulate_data(A_d, h2, cfg.epsilon, cfg.seed, weighted=True)
        emit_sino(y)
        post_h = compute_posterior(A_d, grid, cov, cfg.sigma, cfg.epsilon, y)
        xs_h = emit_posterior(post_h, "h")
        post_f = compute_posterior(A, grid, cov, cfg.sigma, cfg.epsilon, y)
        xs_f = emit_posterior(post_f, "f")
        result.band_h, result.band_f = band_comparison(xs_h, xs_f)
        result.boundary_error_h, result.boundary_error_f = boundary_mean_error(
            mesh, post_h.mean, post_f.mean, h2)
        result.rel_error = _relative_error(mass, post_h.mean, mesh.nodal(h2))
        result.extras.update(posterior_h=post_h, posterior_f=post_f, xs_h=xs_h, xs_f=xs_f)
    _finish(out, cfg, files, inputs)
    return result


@dataclass(frozen=True)
class OracleRow:
    check: str
    expected: float
    observed: float
    tolerance: float
    passed: bool


def oracle_tolerance(check: str, m: int) -> float:
    """Tolerance schedule: stated tolerances on the full profile, loosened on coarse meshes."""
    if check == "chord":
        return 0.01 if m >= 3000 else (0.02 if m >= 800 else 0.05)
    if check == "normal_one":
        return 0.03 if m >= 3000 else 0.15
    return {
        "norm_A1": 0.01,
        "weighted_one": 0.005,
        "attenuated_constant": 0.01,
        "attenuated_zero": 1e-12,
        "adjoint": 1e-10,
        "tikhonov_gradient": 1e-8,
    }[check]


def _row(check, expected, observed, tol, relative=True):
    err = abs(observed - expected) / (abs(expected) if relative and expected else 1.0)
    return OracleRow(check, float(expected), float(observed), float(tol), bool(err <= tol))


def run_oracles(cfg: ExperimentConfig | None = None, mesh: TriMesh | None = None) -> list:
    """Analytic checks on the configured mesh and grid (Euclidean unless stated).

    Each row reports the worst observed value against its expectation; for
    vector checks ``observed`` is the value at the worst component.
    """
    cfg = ExperimentConfig() if cfg is None else cfg
    mesh = build_mesh(cfg) if mesh is None else mesh
    m = mesh.m
    grid = build_grid(cfg.n_beta, cfg.n_alpha)
    E = ConformalMetric.euclidean()
    rows = []
    A = assemble_A(mesh, grid, E, cfg.quad_step)
    ones = np.ones(m)
    A1 = A @ ones

    chord = 2 * np.cos(grid.alpha)
    sel = np.abs(grid.alpha) <= ALPHA_MAX
    rel = np.abs(A1[sel] - chord[sel]) / chord[sel]
    i = int(np.argmax(rel))
    rows.append(_row("chord", chord[sel][i], A1[sel][i], oracle_tolerance("chord", m)))

    rows.append(_row("norm_A1", 32 * np.pi / 3, grid.inner(A1, A1), oracle_tolerance("norm_A1", m)))

    mass = mass_matrix(mesh)
    N1 = normal_apply(A, grid, mass, ones, fiber_normalized=True)
    r = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1])
    q = r <= 0.9
    ref = oracle_N1(r[q])
    rel = np.abs(N1[q] - ref) / ref
    i = int(np.argmax(rel))
    rows.append(_row("normal_one", ref[i], N1[q][i], oracle_tolerance("normal_one", m)))

    Ad = assemble_A_weighted(mesh, grid, E, cfg.quad_step)
    Ad1 = Ad @ ones
    target = np.sqrt(2) * np.pi
    i = int(np.argmax(np.abs(Ad1 - target)))
    rows.append(_row("weighted_one", target, Ad1[i], oracle_tolerance("weighted_one", m)))

    A0 = assemble_A_attenuated(mesh, grid, E, np.zeros(m), cfg.quad_step)
    diff = abs(A0.matrix - A.matrix).max() if A0.matrix.nnz or A.matrix.nnz else 0.0
    rows.append(_row("attenuated_zero", 0.0, diff, oracle_tolerance("attenuated_zero", m),
                     relative=False))
    c = ATTENUATION_CONSTANT
    Ac = assemble_A_attenuated(mesh, grid, E, np.full(m, c), cfg.quad_step)
    exact = (np.exp(c * chord) - 1) / c
    rel = np.abs(Ac @ ones - exact) / exact
    i = int(np.argmax(rel))
    rows.append(_row("attenuated_constant", exact[i], (Ac @ ones)[i],
                     oracle_tolerance("attenuated_constant", m)))

    metric = ConformalMetric.from_name(cfg.metric)
    c0 = boundary_ratio_min(metric, step=max(cfg.quad_step, 1e-3))
    rows.append(OracleRow("boundary_ratio_positive", 0.0, c0, 0.0, bool(c0 > 0)))

    rng = np.random.default_rng(cfg.seed)
    f = rng.standard_normal(m)
    y = rng.standard_normal(grid.n)
    lhs = grid.inner(A @ f, y)
    rhs = float(f @ back_project(A, grid, y))
    rows.append(_row("adjoint", lhs, rhs, oracle_tolerance("adjoint", m)))

    cov = assemble_prior_cov(mesh, MaternParams(cfg.nu, cfg.ell, cfg.sigma))
    data = simulate_data(A, gaussian_bump(), cfg.epsilon, cfg.seed)
    post = compute_posterior(A, grid, cov, cfg.sigma, cfg.epsilon, data)
    gnorm = np.linalg.norm(tikhonov_gradient(post))
    scale = np.linalg.norm(2 * back_project(A, grid, data.values) / cfg.epsilon ** 2)
    rows.append(_row("tikhonov_gradient", 0.0, gnorm / scale,
                     oracle_tolerance("tikhonov_gradient", m), relative=False))
    return rows


def write_oracle_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "expected", "observed", "tolerance", "pass"])
        for r in rows:
            w.writerow([r.check, f"{r.expected:.17g}", f"{r.observed:.17g}", f"{r.tolerance:.3g}",
                        int(r.passed)])


def run_coverage(cfg: ExperimentConfig | None = None, path=None, mesh: TriMesh | None = None,
                 A: RayTransformMatrix | None = None):
    """Coverage of the level-``cfg.level`` interval for ``<f0, psi>``; optional CSV."""
    cfg = ExperimentConfig.for_profile("desk") if cfg is None else cfg
    mesh = build_mesh(cfg) if mesh is None else mesh
    A = build_operator(cfg, mesh) if A is None else A
    cov = assemble_prior_cov(mesh, MaternParams(cfg.nu, cfg.ell, cfg.sigma))
    res = coverage_experiment(A, mesh, cov, cfg.sigma, cfg.epsilon, psi_function(cfg),
                              truth=cfg.truth, level=cfg.level, replicates=cfg.replicates,
                              seed=cfg.seed, n_draws=cfg.n_draws)
    if path is not None:
        res.to_csv(path)
    return res
