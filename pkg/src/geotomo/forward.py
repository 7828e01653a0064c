"""Discretised geodesic ray transforms on a fan-beam grid.

Entries ``A[i, j]`` integrate the P1 basis function ``phi_j`` along the geodesic
launched from ``(beta_i, alpha_i)``.  Integrals are trapezoid sums over the
tracer's uniform arclength samples; the boundary-weighted variant integrates
``d_M^{-1/2} phi_j`` after the substitution ``t = tau/2 (1 - cos theta)``, which
removes the inverse square-root endpoint singularities.

Basis functions are continued into the thin layer between the mesh polygon and
the unit circle (radial projection onto the boundary edge), so integrals run
over the whole chord ``[0, tau]``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import ConformalMetric, PathBundle, trace_batch
from .mesh import TriMesh

__all__ = [
    "FanBeamGrid", "RayTransformMatrix", "Sinogram", "build_grid", "assemble_A",
    "assemble_A_attenuated", "assemble_A_weighted", "ray_integrals",
    "simulate_data", "normal_apply", "back_project", "save_matrix", "load_matrix",
    "worker_count",
]

PLAIN = "plain"
ATTENUATED = "attenuated"
WEIGHTED = "weighted"
VARIANTS = (PLAIN, ATTENUATED, WEIGHTED)
DATA_REFINEMENT = 4
_SAMPLES_PER_CHUNK = 2_000_000


def worker_count() -> int:
    """Thread cap from ``GEOTOMO_THREADS`` (default: all cores)."""
    env = os.environ.get("GEOTOMO_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True, eq=False)
class FanBeamGrid:
    """Cell-centred uniform sample of the influx boundary.

    Ray ``i = ib * n_alpha + ia`` has ``beta = (ib + 1/2) 2 pi / n_beta`` and
    ``alpha = -pi/2 + (ia + 1/2) pi / n_alpha``; ``weights`` is the diagonal of
    the data inner product, ``2 pi^2 / (n_beta n_alpha) * cos(alpha)``.
    """

    n_beta: int
    n_alpha: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.n_beta * self.n_alpha

    @property
    def grid_id(self) -> str:
        return f"{self.n_beta}x{self.n_alpha}"

    def as_image(self, values) -> np.ndarray:
        """Reshape ray data to ``(n_alpha, n_beta)``: alpha down, beta across."""
        return np.asarray(values).reshape(self.n_beta, self.n_alpha).T

    def inner(self, y1, y2) -> float:
        return float(np.sum(self.weights * np.asarray(y1) * np.asarray(y2)))


def build_grid(n_beta: int, n_alpha: int) -> FanBeamGrid:
    if n_beta < 2 or n_alpha < 2:
        raise ValueError("n_beta and n_alpha must both be at least 2")
    b = (np.arange(n_beta) + 0.5) * (2 * np.pi / n_beta)
    a = -np.pi / 2 + (np.arange(n_alpha) + 0.5) * (np.pi / n_alpha)
    beta = np.repeat(b, n_alpha)
    alpha = np.tile(a, n_beta)
    w = (2 * np.pi ** 2 / (n_beta * n_alpha)) * np.cos(alpha)
    for arr in (beta, alpha, w):
        arr.setflags(write=False)
    return FanBeamGrid(n_beta, n_alpha, beta, alpha, w)


@dataclass(frozen=True, eq=False)
class RayTransformMatrix:
    """Sparse ``n x m`` forward matrix plus the settings that produced it."""

    matrix: sp.csr_matrix
    variant: str
    grid: FanBeamGrid
    metric: ConformalMetric
    quad_step: float
    mesh: TriMesh | None = None
    attenuation: np.ndarray | None = None
    mesh_id: str = ""

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def rmatvec(self, y):
        return self.matrix.T @ y


@dataclass(frozen=True, eq=False)
class Sinogram:
    values: np.ndarray
    epsilon: float
    seed: int | None
    grid: FanBeamGrid

    def to_csv(self, path) -> None:
        data = np.column_stack([self.grid.beta, self.grid.alpha, self.values])
        np.savetxt(path, data, delimiter=",", header="beta,alpha,value", comments="",
                   fmt="%.17g")

    @classmethod
    def from_csv(cls, path, grid: FanBeamGrid, epsilon: float = float("nan"), seed=None):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape != (grid.n, 3):
            raise ValueError(f"sinogram has {data.shape[0]} rows, grid expects {grid.n}")
        if not (np.allclose(data[:, 0], grid.beta) and np.allclose(data[:, 1], grid.alpha)):
            raise ValueError("sinogram coordinates do not match the grid")
        return cls(data[:, 2].copy(), epsilon, seed, grid)


def _dm(x):
    return 0.5 * (1.0 - x[:, 0] ** 2 - x[:, 1] ** 2)


def _ray_chunks(grid: FanBeamGrid, step: float):
    per_ray = 1.6 / step
    size = max(8, int(_SAMPLES_PER_CHUNK / per_ray))
    return [np.arange(s, min(grid.n, s + size)) for s in range(0, grid.n, size)]


def _segment_cumtrapz(ray, t, vals):
    """Running trapezoid integral of ``vals`` along each ray (samples sorted by ray, t)."""
    seg = 0.5 * (vals[1:] + vals[:-1]) * np.diff(t)
    seg[ray[1:] != ray[:-1]] = 0.0
    c = np.concatenate([[0.0], np.cumsum(seg)])
    first = np.concatenate([[True], ray[1:] != ray[:-1]])
    start_val = c[first]
    counts = np.diff(np.append(np.nonzero(first)[0], len(ray)))
    return c - np.repeat(start_val, counts)


def _weighted_nodes(bundle: PathBundle, step: float):
    """Midpoint rule in theta for ``int_0^tau d_M^{-1/2} F dt``.

    Returns ``(ray, x, w)`` with quadrature weights that already include the
    ``d_M^{-1/2}`` factor and the Jacobian ``tau/2 sin(theta)``.
    """
    tau = bundle.tau
    npts = np.maximum(1, np.ceil(tau / step).astype(int))
    ray = np.repeat(np.arange(bundle.n_rays), npts)
    offs = np.arange(npts.sum()) - np.repeat(np.cumsum(npts) - npts, npts)
    dtheta = np.pi / npts[ray]
    theta = (offs + 0.5) * dtheta
    half = 0.5 * tau[ray]
    t = half * (1.0 - np.cos(theta))
    x = bundle.positions_at(ray, t)
    dm = np.maximum(_dm(x), np.finfo(float).tiny)
    w = half * np.sin(theta) * dtheta / np.sqrt(dm)
    return ray, x, w


def _sample_rule(bundle: PathBundle, step: float, variant: str, mesh, attenuation):
    if variant == WEIGHTED:
        return _weighted_nodes(bundle, step)
    ray, t, x, w = bundle.trapezoid_samples()
    if variant == ATTENUATED:
        a_vals = attenuation(x) if callable(attenuation) else mesh.evaluate(attenuation, x, extend=True)
        w = w * np.exp(_segment_cumtrapz(ray, t, a_vals))
    return ray, x, w


def _assemble(mesh: TriMesh, grid: FanBeamGrid, metric: ConformalMetric,
              quad_step: float, variant: str, attenuation=None) -> sp.csr_matrix:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")

    def block(rows):
        bundle = trace_batch(metric, grid.beta[rows], grid.alpha[rows], quad_step)
        ray, x, w = _sample_rule(bundle, quad_step, variant, mesh, attenuation)
        nodes, bw = mesh.basis_weights(x, extend=True)
        vals = (bw * w[:, None]).ravel()
        r = np.repeat(ray, 3)
        keep = vals != 0.0
        return sp.csr_matrix((vals[keep], (r[keep], nodes.ravel()[keep])),
                             shape=(len(rows), mesh.m))

    chunks = _ray_chunks(grid, quad_step)
    workers = min(worker_count(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(block, chunks))
    else:
        blocks = [block(c) for c in chunks]
    A = sp.vstack(blocks, format="csr")
    A.sum_duplicates()
    return A


def assemble_A(mesh: TriMesh, grid: FanBeamGrid, metric: ConformalMetric,
               quad_step: float = 1e-3) -> RayTransformMatrix:
    A = _assemble(mesh, grid, metric, quad_step, PLAIN)
    return RayTransformMatrix(A, PLAIN, grid, metric, quad_step, mesh, None, mesh.mesh_id)


def assemble_A_attenuated(mesh: TriMesh, grid: FanBeamGrid, metric: ConformalMetric,
                          a, quad_step: float = 1e-3) -> RayTransformMatrix:
    """Attenuated transform: weight ``exp(int_0^t a)`` on every sample at time ``t``.

    ``a`` is a nodal coefficient vector on ``mesh``; the inner integral is the
    running trapezoid sum over the same path samples as the outer one.
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (mesh.m,):
        raise ValueError("attenuation must be a nodal coefficient vector")
    A = _assemble(mesh, grid, metric, quad_step, ATTENUATED, a)
    return RayTransformMatrix(A, ATTENUATED, grid, metric, quad_step, mesh, a, mesh.mesh_id)


def assemble_A_weighted(mesh: TriMesh, grid: FanBeamGrid, metric: ConformalMetric,
                        quad_step: float = 1e-3) -> RayTransformMatrix:
    A = _assemble(mesh, grid, metric, quad_step, WEIGHTED)
    return RayTransformMatrix(A, WEIGHTED, grid, metric, quad_step, mesh, None, mesh.mesh_id)


def ray_integrals(func, grid: FanBeamGrid, metric: ConformalMetric, quad_step: float,
                  weighted: bool = False, attenuation=None) -> np.ndarray:
    """Direct quadrature of an analytic ``func(x)`` along every geodesic of ``grid``.

    With ``weighted`` the integrand is ``func / sqrt(d_M)``.  ``attenuation`` may
    be a vectorised callable ``a(x)``.
    """
    out = np.zeros(grid.n)
    variant = WEIGHTED if weighted else (ATTENUATED if attenuation is not None else PLAIN)

    def block(rows):
        bundle = trace_batch(metric, grid.beta[rows], grid.alpha[rows], quad_step)
        ray, x, w = _sample_rule(bundle, quad_step, variant, None, attenuation)
        return np.bincount(ray, weights=w * func(x), minlength=len(rows))

    for rows in _ray_chunks(grid, quad_step):
        out[rows] = block(rows)
    return out


def simulate_data(A_data: RayTransformMatrix, f_true, epsilon: float, seed=None,
                  weighted: bool | None = None, clean=None) -> Sinogram:
    """Noisy observation ``Y = I f + epsilon * z / sqrt(n_ii)``.

    ``f_true`` is either a nodal coefficient vector (applied through ``A_data``)
    or a vectorised function of position, integrated directly along geodesics
    traced at a quarter of ``A_data.quad_step`` to keep data and inversion
    discretisations apart.  ``clean`` short-circuits the noiseless part.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    grid = A_data.grid
    if clean is None:
        if callable(f_true):
            if weighted is None:
                weighted = A_data.variant == WEIGHTED
            att = None
            if A_data.variant == ATTENUATED and A_data.mesh is not None:
                mesh, a = A_data.mesh, A_data.attenuation
                att = lambda x: mesh.evaluate(a, x, extend=True)  # noqa: E731
            clean = ray_integrals(f_true, grid, A_data.metric,
                                  A_data.quad_step / DATA_REFINEMENT, weighted, att)
        else:
            f = np.asarray(f_true, dtype=float)
            if f.shape != (A_data.shape[1],):
                raise ValueError(f"coefficient vector needs length {A_data.shape[1]}")
            clean = A_data.matrix @ f
    clean = np.asarray(clean, dtype=float)
    if clean.shape != (grid.n,):
        raise ValueError("clean data does not match the grid")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(grid.n)
    tag = None if isinstance(seed, np.random.Generator) else seed
    return Sinogram(clean + epsilon * z / np.sqrt(grid.weights), epsilon, tag, grid)


def back_project(A: RayTransformMatrix, grid: FanBeamGrid, y) -> np.ndarray:
    """``A^T n y``: the discrete adjoint of ``A`` from data to coefficients."""
    y = np.asarray(y, dtype=float)
    w = grid.weights if y.ndim == 1 else grid.weights[:, None]
    return A.matrix.T @ (w * y)


class MassSolver:
    """Cached sparse LU of the mass matrix."""

    def __init__(self, mass):
        self._lu = spla.splu(sp.csc_matrix(mass))

    def __call__(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


def normal_apply(A: RayTransformMatrix, grid: FanBeamGrid, mass, coeffs,
                 fiber_normalized: bool = False) -> np.ndarray:
    """Galerkin normal operator ``m^{-1} A^T n A coeffs``.

    The data inner product uses ``d mu = cos(alpha) d alpha d beta`` and so the
    result approximates ``I^* I`` with the Lebesgue measure on each fibre of the
    unit circle bundle.  ``fiber_normalized=True`` divides by the fibre length
    ``2 pi``, i.e. uses the probability measure on directions; under that
    convention ``N(1)(x) = 4 E(|x|) / pi`` on the Euclidean disk.
    """
    solve = mass if isinstance(mass, MassSolver) else MassSolver(mass)
    out = solve(back_project(A, grid, A.matrix @ np.asarray(coeffs, dtype=float)))
    if fiber_normalized:
        out = out / (2 * np.pi)
    return out


def save_matrix(A: RayTransformMatrix, path) -> None:
    coo = A.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]} {coo.nnz} {A.variant}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")


def load_matrix(path, grid: FanBeamGrid, metric: ConformalMetric | None = None,
                quad_step: float = float("nan"), mesh: TriMesh | None = None) -> RayTransformMatrix:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise ValueError("matrix header must read 'n m nnz variant'")
        n, m, nnz = (int(v) for v in header[:3])
        variant = header[3]
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if data.shape[0] != nnz:
        raise ValueError(f"expected {nnz} entries, found {data.shape[0]}")
    if n != grid.n:
        raise ValueError(f"matrix has {n} rows but the grid has {grid.n} rays")
    M = sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(n, m))
    return RayTransformMatrix(M, variant, grid, metric or ConformalMetric.euclidean(), quad_step,
                              mesh, None, mesh.mesh_id if mesh is not None else "")
