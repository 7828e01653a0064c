"""Matérn Gaussian-process priors on mesh nodes and the boundary weighting ``d_M``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .mesh import TriMesh

__all__ = ["MaternParams", "PriorCovariance", "matern_kernel", "assemble_prior_cov",
           "dm_eval", "prior_draw", "weighted_prior_draw"]

JITTER_START = 1e-10
JITTER_MAX = 1e-6


@dataclass(frozen=True)
class MaternParams:
    """Smoothness ``nu``, length scale ``ell`` and prior precision ``sigma``.

    The prior on nodal values is ``N(0, Gamma / sigma)``.
    """

    nu: float = 1.5
    ell: float = 0.2
    sigma: float = 1.0

    def __post_init__(self):
        for name in ("nu", "ell", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def matern_kernel(params: MaternParams, r) -> np.ndarray | float:
    """Normalised Matérn correlation ``k(r)`` with ``k(0) = 1``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be non-negative")
    nu, ell = params.nu, params.ell
    if nu == 0.5:
        out = np.exp(-r / ell)
    elif nu == 1.5:
        z = np.sqrt(3.0) * r / ell
        out = (1.0 + z) * np.exp(-z)
    elif nu == 2.5:
        z = np.sqrt(5.0) * r / ell
        out = (1.0 + z + z * z / 3.0) * np.exp(-z)
    else:
        z = np.sqrt(2.0 * nu) * r / ell
        with np.errstate(invalid="ignore", over="ignore"):
            out = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * z ** nu * kv(nu, z)
        out = np.where(z == 0, 1.0, np.nan_to_num(out, nan=0.0))
    return float(out) if out.ndim == 0 else out


@dataclass(eq=False)
class PriorCovariance:
    """Dense Matérn Gram matrix with a jittered lower Cholesky factor."""

    gamma: np.ndarray = field(repr=False)
    chol: np.ndarray = field(repr=False)
    jitter: float
    params: MaternParams
    _inverse: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def from_matrix(cls, gamma, params: MaternParams | None = None) -> "PriorCovariance":
        """Wrap an explicit SPD covariance (toy problems and tests); no jitter."""
        G = np.atleast_2d(np.asarray(gamma, dtype=float))
        L = sla.cholesky(G, lower=True, check_finite=False)
        return cls(G, L, 0.0, params or MaternParams())

    def solve(self, b) -> np.ndarray:
        """``(Gamma + jitter I)^{-1} b`` through the stored factor."""
        return sla.cho_solve((self.chol, True), b, check_finite=False)

    def inverse(self) -> np.ndarray:
        """Symmetrised ``(Gamma + jitter I)^{-1}``, computed once and cached (read-only)."""
        if self._inverse is None:
            inv = sla.cho_solve((self.chol, True), np.eye(self.m), check_finite=False)
            inv += inv.T
            inv *= 0.5
            inv.setflags(write=False)
            self._inverse = inv
        return self._inverse


def assemble_prior_cov(mesh: TriMesh | np.ndarray, params: MaternParams) -> PriorCovariance:
    nodes = mesh.nodes if isinstance(mesh, TriMesh) else np.asarray(mesh, dtype=float)
    G = matern_kernel(params, cdist(nodes, nodes))
    G = np.atleast_2d(G)
    m = G.shape[0]
    jitter = JITTER_START * np.trace(G) / m
    cap = JITTER_MAX * np.trace(G) / m
    while True:
        try:
            L = sla.cholesky(G + jitter * np.eye(m), lower=True, check_finite=False)
            break
        except sla.LinAlgError:
            jitter *= 10.0
            if jitter > cap * (1 + 1e-9):
                raise sla.LinAlgError(
                    "Matérn Gram matrix not factorisable even with maximal jitter "
                    "(duplicate nodes?)") from None
    return PriorCovariance(G, L, jitter, params)


def dm_eval(x) -> np.ndarray | float:
    """``(1 - |x|^2) / 2`` on the closed unit disk."""
    x = np.asarray(x, dtype=float)
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    if np.any(r2 > 1 + 1e-12):
        raise ValueError("d_M is only defined on the closed unit disk")
    out = 0.5 * (1.0 - r2)
    return float(out) if out.ndim == 0 else out


def prior_draw(cov: PriorCovariance, seed=None, count: int | None = None,
               sigma: float | None = None) -> np.ndarray:
    """``sigma^{-1/2} L z`` with ``z`` standard normal; shape ``(m,)`` or ``(count, m)``."""
    sigma = cov.params.sigma if sigma is None else sigma
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = 1 if count is None else count
    z = rng.standard_normal((k, cov.m))
    h = (z @ cov.chol.T) / np.sqrt(sigma)
    return h[0] if count is None else h


def weighted_prior_draw(cov: PriorCovariance, mesh: TriMesh, seed=None):
    """Draw ``h`` from the prior and return ``(f, h)`` with ``f = h / sqrt(d_M)``.

    Nodes on the unit circle have ``d_M = 0`` and are rejected; reconstruct ``h``
    against the weighted operator instead.
    """
    dm = dm_eval(mesh.nodes)
    if np.any(dm <= 0):
        raise ValueError("weighted draw undefined on boundary nodes (d_M = 0); "
                         "work in h-coordinates with the weighted operator")
    h = prior_draw(cov, seed)
    return h / np.sqrt(dm), h
