"""Bayesian geodesic X-ray tomography on the unit disk."""
from .config import ExperimentConfig
from .forward import (FanBeamGrid, RayTransformMatrix, Sinogram, assemble_A, assemble_A_attenuated,
                      assemble_A_weighted, build_grid, normal_apply, simulate_data)
from .geometry import ConformalMetric, FanBeamCoord, GeodesicPath, exit_time, geodesic_trace
from .mesh import TriMesh, generate_disk_mesh, interp, load_mesh, locate, mass_matrix, save_mesh
from .phantoms import elliptic_E, h2_smooth, oracle_chord, oracle_N1, shepp_logan
from .posterior import (FunctionalReport, GaussianPosterior, compute_posterior,
                        coverage_experiment, cross_section, functional_credible, sample_posterior)
from .prior import MaternParams, PriorCovariance, assemble_prior_cov, dm_eval, matern_kernel

__version__ = "0.1.0"
