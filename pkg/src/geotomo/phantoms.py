"""Test functions on the disk and closed-form oracles for the Euclidean transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import FanBeamCoord
from .mesh import disk_quadrature

__all__ = [
    "Ellipse", "EllipsePhantom", "SHEPP_LOGAN_TABLE", "shepp_logan", "h2_smooth",
    "f2_singular", "gaussian_bump", "elliptic_E", "oracle_N1", "oracle_chord", "PHANTOMS",
    "get_phantom", "disk_integral",
]

# modified (Toft) Shepp-Logan: intensity, center x, center y, semi-axis a, semi-axis b, angle (deg)
SHEPP_LOGAN_TABLE = (
    (1.0, 0.0, 0.0, 0.69, 0.92, 0.0),
    (-0.8, 0.0, -0.0184, 0.6624, 0.874, 0.0),
    (-0.2, 0.22, 0.0, 0.11, 0.31, -18.0),
    (-0.2, -0.22, 0.0, 0.16, 0.41, 18.0),
    (0.1, 0.0, 0.35, 0.21, 0.25, 0.0),
    (0.1, 0.0, 0.1, 0.046, 0.046, 0.0),
    (0.1, 0.0, -0.1, 0.046, 0.046, 0.0),
    (0.1, -0.08, -0.605, 0.046, 0.023, 0.0),
    (0.1, 0.0, -0.606, 0.023, 0.023, 0.0),
    (0.1, 0.06, -0.605, 0.023, 0.046, 0.0),
)
SUPPORT_RADIUS = 0.95


@dataclass(frozen=True)
class Ellipse:
    intensity: float
    center: tuple
    axes: tuple
    angle: float  # radians, counter-clockwise

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        dx = x[..., 0] - self.center[0]
        dy = x[..., 1] - self.center[1]
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0


@dataclass(frozen=True)
class EllipsePhantom:
    """Sum of the intensities of all ellipses containing a point."""

    ellipses: tuple
    scale: float = 1.0

    @classmethod
    def from_table(cls, table, scale: float = 1.0) -> "EllipsePhantom":
        ells = tuple(
            Ellipse(A, (scale * x0, scale * y0), (scale * a, scale * b), np.deg2rad(phi))
            for A, x0, y0, a, b, phi in table
        )
        return cls(ells, scale)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for e in self.ellipses:
            out += np.where(e.contains(x), e.intensity, 0.0)
        return out

    def table(self):
        return [(e.intensity, e.center[0], e.center[1], e.axes[0], e.axes[1],
                 float(np.rad2deg(e.angle))) for e in self.ellipses]


_SHEPP_LOGAN = EllipsePhantom.from_table(SHEPP_LOGAN_TABLE)


def shepp_logan(x) -> np.ndarray:
    """Modified Shepp-Logan phantom; the outer ellipse reaches radius 0.92 < 0.95."""
    return _SHEPP_LOGAN(x)


H2_CENTERS = ((0.25, 0.0, 0.5), (-0.3, -0.2, -0.4))
H2_RATE = 6.0


def h2_smooth(x) -> np.ndarray:
    """Smooth on the closed disk and positive on the boundary:
    ``1 + 0.5 exp(-6|x-(0.25,0)|^2) - 0.4 exp(-6|x+(0.3,0.2)|^2)``."""
    x = np.asarray(x, dtype=float)
    out = np.ones(x.shape[:-1])
    for c1, c2, amp in H2_CENTERS:
        out += amp * np.exp(-H2_RATE * ((x[..., 0] - c1) ** 2 + (x[..., 1] - c2) ** 2))
    return out


def f2_singular(x) -> np.ndarray:
    """``h2 / sqrt(d_M)``, infinite on the unit circle."""
    x = np.asarray(x, dtype=float)
    dm = 0.5 * (1.0 - x[..., 0] ** 2 - x[..., 1] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        return h2_smooth(x) / np.sqrt(dm)


def gaussian_bump(center=(0.2, 0.1), rate: float = 8.0):
    """``exp(-rate |x - center|^2)`` as a vectorised function."""
    c1, c2 = center

    def bump(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-rate * ((x[..., 0] - c1) ** 2 + (x[..., 1] - c2) ** 2))

    return bump


def elliptic_E(k) -> float | np.ndarray:
    """Complete elliptic integral of the second kind for modulus ``k`` in [0, 1].

    Arithmetic-geometric mean: with ``a0 = 1, b0 = sqrt(1-k^2), c0 = k``,
    ``E = pi / (2 a_inf) * (1 - sum 2^(n-1) c_n^2)``.
    """
    k_arr = np.asarray(k, dtype=float)
    if np.any((k_arr < 0) | (k_arr > 1)) or np.any(np.isnan(k_arr)):
        raise ValueError("modulus must lie in [0, 1]")
    flat = k_arr.ravel()
    out = np.empty_like(flat)
    for i, kk in enumerate(flat):
        out[i] = _agm_E(float(kk))
    out = out.reshape(k_arr.shape)
    return float(out) if out.ndim == 0 else out


def _agm_E(k: float) -> float:
    if k == 1.0:
        return 1.0
    a, b, c = 1.0, np.sqrt((1.0 - k) * (1.0 + k)), k
    total = 0.5 * c * c
    power = 0.5
    for _ in range(64):
        if abs(c) < 1e-17 * a:
            break
        a, b, c = 0.5 * (a + b), np.sqrt(a * b), 0.5 * (a - b)
        power *= 2.0
        total += power * c * c
    return np.pi / (2.0 * a) * (1.0 - total)


def oracle_N1(r) -> float | np.ndarray:
    """``4 E(r) / pi``: the normal operator applied to 1 at radius ``r`` (normalised fibres)."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr >= 1) or np.any(r_arr < 0):
        raise ValueError("radius must lie in [0, 1)")
    return 4.0 * elliptic_E(r_arr) / np.pi


def oracle_chord(coord: FanBeamCoord | float) -> float:
    """Euclidean chord length ``2 cos(alpha)`` of the ray launched at ``coord``."""
    alpha = coord.alpha if isinstance(coord, FanBeamCoord) else float(coord)
    return 2.0 * np.cos(alpha)


PHANTOMS = {
    "shepp_logan": shepp_logan,
    "h2": h2_smooth,
    "f2": f2_singular,
    "bump": gaussian_bump(),
}


def get_phantom(name: str):
    try:
        return PHANTOMS[name.strip().lower().replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown phantom {name!r}; choose from {sorted(PHANTOMS)}") from None


def disk_integral(func, n_r: int = 200, n_theta: int = 512) -> float:
    """``int_{|x|<1} func(x) dx`` by Gauss-Legendre in ``r`` and the periodic trapezoid in angle."""
    pts, w = disk_quadrature(n_r, n_theta)
    return float(w @ np.asarray(func(pts), dtype=float))
