"""Conformal metrics on the unit disk, fan-beam coordinates and geodesic tracing.

The metric is ``g = exp(2 lam(x)) (dx1^2 + dx2^2)``.  For such a metric the
Christoffel symbols are ``G^k_ij = d_ik dlam_j + d_jk dlam_i - d_ij dlam_k``,
so a geodesic parametrised by g-arclength obeys

    x''_k = -2 (grad lam . x') x'_k + |x'|^2 dlam_k .

Tracing integrates this ODE with fixed-step classical RK4 and locates the exit
through the unit circle by bisection on the last step.  Rays are traced in
batches: every array carries a leading ray axis so a whole fan-beam grid can be
integrated with vectorised numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "boundary_ratio_min",
    "ConformalMetric",
    "FanBeamCoord",
    "GeodesicPath",
    "PathBundle",
    "TrappingError",
    "lambda_eval",
    "lambda_grad",
    "fanbeam_to_phase",
    "trace_batch",
    "geodesic_trace",
    "exit_time",
]

TRAPPING_GUARD = 100.0
BISECTION_ITERS = 60
PAPER_BUMP_AMPLITUDE = 0.45
PAPER_BUMP_RATE = 8.0
PAPER_BUMP_CENTER = 0.3


class TrappingError(RuntimeError):
    """Raised when a geodesic fails to leave the disk before the arclength guard."""


@dataclass(frozen=True)
class ConformalMetric:
    """A conformally Euclidean metric ``exp(2 lam) delta`` on the plane.

    ``kind`` is one of ``"euclidean"``, ``"paper_bump"`` or ``"custom_bump"``.
    Custom metrics carry Gaussian terms ``(amplitude, (c1, c2), width)``, each
    contributing ``amplitude * exp(-|x - c|^2 / width^2)`` to ``lam``.
    """

    kind: str = "euclidean"
    bumps: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("euclidean", "paper_bump", "custom_bump"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "custom_bump":
            norm = []
            for amp, center, width in self.bumps:
                if width <= 0:
                    raise ValueError("bump width must be positive")
                norm.append((float(amp), (float(center[0]), float(center[1])), float(width)))
            object.__setattr__(self, "bumps", tuple(norm))
        elif self.bumps:
            raise ValueError(f"{self.kind} metric takes no bump terms")

    @classmethod
    def euclidean(cls) -> "ConformalMetric":
        return cls("euclidean")

    @classmethod
    def paper_bump(cls) -> "ConformalMetric":
        return cls("paper_bump")

    @classmethod
    def custom(cls, bumps) -> "ConformalMetric":
        return cls("custom_bump", tuple(bumps))

    @classmethod
    def from_name(cls, name: str) -> "ConformalMetric":
        key = name.strip().lower().replace("-", "_")
        if key in ("euclidean", "flat"):
            return cls.euclidean()
        if key in ("paper_bump", "paperbump", "bump", "noneuclidean"):
            return cls.paper_bump()
        raise ValueError(f"unknown metric {name!r}")

    @property
    def is_flat(self) -> bool:
        return self.kind == "euclidean" or (self.kind == "custom_bump" and not self.bumps)

    def _terms(self):
        if self.kind == "paper_bump":
            c = PAPER_BUMP_CENTER
            return (
                (PAPER_BUMP_AMPLITUDE, (c, c), PAPER_BUMP_RATE),
                (-PAPER_BUMP_AMPLITUDE, (-c, -c), PAPER_BUMP_RATE),
            )
        # stored as (amplitude, center, rate) with rate = 1/width^2
        return tuple((a, c, 1.0 / (w * w)) for a, c, w in self.bumps)

    def lam(self, x) -> np.ndarray:
        """Log-conformal factor at points ``x`` of shape ``(..., 2)``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        if self.is_flat:
            return out
        for amp, (c1, c2), rate in self._terms():
            d1 = x[..., 0] - c1
            d2 = x[..., 1] - c2
            out += amp * np.exp(-rate * (d1 * d1 + d2 * d2))
        return out

    def grad(self, x) -> np.ndarray:
        """Gradient of ``lam``, same shape as ``x``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        if self.is_flat:
            return out
        for amp, (c1, c2), rate in self._terms():
            d1 = x[..., 0] - c1
            d2 = x[..., 1] - c2
            e = (-2.0 * rate * amp) * np.exp(-rate * (d1 * d1 + d2 * d2))
            out[..., 0] += e * d1
            out[..., 1] += e * d2
        return out

    def describe(self) -> str:
        if self.kind == "custom_bump":
            return "custom_bump" + repr(self.bumps)
        return self.kind


def lambda_eval(metric: ConformalMetric, x) -> np.ndarray | float:
    val = metric.lam(x)
    return float(val) if np.ndim(val) == 0 else val


def lambda_grad(metric: ConformalMetric, x) -> np.ndarray:
    return metric.grad(x)


@dataclass(frozen=True)
class FanBeamCoord:
    """Boundary angle ``beta`` and inward offset ``alpha`` of an influx vector."""

    beta: float
    alpha: float

    def __post_init__(self):
        if not abs(self.alpha) < np.pi / 2:
            raise ValueError(f"alpha={self.alpha} must lie strictly inside (-pi/2, pi/2)")
        object.__setattr__(self, "beta", float(self.beta) % (2.0 * np.pi))
        object.__setattr__(self, "alpha", float(self.alpha))


def fanbeam_to_phase(metric: ConformalMetric, beta, alpha):
    """Map fan-beam angles to a boundary point and a unit g-speed inward velocity.

    Accepts scalars or arrays of equal shape; returns ``(x, v)`` with a trailing
    axis of length 2.
    """
    beta = np.asarray(beta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(np.abs(alpha) >= np.pi / 2):
        raise ValueError("grazing or outward rays (|alpha| >= pi/2) are not allowed")
    x = np.stack([np.cos(beta), np.sin(beta)], axis=-1)
    direction = beta + np.pi + alpha
    scale = np.exp(-metric.lam(x))
    v = np.stack([np.cos(direction), np.sin(direction)], axis=-1) * scale[..., None]
    return x, v


def _accel(metric: ConformalMetric, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    g = metric.grad(x)
    gv = g[:, 0] * v[:, 0] + g[:, 1] * v[:, 1]
    vv = v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1]
    return -2.0 * gv[:, None] * v + vv[:, None] * g


def _rk4(metric, x, v, h):
    """One RK4 step; ``h`` is a scalar or a per-ray array."""
    h = np.asarray(h, dtype=float)
    if h.ndim:
        h = h[:, None]
    if metric.is_flat:
        return x + h * v, v.copy()
    a1 = _accel(metric, x, v)
    x2 = x + 0.5 * h * v
    v2 = v + 0.5 * h * a1
    a2 = _accel(metric, x2, v2)
    x3 = x + 0.5 * h * v2
    v3 = v + 0.5 * h * a2
    a3 = _accel(metric, x3, v3)
    x4 = x + h * v3
    v4 = v + h * a3
    a4 = _accel(metric, x4, v4)
    xn = x + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
    vn = v + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    return xn, vn


@dataclass
class PathBundle:
    """Traced geodesics for a batch of ``R`` rays.

    ``x[k, r]`` and ``v[k, r]`` hold the state at ``t = k * step`` for
    ``k < n_uniform[r]``; entries beyond that are padding.  The exit state
    ``(x_exit[r], v_exit[r])`` sits at ``t = tau[r]``.
    """

    step: float
    x: np.ndarray
    v: np.ndarray
    n_uniform: np.ndarray
    x_exit: np.ndarray
    v_exit: np.ndarray
    tau: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray

    @property
    def n_rays(self) -> int:
        return self.tau.shape[0]

    def path(self, r: int) -> "GeodesicPath":
        k = int(self.n_uniform[r])
        t = np.append(np.arange(k) * self.step, self.tau[r])
        x = np.vstack([self.x[:k, r], self.x_exit[r]])
        v = np.vstack([self.v[:k, r], self.v_exit[r]])
        return GeodesicPath(t=t, x=x, v=v, tau=float(self.tau[r]),
                            start=FanBeamCoord(self.beta[r], self.alpha[r]))

    def trapezoid_samples(self):
        """Flattened samples with composite-trapezoid weights.

        Returns ``(ray, t, x, w)``; the weights of ray ``r`` sum to ``tau[r]``.
        """
        R = self.n_rays
        kmax = self.x.shape[0]
        k = np.arange(kmax)[:, None]
        mask = k < self.n_uniform[None, :]
        h = self.step
        last = self.n_uniform - 1
        tail = self.tau - last * h  # final partial step
        w = np.where(mask, h, 0.0)
        w[0, :] = 0.5 * h
        w[last, np.arange(R)] -= 0.5 * h
        w[last, np.arange(R)] += 0.5 * tail
        ray_u = np.broadcast_to(np.arange(R)[None, :], (kmax, R))[mask]
        t_u = np.broadcast_to(k * h, (kmax, R))[mask]
        x_u = self.x[mask]
        w_u = w[mask]
        ray = np.concatenate([ray_u, np.arange(R)])
        t = np.concatenate([t_u, self.tau])
        x = np.concatenate([x_u, self.x_exit])
        wt = np.concatenate([w_u, 0.5 * tail])
        order = np.lexsort((t, ray))
        return ray[order], t[order], x[order], wt[order]

    def positions_at(self, ray: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Cubic Hermite interpolation of positions at arbitrary times using the
        stored velocities; fourth-order accurate like the integrator."""
        ray = np.asarray(ray)
        t = np.asarray(t, dtype=float)
        h = self.step
        nu = self.n_uniform[ray]
        j = np.floor(t / h).astype(int)
        j = np.clip(j, 0, nu - 1)
        x0 = self.x[j, ray]
        v0 = self.v[j, ray]
        t0 = j * h
        nxt = j + 1
        at_end = nxt >= nu
        nxt_c = np.minimum(nxt, self.x.shape[0] - 1)
        x1 = np.where(at_end[:, None], self.x_exit[ray], self.x[nxt_c, ray])
        v1 = np.where(at_end[:, None], self.v_exit[ray], self.v[nxt_c, ray])
        t1 = np.where(at_end, self.tau[ray], nxt * h)
        dt = t1 - t0
        dt_safe = np.where(dt > 0, dt, 1.0)
        s = np.clip((t - t0) / dt_safe, 0.0, 1.0)[:, None]
        s2 = s * s
        s3 = s2 * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        d = dt[:, None]
        return h00 * x0 + h10 * d * v0 + h01 * x1 + h11 * d * v1


@dataclass(frozen=True)
class GeodesicPath:
    """Samples ``(t, x, v)`` along one traced geodesic, ending on the circle."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    tau: float
    start: FanBeamCoord

    def speeds(self, metric: ConformalMetric) -> np.ndarray:
        return np.exp(metric.lam(self.x)) * np.linalg.norm(self.v, axis=1)

    def to_csv(self, path) -> None:
        data = np.column_stack([self.t, self.x, self.v])
        np.savetxt(path, data, delimiter=",", header="t,x1,x2,v1,v2", comments="", fmt="%.17g")


def _trace_from_states(metric, x0, v0, step, guard):
    """Integrate a batch of geodesics from arbitrary (boundary) initial states."""
    R = x0.shape[0]
    xs = [x0.copy()]
    vs = [v0.copy()]
    x = x0.copy()
    v = v0.copy()
    active = np.ones(R, dtype=bool)
    n_uniform = np.zeros(R, dtype=int)
    x_exit = np.zeros((R, 2))
    v_exit = np.zeros((R, 2))
    tau = np.zeros(R)
    k = 0
    max_steps = int(np.ceil(guard / step))
    while active.any():
        if k >= max_steps:
            raise TrappingError(
                f"{int(active.sum())} geodesic(s) still inside after arclength {guard}"
            )
        xn, vn = _rk4(metric, x, v, step)
        r2 = xn[:, 0] ** 2 + xn[:, 1] ** 2
        leaving = active & (r2 >= 1.0)
        if leaving.any():
            idx = np.nonzero(leaving)[0]
            xe, ve, hx = _bisect_exit(metric, x[idx], v[idx], step)
            x_exit[idx] = xe
            v_exit[idx] = ve
            tau[idx] = k * step + hx
            n_uniform[idx] = k + 1
            active[idx] = False
        k += 1
        # frozen rays keep their last interior state so padding stays finite
        x = np.where(active[:, None], xn, x)
        v = np.where(active[:, None], vn, v)
        if active.any():
            xs.append(x.copy())
            vs.append(v.copy())
    return np.array(xs), np.array(vs), n_uniform, x_exit, v_exit, tau


def _bisect_exit(metric, x, v, step):
    lo = np.zeros(x.shape[0])
    hi = np.full(x.shape[0], step)
    for _ in range(BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4(metric, x, v, mid)
        outside = xm[:, 0] ** 2 + xm[:, 1] ** 2 >= 1.0
        hi = np.where(outside, mid, hi)
        lo = np.where(outside, lo, mid)
        if np.all(hi - lo <= 4e-16 * step):
            break
    hx = 0.5 * (lo + hi)
    xe, ve = _rk4(metric, x, v, hx)
    return xe, ve, hx


def trace_batch(metric: ConformalMetric, beta, alpha, step: float = 1e-3,
                guard: float = TRAPPING_GUARD) -> PathBundle:
    """Trace the geodesics launched from fan-beam coordinates ``(beta, alpha)``."""
    if not 0 < step <= 0.1:
        raise ValueError("step must lie in (0, 0.1]")
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    x0, v0 = fanbeam_to_phase(metric, beta, alpha)
    xs, vs, nu, xe, ve, tau = _trace_from_states(metric, x0, v0, step, guard)
    return PathBundle(step=step, x=xs, v=vs, n_uniform=nu, x_exit=xe, v_exit=ve,
                      tau=tau, beta=beta, alpha=alpha)


def trace_states(metric: ConformalMetric, x0, v0, step: float = 1e-3,
                 guard: float = TRAPPING_GUARD) -> PathBundle:
    """Trace from explicit phase-space states (used for reversed geodesics)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    xs, vs, nu, xe, ve, tau = _trace_from_states(metric, x0, v0, step, guard)
    beta = np.arctan2(x0[:, 1], x0[:, 0]) % (2 * np.pi)
    u = v0 / np.linalg.norm(v0, axis=1, keepdims=True)
    alpha = np.arctan2(u[:, 1], u[:, 0]) - beta - np.pi
    alpha = (alpha + np.pi) % (2 * np.pi) - np.pi
    return PathBundle(step=step, x=xs, v=vs, n_uniform=nu, x_exit=xe, v_exit=ve,
                      tau=tau, beta=beta, alpha=alpha)


def geodesic_trace(metric: ConformalMetric, coord: FanBeamCoord, step: float = 1e-3,
                   guard: float = TRAPPING_GUARD) -> GeodesicPath:
    return trace_batch(metric, [coord.beta], [coord.alpha], step, guard).path(0)


def exit_time(metric: ConformalMetric, coord: FanBeamCoord, step: float = 1e-3) -> float:
    return geodesic_trace(metric, coord, step).tau


def boundary_ratio_min(metric: ConformalMetric, n_beta: int = 50, n_alpha: int = 50,
                       step: float = 1e-3) -> float:
    """Smallest ``d_M(x(t)) / (t (tau - t))`` over interior samples of a cell-centred ray grid.

    A strictly positive value is the empirical constant in the lower bound
    ``d_M(gamma(t)) >= c0 t (tau - t)``; on the Euclidean disk the ratio is 1/2.
    """
    b = (np.arange(n_beta) + 0.5) * (2 * np.pi / n_beta)
    a = -np.pi / 2 + (np.arange(n_alpha) + 0.5) * (np.pi / n_alpha)
    beta, alpha = np.repeat(b, n_alpha), np.tile(a, n_beta)
    bundle = trace_batch(metric, beta, alpha, step)
    ray, t, x, _ = bundle.trapezoid_samples()
    tau = bundle.tau[ray]
    inner = (t > 0) & (t < tau)
    dm = 0.5 * (1.0 - x[inner, 0] ** 2 - x[inner, 1] ** 2)
    return float(np.min(dm / (t[inner] * (tau[inner] - t[inner]))))
