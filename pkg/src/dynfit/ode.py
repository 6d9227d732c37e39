"""Trajectories of x' = g(x) and their parameter sensitivities.

The gradient function is a spline-coefficient model extended flat
outside its basis domain.  Trajectories are integrated with the
classical 4th-order Runge-Kutta scheme on a uniform grid (last step
shortened), with cubic-Hermite dense output using g as the slope.

First-order sensitivities (one per coefficient, plus the sensitivity to
the starting value) and second-order sensitivities satisfy linear ODEs
driven by the trajectory; when g stays positive along the path they
also admit closed-form quadrature expressions.  Both routes are
implemented and are required to agree; the quadrature route doubles as
the fast path for building least-squares Jacobians.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from .basis import SplineBasis

_POSITIVITY_GRID = 4096


class TrajectoryDivergenceError(RuntimeError):
    """State exceeded the overflow bound during integration."""


class NonpositiveGradientError(RuntimeError):
    """Closed-form sensitivities need g > 0 on the traversed range."""


@dataclass(frozen=True)
class GradientModel:
    """Gradient function g(x) = sum_k beta_k * phi_k(x), extended flat.

    Outside [x_lo, x_hi] the function continues with its boundary value,
    so g' and g'' vanish there and the basis row is clamped to the
    boundary row (the derivative of the extension w.r.t. beta).
    """

    basis: SplineBasis
    beta: np.ndarray
    _gpoly: tuple = field(repr=False, default=None)
    _min_g: float = field(repr=False, default=None)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.shape != (self.basis.n_basis,):
            raise ValueError("coefficient vector does not match the basis")
        object.__setattr__(self, "beta", beta)
        c0, c1, c2 = self.basis._tables
        gp = (np.einsum("jkm,k->jm", c0, beta),
              np.einsum("jkm,k->jm", c1, beta),
              np.einsum("jkm,k->jm", c2, beta))
        object.__setattr__(self, "_gpoly", gp)
        grid = np.linspace(self.basis.x_lo, self.basis.x_hi, _POSITIVITY_GRID)
        object.__setattr__(self, "_min_g", float(self.g(grid).min()))

    @property
    def n_params(self) -> int:
        return self.basis.n_basis

    @property
    def min_gradient(self) -> float:
        """Minimum of g over a dense grid on the basis domain."""
        return self._min_g

    @property
    def is_positive(self) -> bool:
        return self._min_g > 0.0

    def _poly_at(self, x: float, which: int) -> float:
        bas = self.basis
        x = min(max(x, bas.x_lo), bas.x_hi)
        j = bisect_right(bas.breakpoints, x) - 1
        j = min(max(j, 0), len(bas.breakpoints) - 2)
        u = x - bas.breakpoints[j]
        c = self._gpoly[which][j]
        acc = 0.0
        for m in range(len(c) - 1, -1, -1):
            acc = acc * u + c[m]
        return acc

    def g(self, x):
        """Gradient value(s); flat extension outside the domain."""
        if np.ndim(x) == 0:
            return self._poly_at(float(x), 0)
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.basis.x_lo, self.basis.x_hi)
        j = self.basis.interval_index(xc)
        u = xc - self.basis.breakpoints[j]
        powers = u[:, None] ** np.arange(self.basis.order)
        return np.einsum("jm,jm->j", self._gpoly[0][j], powers)

    def g_prime(self, x):
        """First derivative; zero outside the domain (flat extension)."""
        return self._deriv(x, 1)

    def g_second(self, x):
        """Second derivative; zero outside the domain."""
        return self._deriv(x, 2)

    def _deriv(self, x, which):
        lo, hi = self.basis.x_lo, self.basis.x_hi
        if np.ndim(x) == 0:
            x = float(x)
            if x < lo or x > hi:
                return 0.0
            return self._poly_at(x, which)
        x = np.asarray(x, dtype=float)
        j = self.basis.interval_index(np.clip(x, lo, hi))
        u = np.clip(x, lo, hi) - self.basis.breakpoints[j]
        powers = u[:, None] ** np.arange(self.basis.order)
        vals = np.einsum("jm,jm->j", self._gpoly[which][j], powers)
        vals[(x < lo) | (x > hi)] = 0.0
        return vals

    def basis_row(self, x):
        """Basis values clamped to the boundary outside the domain.

        This is d g_ext(x) / d beta under the flat extension, which is
        what the sensitivity equations need; contrast with
        ``SplineBasis.eval`` which is zero outside the domain.
        """
        xc = np.clip(x, self.basis.x_lo, self.basis.x_hi)
        return self.basis.eval(xc)


@dataclass(frozen=True)
class TrajectorySolution:
    """RK4 solution on a grid, with cubic-Hermite dense output."""

    t_grid: np.ndarray
    x_values: np.ndarray
    f_values: np.ndarray  # g(x) at the grid nodes, the Hermite slopes
    step_size: float
    t_start: float
    t_end: float
    x_start: float
    nonpositive_encountered: bool = False

    def state_at(self, t):
        """Interpolated state at arbitrary times inside the window."""
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.min() < self.t_start - 1e-12 or t.max() > self.t_end + 1e-12:
            raise ValueError("query time outside the solved window")
        i = np.clip(np.searchsorted(self.t_grid, t, side="right") - 1,
                    0, len(self.t_grid) - 2)
        dt = self.t_grid[i + 1] - self.t_grid[i]
        s = np.clip((t - self.t_grid[i]) / dt, 0.0, 1.0)
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s ** 2 * (3 - 2 * s)
        h11 = s ** 2 * (s - 1)
        out = (h00 * self.x_values[i] + h10 * dt * self.f_values[i]
               + h01 * self.x_values[i + 1] + h11 * dt * self.f_values[i + 1])
        return float(out[0]) if scalar else out

    def __call__(self, t):
        return self.state_at(t)


def _time_grid(t_start: float, t_end: float, h: float,
               extra_times=None) -> np.ndarray:
    n_full = int(np.floor((t_end - t_start) / h + 1e-9))
    grid = t_start + h * np.arange(n_full + 1)
    if grid[-1] < t_end - 1e-12:
        grid = np.append(grid, t_end)
    else:
        grid[-1] = t_end
    if extra_times is not None and len(extra_times):
        extra = np.asarray(extra_times, dtype=float)
        grid = np.unique(np.concatenate([grid, extra]))
        grid = grid[(grid >= t_start) & (grid <= t_end)]
    return grid


def solve_trajectory(model, t_start: float, t_end: float, x_start: float,
                     h: float = 1e-3, overflow_bound: float = 1e6,
                     extra_times=None) -> TrajectorySolution:
    """Integrate x' = g(x) from (t_start, x_start) by classical RK4.

    ``model`` only needs a ``g(x)`` method here, so synthetic non-spline
    dynamics go through the same interface.  Raises
    TrajectoryDivergenceError when |x| exceeds ``overflow_bound``;
    records (without raising) whether a nonpositive gradient value was
    seen at a grid node, since that voids the monotonicity guarantee.
    """
    if not t_start < t_end:
        raise ValueError("need t_start < t_end")
    if h <= 0:
        raise ValueError("step size must be positive")
    grid = _time_grid(t_start, t_end, h, extra_times)
    g = model.g
    x = float(x_start)
    xs = np.empty(len(grid))
    fs = np.empty(len(grid))
    xs[0] = x
    f = g(x)
    fs[0] = f
    nonpos = f <= 0.0
    for i in range(len(grid) - 1):
        dt = grid[i + 1] - grid[i]
        k1 = fs[i]
        k2 = g(x + 0.5 * dt * k1)
        k3 = g(x + 0.5 * dt * k2)
        k4 = g(x + dt * k3)
        x = x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if not np.isfinite(x) or abs(x) > overflow_bound:
            raise TrajectoryDivergenceError(
                f"state overflow at t={grid[i + 1]:.6g} (|x| > {overflow_bound:g})")
        f = g(x)
        xs[i + 1] = x
        fs[i + 1] = f
        if f <= 0.0:
            nonpos = True
    return TrajectorySolution(t_grid=grid, x_values=xs, f_values=fs,
                              step_size=h, t_start=float(t_start),
                              t_end=float(t_end), x_start=float(x_start),
                              nonpositive_encountered=bool(nonpos))


@dataclass(frozen=True)
class SensitivityBundle:
    """Trajectory derivatives at query times.

    ``jacobian[q, r]`` is the derivative of the state at t_query[q] with
    respect to coefficient r; ``initial_sensitivity[q]`` the derivative
    with respect to the starting value; ``hessian`` (optional) has shape
    (n_query, n_params, n_params) and is symmetric in the last two axes.
    """

    t_query: np.ndarray
    jacobian: np.ndarray
    initial_sensitivity: np.ndarray
    hessian: np.ndarray | None = None


def _augmented_rhs(model, x, S, A):
    gp = model.g_prime(x)
    phi = model.basis_row(x)
    return model.g(x), S * gp + phi, A * gp


def sensitivities_ode(model, traj: TrajectorySolution,
                      t_query) -> SensitivityBundle:
    """First-order sensitivities by RK4 on the augmented linear system.

    The state is re-integrated alongside the sensitivities (sharing all
    gradient evaluations) on the trajectory grid refined with the query
    times, so the bundle is read off at exact grid nodes.
    """
    t_query = np.atleast_1d(np.asarray(t_query, dtype=float))
    grid = np.unique(np.concatenate([traj.t_grid, t_query]))
    if t_query.min() < traj.t_start - 1e-12 or t_query.max() > traj.t_end + 1e-12:
        raise ValueError("query time outside the solved window")
    M = model.n_params
    x = traj.x_start
    S = np.zeros(M)
    A = 1.0
    want = {round(t, 15) for t in t_query}
    out_S = {}
    out_A = {}

    def record(t, S, A):
        key = round(t, 15)
        if key in want:
            out_S[key] = S.copy()
            out_A[key] = A

    record(grid[0], S, A)
    for i in range(len(grid) - 1):
        dt = grid[i + 1] - grid[i]
        kx1, kS1, kA1 = _augmented_rhs(model, x, S, A)
        kx2, kS2, kA2 = _augmented_rhs(model, x + 0.5 * dt * kx1,
                                       S + 0.5 * dt * kS1, A + 0.5 * dt * kA1)
        kx3, kS3, kA3 = _augmented_rhs(model, x + 0.5 * dt * kx2,
                                       S + 0.5 * dt * kS2, A + 0.5 * dt * kA2)
        kx4, kS4, kA4 = _augmented_rhs(model, x + dt * kx3,
                                       S + dt * kS3, A + dt * kA3)
        x = x + dt * (kx1 + 2 * kx2 + 2 * kx3 + kx4) / 6.0
        S = S + dt * (kS1 + 2 * kS2 + 2 * kS3 + kS4) / 6.0
        A = A + dt * (kA1 + 2 * kA2 + 2 * kA3 + kA4) / 6.0
        record(grid[i + 1], S, A)

    jac = np.vstack([out_S[round(t, 15)] for t in t_query])
    init = np.array([out_A[round(t, 15)] for t in t_query])
    return SensitivityBundle(t_query=t_query, jacobian=jac,
                             initial_sensitivity=init)


def _adaptive_segment(fvec, a: float, b: float, rtol: float,
                      nodes20, nodes40, depth: int = 0) -> np.ndarray:
    """Vector-valued Gauss-Legendre with one refinement comparison."""
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    z20, w20 = nodes20
    z40, w40 = nodes40
    coarse = (w20[:, None] * fvec(mid + half * z20)).sum(axis=0) * half
    fine = (w40[:, None] * fvec(mid + half * z40)).sum(axis=0) * half
    err = np.max(np.abs(fine - coarse))
    scale = max(np.max(np.abs(fine)), 1e-300)
    if err <= rtol * scale or depth >= 12 or (b - a) < 1e-13:
        return fine
    return (_adaptive_segment(fvec, a, mid, rtol, nodes20, nodes40, depth + 1)
            + _adaptive_segment(fvec, mid, b, rtol, nodes20, nodes40, depth + 1))


def sensitivities_closed_form(model, traj: TrajectorySolution, t_query,
                              rtol: float = 1e-10) -> SensitivityBundle:
    """First-order sensitivities by the explicit quadrature formulas.

    The coefficient sensitivities are g(X(t)) times the integral of
    phi_r(u)/g(u)^2 from the starting state to X(t); the starting-value
    sensitivity is g(X(t))/g(x_start).  Requires g > 0 on the traversed
    range.  Integration is adaptive Gauss-Legendre split at the basis
    breakpoints and at the query states.
    """
    t_query = np.atleast_1d(np.asarray(t_query, dtype=float))
    xq = np.atleast_1d(traj.state_at(t_query))
    x0 = traj.x_start
    x_lo = min(float(xq.min()), x0)
    x_hi = max(float(xq.max()), x0)
    check = np.linspace(x_lo, x_hi, 1024)
    if np.min(model.g(check)) <= 0.0:
        raise NonpositiveGradientError(
            "gradient is not positive on the traversed state range")

    bas = model.basis
    cuts = bas.breakpoints[(bas.breakpoints > x0) & (bas.breakpoints < x_hi)]
    edges = np.unique(np.concatenate([[x0], cuts, xq, [x_hi]]))
    nodes20 = leggauss(20)
    nodes40 = leggauss(40)

    def integrand_vec(u):
        gu = model.g(u)
        xc = np.clip(u, bas.x_lo, bas.x_hi)
        phi = bas.eval(xc)
        return phi / np.asarray(gu)[:, None] ** 2

    prefix = np.zeros((len(edges), model.n_params))
    for s in range(len(edges) - 1):
        seg = _adaptive_segment(integrand_vec, edges[s], edges[s + 1],
                                rtol, nodes20, nodes40)
        prefix[s + 1] = prefix[s] + seg
    cum = {round(e, 15): prefix[i] for i, e in enumerate(edges)}
    g_q = np.atleast_1d(model.g(xq))
    jac = np.vstack([g_q[i] * cum[round(x, 15)] for i, x in enumerate(xq)])
    init = g_q / model.g(x0)
    return SensitivityBundle(t_query=t_query, jacobian=jac,
                             initial_sensitivity=init)


def hessian_sensitivities(model, traj: TrajectorySolution,
                          first: SensitivityBundle, t_query,
                          method: str = "ode") -> SensitivityBundle:
    """Second-order sensitivities, by augmented RK4 or by quadrature.

    ``method="ode"`` integrates the linear matrix ODE with zero initial
    conditions; ``method="quadrature"`` evaluates the explicit
    time-integral form (Gauss-Legendre per query, with the first-order
    sensitivities supplied along the path).  Both give a symmetric
    (n_query, M, M) array; they are used for curvature diagnostics, not
    on the optimizer hot path.
    """
    t_query = np.atleast_1d(np.asarray(t_query, dtype=float))
    if method == "ode":
        return _hessian_ode(model, traj, t_query)
    if method == "quadrature":
        return _hessian_quadrature(model, traj, t_query)
    raise ValueError(f"unknown method {method!r}")


def _basis_prime_row(model, x):
    """Derivative of the basis row; zero under the flat extension."""
    if model.basis.x_lo <= x <= model.basis.x_hi:
        return model.basis.eval(x, 1)
    return np.zeros(model.n_params)


def _hessian_rhs(model, x, S, A, H):
    g = model.g(x)
    gp = model.g_prime(x)
    gpp = model.g_second(x)
    phi = model.basis_row(x)
    phip = _basis_prime_row(model, x)
    dS = S * gp + phi
    cross = np.outer(S, phip)
    dH = H * gp + cross + cross.T + gpp * np.outer(S, S)
    return g, dS, A * gp, dH


def _hessian_ode(model, traj, t_query):
    grid = np.unique(np.concatenate([traj.t_grid, t_query]))
    M = model.n_params
    x = traj.x_start
    S = np.zeros(M)
    A = 1.0
    H = np.zeros((M, M))
    want = {round(t, 15) for t in t_query}
    out = {}
    outS = {}
    outA = {}
    if round(grid[0], 15) in want:
        out[round(grid[0], 15)] = H.copy()
        outS[round(grid[0], 15)] = S.copy()
        outA[round(grid[0], 15)] = A
    for i in range(len(grid) - 1):
        dt = grid[i + 1] - grid[i]
        k1 = _hessian_rhs(model, x, S, A, H)
        k2 = _hessian_rhs(model, x + 0.5 * dt * k1[0], S + 0.5 * dt * k1[1],
                          A + 0.5 * dt * k1[2], H + 0.5 * dt * k1[3])
        k3 = _hessian_rhs(model, x + 0.5 * dt * k2[0], S + 0.5 * dt * k2[1],
                          A + 0.5 * dt * k2[2], H + 0.5 * dt * k2[3])
        k4 = _hessian_rhs(model, x + dt * k3[0], S + dt * k3[1],
                          A + dt * k3[2], H + dt * k3[3])
        x += dt * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0
        S = S + dt * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0
        A += dt * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]) / 6.0
        H = H + dt * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]) / 6.0
        key = round(grid[i + 1], 15)
        if key in want:
            out[key] = 0.5 * (H + H.T)
            outS[key] = S.copy()
            outA[key] = A
    jac = np.vstack([outS[round(t, 15)] for t in t_query])
    init = np.array([outA[round(t, 15)] for t in t_query])
    hess = np.stack([out[round(t, 15)] for t in t_query])
    return SensitivityBundle(t_query=t_query, jacobian=jac,
                             initial_sensitivity=init, hessian=hess)


def _knot_crossing_times(model, traj) -> np.ndarray:
    """Times at which the (monotone) trajectory crosses a basis knot.

    The integrands of the quadrature route lose smoothness there, so
    time integrals are split at these points.  Bisection on the dense
    output; assumes x_values increasing.
    """
    xs = traj.x_values
    if xs[-1] <= xs[0]:
        return np.empty(0)
    cuts = model.basis.breakpoints
    cuts = cuts[(cuts > xs[0]) & (cuts < xs[-1])]
    times = []
    for b in cuts:
        lo, hi = traj.t_start, traj.t_end
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if traj.state_at(mid) < b:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-13:
                break
        times.append(0.5 * (lo + hi))
    return np.asarray(times)


def _hessian_quadrature(model, traj, t_query, n_nodes: int = 24):
    z, w = leggauss(n_nodes)
    crossings = _knot_crossing_times(model, traj)

    def segments(tq):
        inner = crossings[(crossings > traj.t_start) & (crossings < tq)]
        return np.concatenate([[traj.t_start], inner, [tq]])

    all_nodes = [t_query]
    for tq in t_query:
        edges = segments(tq)
        for a, b in zip(edges[:-1], edges[1:]):
            all_nodes.append(0.5 * (a + b) + 0.5 * (b - a) * z)
    nodes = np.unique(np.concatenate(all_nodes))
    bundle = sensitivities_ode(model, traj, nodes)
    S_at = {round(t, 15): bundle.jacobian[i] for i, t in enumerate(nodes)}
    x_at = {round(t, 15): traj.state_at(t) for t in nodes}

    def integrand(s):
        xs = x_at[round(s, 15)]
        Ss = S_at[round(s, 15)]
        cross = np.outer(Ss, _basis_prime_row(model, xs))
        return (cross + cross.T
                + model.g_second(xs) * np.outer(Ss, Ss)) / model.g(xs)

    hess = []
    for tq in t_query:
        acc = np.zeros((model.n_params, model.n_params))
        edges = segments(tq)
        for a, b in zip(edges[:-1], edges[1:]):
            mid, half = 0.5 * (a + b), 0.5 * (b - a)
            for zi, wi in zip(z, w):
                acc += half * wi * integrand(mid + half * zi)
        g_t = model.g(traj.state_at(tq))
        hess.append(g_t * 0.5 * (acc + acc.T))
    jac = np.vstack([S_at[round(t, 15)] for t in t_query])
    init = np.array([model.g(x_at[round(t, 15)]) / model.g(traj.x_start)
                     for t in t_query])
    return SensitivityBundle(t_query=t_query, jacobian=jac,
                             initial_sensitivity=init, hessian=np.stack(hess))
