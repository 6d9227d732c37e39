"""Local polynomial kernel regression.

Used in two places: estimating the trajectory value near the trimmed
time endpoints (feeding the start value of the integral-curve fit), and
presmoothing the trajectory and its derivative for the two-stage
initializer.  The derivative estimate is the linear coefficient of the
local fit, never a finite difference of the level fit.

Endpoint estimation runs on the even-indexed half of the sample so that
the start value is independent of the data used by the main fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SmoothingError(RuntimeError):
    """Local design matrix singular at one or more query points."""

    def __init__(self, message, bad_queries=None):
        super().__init__(message)
        self.bad_queries = bad_queries


class InsufficientDataError(RuntimeError):
    """Too few observations near a query point."""


@dataclass(frozen=True)
class Dataset:
    """Time-ordered observations (t_j, Y_j) on [0, 1].

    Sorted ascending by time on construction (stable, so ties keep
    their input order).  ``subject_id`` tags the series when several
    subjects share a file.
    """

    times: np.ndarray
    values: np.ndarray
    subject_id: str | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != y.shape:
            raise ValueError("times and values must be 1-d and equal length")
        if len(t) and (t.min() < -1e-12 or t.max() > 1 + 1e-12):
            raise ValueError("times must lie in [0, 1]")
        order = np.argsort(t, kind="stable")
        object.__setattr__(self, "times", t[order])
        object.__setattr__(self, "values", y[order])

    @property
    def n(self) -> int:
        return len(self.times)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.times[idx], self.values[idx], self.subject_id)

    def even_half(self) -> "Dataset":
        """Observations at even positions (0, 2, ...) of the sorted series."""
        return self.subset(np.arange(0, self.n, 2))

    def odd_half(self) -> "Dataset":
        """Observations at odd positions (1, 3, ...) of the sorted series."""
        return self.subset(np.arange(1, self.n, 2))


def _kernel_weights(u: np.ndarray, kernel: str) -> np.ndarray:
    if kernel == "gaussian":
        return np.exp(-0.5 * u ** 2)
    if kernel == "epanechnikov":
        return np.maximum(0.0, 0.75 * (1.0 - u ** 2))
    raise ValueError(f"unknown kernel {kernel!r}")


def _local_systems(times, t_query, degree, bandwidth, kernel):
    """Batched weighted normal equations, one (d+1)x(d+1) system per query."""
    z = (times[None, :] - t_query[:, None]) / bandwidth
    w = _kernel_weights(z, kernel)
    powers = z[:, :, None] ** np.arange(degree + 1)
    wp = w[:, :, None] * powers
    A = np.einsum("qim,qil->qml", wp, powers)
    return z, w, powers, wp, A


def local_poly(data: Dataset, degree: int, bandwidth: float, kernel: str,
               t_query) -> tuple[np.ndarray, np.ndarray]:
    """Local polynomial fit; returns (level, derivative) at the queries.

    The fit at each query is a kernel-weighted least squares polynomial
    in the centered, bandwidth-scaled time variable; level is its
    constant term, the derivative its linear coefficient rescaled back.
    Degree 1 is enough for the level, degree 2 is recommended when the
    derivative is wanted.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    t_query = np.atleast_1d(np.asarray(t_query, dtype=float))
    level = np.empty(len(t_query))
    deriv = np.empty(len(t_query))
    for start in range(0, len(t_query), 512):
        chunk = t_query[start:start + 512]
        z, w, powers, wp, A = _local_systems(
            data.times, chunk, degree, bandwidth, kernel)
        active = (w > 0).sum(axis=1)
        bad = chunk[active < degree + 1]
        if len(bad):
            raise SmoothingError(
                f"fewer than degree+1 observations receive weight near "
                f"{bad[:5].tolist()} (bandwidth too small)", bad_queries=bad)
        rhs = np.einsum("qim,qi->qm", wp, data.values[None, :])
        try:
            coef = np.linalg.solve(A, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            dets = np.abs(np.linalg.det(A))
            bad = chunk[dets < 1e-300]
            raise SmoothingError(
                f"singular local design at queries {bad[:5].tolist()}",
                bad_queries=bad) from None
        level[start:start + 512] = coef[:, 0]
        deriv[start:start + 512] = coef[:, 1] / bandwidth
    return level, deriv


@dataclass(frozen=True)
class LocalPolyFit:
    """A configured smoother; calling it evaluates (level, derivative)."""

    data: Dataset
    degree: int
    bandwidth: float
    kernel: str = "gaussian"

    def __call__(self, t_query):
        return local_poly(self.data, self.degree, self.bandwidth,
                          self.kernel, t_query)


def _loo_errors(data: Dataset, degree: int, bandwidth: float,
                kernel: str, query_idx=None) -> np.ndarray | None:
    """Exact leave-one-out residuals of the level fit at the data times.

    Uses the linear-smoother identity (y - yhat)/(1 - l_jj), where l_jj
    is the weight the fit at t_j places on observation j.  Returns None
    when the design is singular for this bandwidth.  ``query_idx``
    restricts the residuals to a subset of observations (the smoother
    still uses all of them).
    """
    if query_idx is None:
        query_idx = np.arange(data.n)
    t = data.times
    z, w, powers, wp, A = _local_systems(t, t[query_idx], degree, bandwidth,
                                         kernel)
    if ((w > 0).sum(axis=1) < degree + 1).any():
        return None
    rhs = np.einsum("qim,qi->qm", wp, data.values[None, :])
    try:
        coef = np.linalg.solve(A, rhs[..., None])[..., 0]
        e1 = np.zeros(degree + 1)
        e1[0] = 1.0
        Ainv_e1 = np.linalg.solve(
            A, np.broadcast_to(e1[:, None],
                               (len(query_idx), degree + 1, 1)))[..., 0]
    except np.linalg.LinAlgError:
        return None
    level = coef[:, 0]
    l_jj = _kernel_weights(np.zeros(1), kernel)[0] * Ainv_e1[:, 0]
    denom = 1.0 - l_jj
    if (denom <= 1e-12).any():
        return None
    return (data.values[query_idx] - level) / denom


_CV_MAX_QUERIES = 400


def cv_bandwidth(data: Dataset, degree: int, kernel: str,
                 grid) -> float:
    """Bandwidth from the grid minimizing leave-one-out level error.

    Ties break toward the larger bandwidth.  Raises SmoothingError when
    every grid value yields a singular design.  On large samples the
    score is evaluated at a deterministic thinning of the observations
    (every k-th point) to keep the cost linear in n; the left-out fits
    always use the full sample.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if len(grid) == 0 or grid[0] <= 0:
        raise ValueError("bandwidth grid must be nonempty and positive")
    if data.n > _CV_MAX_QUERIES:
        stride = -(-data.n // _CV_MAX_QUERIES)
        query_idx = np.arange(0, data.n, stride)
    else:
        query_idx = None
    best_bw, best_err = None, np.inf
    for bw in grid:
        resid = _loo_errors(data, degree, bw, kernel, query_idx)
        if resid is None:
            continue
        err = float(resid @ resid)
        if err <= best_err:
            best_bw, best_err = float(bw), err
    if best_bw is None:
        raise SmoothingError("all candidate bandwidths give singular designs")
    return best_bw


def choose_delta(times, frac: float = 0.05) -> float:
    """Smallest trimming level with ~``frac`` of the data in each tail.

    Returns the smallest delta such that at least ceil(frac*n) points
    fall in [0, delta] and in [1-delta, 1], placed midway between the
    adjacent order statistics.
    """
    t = np.sort(np.asarray(times, dtype=float))
    n = len(t)
    k = int(np.ceil(frac * n))
    if n < 2 * k + 2:
        raise ValueError("too few observations to trim")
    lo = 0.5 * (t[k - 1] + t[k])
    hi = 0.5 * (t[n - k - 1] + t[n - k])
    delta = max(lo, 1.0 - hi)
    if not 0.0 < delta < 0.5:
        raise ValueError(f"degenerate trimming level {delta:.4g}")
    return float(delta)


def estimate_endpoints(data: Dataset, delta: float, p: int = 4,
                       kernel: str = "gaussian",
                       c_grid=(0.25, 0.5, 1.0, 2.0)) -> tuple[float, float]:
    """Trajectory values at the trimmed endpoints, from the even half.

    Fits a local polynomial of degree ``p`` with bandwidth c * m**(-1/(2p+3))
    (m the subsample size, c picked by leave-one-out CV) and evaluates
    the level at delta and 1 - delta.  Uses only even-indexed
    observations so the estimates are independent of the odd-indexed
    half that feeds the main fit.  Degree 4 keeps the bias small enough
    for noiseless data to anchor the trajectory fit almost exactly;
    candidate bandwidths without 2(p+1) points in reach of an endpoint
    are dropped before cross-validation.
    """
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must be in (0, 1/2)")
    sub = data.even_half()
    if sub.n < 2 * (p + 1):
        raise InsufficientDataError(
            f"only {sub.n} points available for endpoint estimation")
    rate = sub.n ** (-1.0 / (2 * p + 3))
    need = 2 * (p + 1)
    grid = [c * rate for c in c_grid
            if all(int(np.sum(np.abs(sub.times - q) <= c * rate)) >= need
                   for q in (delta, 1.0 - delta))]
    if not grid:
        raise InsufficientDataError(
            f"no candidate bandwidth has {need} points within reach of the "
            f"trimmed endpoints")
    try:
        bw = cv_bandwidth(sub, p, kernel, grid)
        level, _ = local_poly(sub, p, bw, kernel, [delta, 1.0 - delta])
    except SmoothingError as exc:
        raise InsufficientDataError(
            f"endpoint smoothing impossible: {exc}") from None
    return float(level[0]), float(level[1])
