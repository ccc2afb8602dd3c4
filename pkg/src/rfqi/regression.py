"""Dense least squares and LASSO.

All estimators here work on a *standardized* problem: design columns have
mean 0 and divisor-n standard deviation 1, the response is centered but not
rescaled. The LASSO objective is

    (1 / 2n) * ||y - X w||^2 + penalty * ||w||_1

and is solved by cyclic coordinate descent on the Gram matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import linalg

from .errors import ConstantColumn, DidNotConverge, NonFiniteInput, SingularGram
from .rng import make_rng

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 10_000
SD_FLOOR = 1e-12
EIG_FLOOR = 1e-10
# a residual sd below this fraction of the response sd is solver round-off
SIGMA_REL_FLOOR = 1e-6
_STANDARDIZED_ATOL = 1e-10


@dataclass(frozen=True)
class RegressionProblem:
    design: np.ndarray
    response: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        X = np.asarray(self.design, dtype=np.float64)
        y = np.asarray(self.response, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("design must be a 2-D array")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"response must have length {X.shape[0]}")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("design must have at least one row and one column")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise NonFiniteInput("design and response must be finite")
        if self.standardized:
            if np.max(np.abs(X.mean(axis=0))) > _STANDARDIZED_ATOL or np.max(np.abs(X.std(axis=0) - 1.0)) > _STANDARDIZED_ATOL:
                raise ValueError("design flagged standardized but columns are not mean 0 / sd 1")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "response", y)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True)
class StandardizationStats:
    column_means: np.ndarray
    column_sds: np.ndarray
    response_mean: float

    def coefficients_to_original(self, coef: np.ndarray) -> tuple[np.ndarray, float]:
        """Map standardized-scale coefficients to (coef, intercept) on the raw design."""
        raw = np.asarray(coef, dtype=np.float64) / self.column_sds
        intercept = self.response_mean - float(raw @ self.column_means)
        return raw, intercept


@dataclass(frozen=True)
class SupportSet:
    """Strictly increasing coordinate indices in ``[0, dim)``."""

    indices: tuple[int, ...]
    dim: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("support indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError(f"support indices must lie in [0, {self.dim})")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_iterable(cls, indices, dim: int) -> "SupportSet":
        return cls(tuple(sorted(set(int(i) for i in indices))), dim)

    @classmethod
    def from_mask(cls, mask) -> "SupportSet":
        mask = np.asarray(mask, dtype=bool)
        return cls(tuple(int(i) for i in np.flatnonzero(mask)), mask.shape[0])

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, j):
        return j in self.indices

    def union(self, other: "SupportSet") -> "SupportSet":
        if other.dim != self.dim:
            raise ValueError("cannot combine supports of different dimension")
        return SupportSet.from_iterable(set(self.indices) | set(other.indices), self.dim)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.dim, dtype=bool)
        m[list(self.indices)] = True
        return m


@dataclass
class LassoFit:
    coefficients: np.ndarray
    penalty: float
    iterations: int
    max_coef_delta_at_exit: float
    kkt_violation: float = math.nan
    objective_trace: np.ndarray | None = field(default=None, repr=False)


@dataclass
class OlsFit:
    coefficients_on_support: np.ndarray
    support: SupportSet
    residual_variance: float

    def full_coefficients(self) -> np.ndarray:
        w = np.zeros(self.support.dim)
        w[list(self.support.indices)] = self.coefficients_on_support
        return w


@dataclass(frozen=True)
class PenaltyChoice:
    """Everything the data-driven penalty rule computed, not just the final value."""

    penalty: float
    sigma: float
    sigma_initial: float
    quantile: float
    initial_penalty: float


def standardize(problem: RegressionProblem) -> tuple[RegressionProblem, StandardizationStats]:
    X, y = problem.design, problem.response
    if X.shape[0] < 2:
        raise ValueError("standardize needs at least two rows")
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    bad = np.flatnonzero(sds <= SD_FLOOR)
    if bad.size:
        raise ConstantColumn(int(bad[0]))
    y_mean = float(y.mean())
    Z = (X - means) / sds
    stats = StandardizationStats(column_means=means, column_sds=sds, response_mean=y_mean)
    return RegressionProblem(Z, y - y_mean, standardized=True), stats


def soft_threshold(z: float, t: float) -> float:
    if t < 0:
        raise ValueError("threshold must be non-negative")
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@numba.njit(cache=True)
def _cd_kernel(gram, corr, yy, w, penalty, tol, max_iters, trace):
    # Cyclic sweeps over j = 0..p-1; ``gw`` caches gram @ w and is rebuilt each
    # sweep so rounding cannot accumulate across thousands of updates.
    p = w.shape[0]
    record = trace.shape[0] > 0
    gw = np.zeros(p)
    sweeps = 0
    delta = np.inf
    while sweeps < max_iters:
        for k in range(p):
            acc = 0.0
            for j in range(p):
                acc += gram[k, j] * w[j]
            gw[k] = acc
        delta = 0.0
        for j in range(p):
            old = w[j]
            z = corr[j] - gw[j] + gram[j, j] * old
            if z > penalty:
                new = (z - penalty) / gram[j, j]
            elif z < -penalty:
                new = (z + penalty) / gram[j, j]
            else:
                new = 0.0
            d = new - old
            if d != 0.0:
                for k in range(p):
                    gw[k] += d * gram[k, j]
                w[j] = new
                if abs(d) > delta:
                    delta = abs(d)
        sweeps += 1
        if record:
            quad = 0.0
            lin = 0.0
            l1 = 0.0
            for j in range(p):
                quad += w[j] * gw[j]
                lin += corr[j] * w[j]
                l1 += abs(w[j])
            trace[sweeps - 1] = 0.5 * (yy - 2.0 * lin + quad) + penalty * l1
        if delta <= tol:
            break
    return sweeps, delta


def lasso_fit(
    problem: RegressionProblem,
    penalty: float,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    *,
    warm_start: np.ndarray | None = None,
    check_descent: bool = False,
) -> LassoFit:
    """Cyclic coordinate-descent LASSO on a standardized problem.

    Stops once a full sweep moves no coefficient by more than ``tol``. With
    ``check_descent`` the penalized objective is recorded after every sweep and
    an ``AssertionError`` is raised if it ever increases.

    Raises ``DidNotConverge`` (carrying the partial fit) after ``max_iters``
    sweeps without meeting ``tol``.
    """
    if not problem.standardized:
        raise ValueError("lasso_fit requires a standardized problem")
    if penalty < 0 or tol <= 0 or max_iters < 1:
        raise ValueError("need penalty >= 0, tol > 0, max_iters >= 1")
    X, y = problem.design, problem.response
    n = problem.n
    gram = X.T @ X / n
    corr = X.T @ y / n
    yy = float(y @ y) / n
    w = np.zeros(problem.p) if warm_start is None else np.array(warm_start, dtype=np.float64)
    trace = np.zeros(max_iters if check_descent else 0)
    sweeps, delta = _cd_kernel(gram, corr, yy, w, float(penalty), float(tol), int(max_iters), trace)
    fit = LassoFit(
        coefficients=w,
        penalty=float(penalty),
        iterations=int(sweeps),
        max_coef_delta_at_exit=float(delta),
        objective_trace=trace[:sweeps] if check_descent else None,
    )
    fit.kkt_violation = verify_kkt(problem, fit)
    if check_descent:
        obj = fit.objective_trace
        slack = 1e-12 * max(1.0, abs(obj[0]))
        if np.any(np.diff(obj) > slack):
            raise AssertionError("lasso objective increased between sweeps")
    if delta > tol:
        raise DidNotConverge(fit)
    return fit


def verify_kkt(problem: RegressionProblem, fit: LassoFit) -> float:
    """Largest violation of the LASSO optimality conditions.

    With g = X^T (y - X w) / n: active coordinates need g_j = penalty * sign(w_j),
    inactive ones need |g_j| <= penalty.
    """
    w = np.asarray(fit.coefficients)
    if w.shape[0] != problem.p:
        raise ValueError("fit and problem dimensions disagree")
    g = problem.design.T @ (problem.response - problem.design @ w) / problem.n
    lam = fit.penalty
    active = w != 0
    viol = np.where(active, np.abs(g - lam * np.sign(w)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max()) if viol.size else 0.0


def threshold_support(fit: LassoFit, threshold: float) -> SupportSet:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return SupportSet.from_mask(np.abs(fit.coefficients) > threshold)


def ols_restricted(problem: RegressionProblem, support: SupportSet) -> OlsFit:
    """Least squares on the columns in ``support`` via Cholesky of the Gram matrix."""
    n = problem.n
    if support.dim != problem.p:
        raise ValueError("support dimension does not match the design")
    k = len(support)
    y = problem.response
    if k == 0:
        return OlsFit(np.zeros(0), support, float(y @ y) / n)
    if k > n:
        raise SingularGram(0.0)
    Xs = problem.design[:, list(support.indices)]
    gram = Xs.T @ Xs / n
    min_eig = float(linalg.eigvalsh(gram, subset_by_index=[0, 0])[0])
    if not min_eig > EIG_FLOOR:
        raise SingularGram(min_eig)
    w = linalg.cho_solve(linalg.cho_factor(gram), Xs.T @ y / n)
    resid = y - Xs @ w
    dof = n - k
    rv = float(resid @ resid) / dof if dof > 0 else 0.0
    return OlsFit(w, support, rv)


def thresholded_lasso(
    problem: RegressionProblem,
    penalty: float,
    threshold: float,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    *,
    accept_unconverged: bool = False,
) -> tuple[SupportSet, OlsFit, LassoFit]:
    """LASSO, keep coefficients with ``|w_j| > threshold``, refit OLS on the survivors."""
    try:
        fit = lasso_fit(problem, penalty, tol, max_iters)
    except DidNotConverge as exc:
        if not accept_unconverged:
            raise
        log.warning("%s; using the partial fit", exc)
        fit = exc.fit
    support = threshold_support(fit, threshold)
    return support, ols_restricted(problem, support), fit


def noise_correlation_quantile(design: np.ndarray, alpha: float, num_sim: int, seed: int = 0) -> float:
    """Empirical (1 - alpha) quantile of ||X^T e / n||_inf for e ~ N(0, I_n)."""
    n = design.shape[0]
    rng = make_rng(seed)
    # chunk so memory stays bounded for large n
    chunk = max(1, min(num_sim, 2_000_000 // max(n, 1)))
    draws = []
    for start in range(0, num_sim, chunk):
        e = rng.standard_normal((n, min(chunk, num_sim - start)))
        draws.append(np.abs(design.T @ e / n).max(axis=0))
    return float(np.quantile(np.concatenate(draws), 1.0 - alpha))


def _residual_sd(problem: RegressionProblem, fit: LassoFit, residual: str) -> float:
    y = problem.response
    if residual == "post_ols":
        support = threshold_support(fit, 0.0)
        try:
            ols = ols_restricted(problem, support)
        except SingularGram:
            pass
        else:
            r = y - problem.design[:, list(support.indices)] @ ols.coefficients_on_support
            return float(np.sqrt(r @ r / max(problem.n - len(support), 1)))
    r = y - problem.design @ fit.coefficients
    return float(np.sqrt(r @ r / problem.n))


def choose_penalty(
    problem: RegressionProblem,
    alpha: float = 0.05,
    c: float = 1.1,
    num_sim: int = 500,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    *,
    refinements: int = 20,
    residual: str = "post_ols",
    rel_tol: float = 1e-3,
) -> PenaltyChoice:
    """Data-driven penalty ``c * sigma * q``.

    q is the simulated (1 - alpha) quantile of ||X^T e / n||_inf. sigma starts
    at the sample sd of the response and is re-estimated from the residuals of
    the LASSO at the current penalty, at most ``refinements`` times or until it
    moves by less than ``rel_tol`` (relative). ``residual="post_ols"`` uses the
    OLS refit on the LASSO's nonzero set with a degrees-of-freedom correction;
    ``residual="lasso"`` uses the raw LASSO residuals (divisor n).
    ``refinements=1, residual="lasso"`` is the single-pass variant.
    sigma never drops below ``SIGMA_REL_FLOOR`` times the response sd, so a
    noiseless response does not drive the penalty to round-off level.
    """
    if not problem.standardized:
        raise ValueError("choose_penalty requires a standardized problem")
    if not (0 < alpha < 1) or c <= 1 or num_sim < 1:
        raise ValueError("need 0 < alpha < 1, c > 1, num_sim >= 1")
    if refinements < 1 or residual not in ("post_ols", "lasso"):
        raise ValueError("refinements must be >= 1 and residual 'post_ols' or 'lasso'")
    q = noise_correlation_quantile(problem.design, alpha, num_sim, seed)
    sigma0 = float(np.std(problem.response))
    sigma = sigma0
    for _ in range(refinements):
        try:
            fit = lasso_fit(problem, c * sigma * q, tol, max_iters)
        except DidNotConverge as exc:
            fit = exc.fit
        new = max(_residual_sd(problem, fit, residual), SIGMA_REL_FLOOR * sigma0)
        done = abs(new - sigma) <= rel_tol * sigma
        sigma = new
        if done:
            break
    return PenaltyChoice(penalty=c * sigma * q, sigma=sigma, sigma_initial=sigma0, quantile=q, initial_penalty=c * sigma0 * q)


def select_penalty(
    problem: RegressionProblem,
    alpha: float = 0.05,
    c: float = 1.1,
    num_sim: int = 500,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    **refine,
) -> float:
    return choose_penalty(problem, alpha, c, num_sim, seed, tol, max_iters, **refine).penalty


def ols_full(problem: RegressionProblem) -> np.ndarray:
    """Unrestricted least squares through lstsq; used as an independent check."""
    return np.linalg.lstsq(problem.design, problem.response, rcond=None)[0]
