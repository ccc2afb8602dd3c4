"""Reward-filtered fitted-Q iteration/evaluation and its baselines.

Every regression is per action on the d state coordinates (the action-product
feature map). Within an (t, action) cell the states are standardized once; the
same standardization serves the reward LASSO and the Bellman-target refit, and
the refit is mapped back to raw-state coefficients plus an intercept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DidNotConverge, EmptyActionCell, InvalidConfig, SingularGram
from .mdp import Greedy, MdpSpec, Policy, Uniform, policy_probs, simulate
from .regression import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
    RegressionProblem,
    StandardizationStats,
    SupportSet,
    choose_penalty,
    lasso_fit,
    ols_restricted,
    standardize,
    threshold_support,
)
from .rng import DEFAULT_ALGORITHM, derive_seed

log = logging.getLogger(__name__)

ITERATION = "iteration"
EVALUATION = "evaluation"
UNION = "union"
PER_ACTION = "per_action"


@dataclass(frozen=True)
class FixedPenalty:
    value: float


@dataclass(frozen=True)
class DataDrivenPenalty:
    alpha: float = 0.05
    c: float = 1.1
    num_sim: int = 500
    refinements: int = 20
    residual: str = "post_ols"


@dataclass(frozen=True)
class FixedThreshold:
    value: float


@dataclass(frozen=True)
class ScaledThreshold:
    """threshold = C * penalty, where the penalty is already on the response scale
    (for the data-driven rule it carries the refined noise estimate)."""

    C: float = 2.0


PenaltyRule = Union[FixedPenalty, DataDrivenPenalty]
ThresholdRule = Union[FixedThreshold, ScaledThreshold]


@dataclass(frozen=True, eq=False)
class FqiConfig:
    mode: str = EVALUATION
    target_policy: Policy | None = None
    penalty_rule: PenaltyRule = field(default_factory=DataDrivenPenalty)
    threshold_rule: ThresholdRule = field(default_factory=ScaledThreshold)
    discount: float = 0.9
    lasso_tol: float = DEFAULT_TOL
    lasso_max_iters: int = DEFAULT_MAX_ITERS
    support_pooling: str = UNION
    expected_support: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (ITERATION, EVALUATION):
            raise InvalidConfig(f"mode must be {ITERATION!r} or {EVALUATION!r}")
        if self.mode == EVALUATION and self.target_policy is None:
            raise InvalidConfig("evaluation mode needs a target policy")
        if self.support_pooling not in (UNION, PER_ACTION):
            raise InvalidConfig(f"support_pooling must be {UNION!r} or {PER_ACTION!r}")
        pr, tr = self.penalty_rule, self.threshold_rule
        if isinstance(pr, FixedPenalty) and pr.value < 0:
            raise InvalidConfig("fixed penalty must be non-negative")
        if isinstance(pr, DataDrivenPenalty) and not (0 < pr.alpha < 1 and pr.c > 1 and pr.num_sim >= 1):
            raise InvalidConfig("data-driven penalty needs 0 < alpha < 1, c > 1, num_sim >= 1")
        if isinstance(tr, FixedThreshold) and tr.value < 0:
            raise InvalidConfig("fixed threshold must be non-negative")
        if isinstance(tr, ScaledThreshold) and tr.C <= 0:
            raise InvalidConfig("threshold scale C must be positive")
        if not (0 <= self.discount <= 1):
            raise InvalidConfig("discount must lie in [0, 1]")

    @property
    def min_cell_size(self) -> int:
        return max(10, 2 * self.expected_support)


@dataclass
class LinearQ:
    """q_t(s, a) = coef[t, a] . s + intercept[t, a]; ``supports[t][a]`` lists the
    state coordinates the (t, a) fit was allowed to use."""

    coef: np.ndarray  # (T, A, d)
    intercept: np.ndarray  # (T, A)
    supports: list[list[SupportSet]]

    @classmethod
    def zeros(cls, T: int, A: int, d: int) -> "LinearQ":
        empty = SupportSet((), d)
        return cls(np.zeros((T, A, d)), np.zeros((T, A)), [[empty] * A for _ in range(T)])

    @property
    def horizon(self) -> int:
        return self.coef.shape[0]

    @property
    def num_actions(self) -> int:
        return self.coef.shape[1]

    @property
    def d(self) -> int:
        return self.coef.shape[2]

    def values(self, states: np.ndarray, t: int) -> np.ndarray:
        """(n, A) matrix of q_t(s, a); a single state gives shape (A,)."""
        S = np.asarray(states, dtype=np.float64)
        return S @ self.coef[t].T + self.intercept[t]

    def support_union(self, t: int) -> SupportSet:
        """Coordinates with a nonzero coefficient for some action at stage t."""
        return SupportSet.from_mask(np.any(self.coef[t] != 0.0, axis=0))


@dataclass(frozen=True)
class StageDiagnostic:
    t: int
    action: int
    penalty: float
    threshold: float
    support_size: int
    lasso_iterations: int
    kkt_violation: float
    converged: bool = True


@dataclass
class FqiResult:
    qfun: LinearQ
    greedy_policy: Greedy
    per_timestep_diagnostics: list[StageDiagnostic]
    warnings: list[str] = field(default_factory=list)


# -- helpers ----------------------------------------------------------------


@dataclass
class _Cell:
    mask: np.ndarray
    problem_x: RegressionProblem  # standardized design with a placeholder response
    stats: StandardizationStats

    def with_response(self, y: np.ndarray) -> tuple[RegressionProblem, float]:
        y = np.asarray(y, dtype=np.float64)[self.mask]
        mean = float(y.mean())
        return RegressionProblem(self.problem_x.design, y - mean, standardized=True), mean


def _cells(batch, t: int, config: FqiConfig) -> list[_Cell]:
    X = batch.states(t)
    actions = batch.actions[:, t]
    out = []
    for a in range(batch.num_actions):
        mask = actions == a
        count = int(mask.sum())
        if count < config.min_cell_size:
            raise EmptyActionCell(a, t, count, config.min_cell_size)
        std_problem, stats = standardize(RegressionProblem(X[mask], np.zeros(count)))
        out.append(_Cell(mask, std_problem, stats))
    return out


def _stage_seed(config: FqiConfig, t: int, a: int) -> int:
    return derive_seed(config.seed, t, a)


def _tuning(problem: RegressionProblem, config: FqiConfig, t: int, a: int) -> tuple[float, float]:
    """(penalty, threshold) for a standardized reward problem of cell (t, a)."""
    rule = config.penalty_rule
    if isinstance(rule, FixedPenalty):
        penalty = rule.value
    else:
        penalty = choose_penalty(
            problem,
            rule.alpha,
            rule.c,
            rule.num_sim,
            _stage_seed(config, t, a),
            config.lasso_tol,
            config.lasso_max_iters,
            refinements=rule.refinements,
            residual=rule.residual,
        ).penalty
    tr = config.threshold_rule
    return penalty, (tr.value if isinstance(tr, FixedThreshold) else tr.C * penalty)


def _support_for(
    problem: RegressionProblem, penalty: float, threshold: float, config: FqiConfig, t: int, a: int
) -> tuple[SupportSet, StageDiagnostic]:
    converged = True
    try:
        fit = lasso_fit(problem, penalty, config.lasso_tol, config.lasso_max_iters)
    except DidNotConverge as exc:
        log.warning("t=%d action=%d: %s; using the partial fit", t, a, exc)
        fit, converged = exc.fit, False
    support = threshold_support(fit, threshold)
    return support, StageDiagnostic(t, a, penalty, threshold, len(support), fit.iterations, fit.kkt_violation, converged)


def _pool(supports: list[SupportSet], config: FqiConfig) -> list[SupportSet]:
    if config.support_pooling == PER_ACTION:
        return supports
    pooled = supports[0]
    for s in supports[1:]:
        pooled = pooled.union(s)
    return [pooled] * len(supports)


def _refit(cell: _Cell, y: np.ndarray, support: SupportSet, t: int, a: int) -> tuple[np.ndarray, float]:
    problem, mean = cell.with_response(y)
    try:
        ols = ols_restricted(problem, support)
    except SingularGram as exc:
        raise SingularGram(exc.min_eig, t, a) from None
    coef = ols.full_coefficients() / cell.stats.column_sds
    return coef, mean - float(coef @ cell.stats.column_means)


def _stage_supports(batch, t: int, cells: list[_Cell], config: FqiConfig, targets: np.ndarray | None = None):
    """Thresholded-LASSO supports per action, pooled, of the stage-t rewards or,
    when given, of ``targets``.

    Penalty and threshold are always tuned on the rewards, so both methods
    share one noise calibration.
    """
    supports, diagnostics = [], []
    for a, cell in enumerate(cells):
        reward_problem, _ = cell.with_response(batch.rewards[:, t])
        penalty, threshold = _tuning(reward_problem, config, t, a)
        problem = reward_problem if targets is None else cell.with_response(targets)[0]
        support, diag = _support_for(problem, penalty, threshold, config, t, a)
        supports.append(support)
        diagnostics.append(diag)
    return _pool(supports, config), diagnostics


def bellman_targets(batch, t: int, q_next: LinearQ | None, config: FqiConfig) -> np.ndarray:
    """One regression target per stage-t transition.

    The last stage (or ``q_next is None``) returns the rewards themselves.
    ``q_next`` is evaluated at stage t + 1 of its own time index.
    """
    rewards = batch.rewards[:, t]
    last = t == batch.horizon - 1
    if last != (q_next is None):
        raise ValueError("q_next must be given exactly when t is not the last stage")
    if last:
        return rewards
    s_next = batch.next_states(t)
    values = q_next.values(s_next, t + 1)
    if config.mode == ITERATION:
        cont = values.max(axis=1)
    else:
        cont = np.einsum("ij,ij->i", policy_probs(config.target_policy, s_next, t + 1), values)
    return rewards + config.discount * cont


def reward_support(batch, t: int, config: FqiConfig) -> SupportSet:
    """Thresholded-LASSO support of the stage-t rewards in state coordinates.

    Per-action supports are pooled per ``config.support_pooling``; the union of
    the pooled sets is returned (identical to the pooled set under UNION).
    """
    supports, _ = _stage_supports(batch, t, _cells(batch, t, config), config)
    pooled = supports[0]
    for s in supports[1:]:
        pooled = pooled.union(s)
    return pooled


def _backward(batch, config: FqiConfig, support_from: str) -> FqiResult:
    T, A, d = batch.horizon, batch.num_actions, batch.d
    q = LinearQ.zeros(T, A, d)
    diagnostics: list[StageDiagnostic] = []
    warnings: list[str] = []
    for t in range(T - 1, -1, -1):
        cells = _cells(batch, t, config)
        targets = bellman_targets(batch, t, None if t == T - 1 else q, config)
        supports, diags = _stage_supports(batch, t, cells, config, None if support_from == "rewards" else targets)
        diagnostics.extend(diags)
        for a, cell in enumerate(cells):
            if len(supports[a]) == 0:
                msg = f"t={t} action={a}: empty recovered support, q coefficients set to zero"
                log.info(msg)
                warnings.append(msg)
            q.coef[t, a], q.intercept[t, a] = _refit(cell, targets, supports[a], t, a)
            q.supports[t][a] = supports[a]
    return FqiResult(q, Greedy(q, 0), diagnostics, warnings)


def run_reward_filtered(batch, config: FqiConfig) -> FqiResult:
    """Backward induction where each stage's support comes from a thresholded
    LASSO of that stage's rewards and the Bellman target is refit by OLS on it."""
    return _backward(batch, config, "rewards")


def run_naive_thresholded(batch, config: FqiConfig) -> FqiResult:
    """Same loop, but the support comes from a thresholded LASSO of the Bellman targets."""
    return _backward(batch, config, "targets")


def fit_unrestricted(batch, config: FqiConfig) -> LinearQ:
    """Backward FQE/FQI with per-action OLS on every state coordinate."""
    T, A, d = batch.horizon, batch.num_actions, batch.d
    q = LinearQ.zeros(T, A, d)
    full = SupportSet(tuple(range(d)), d)
    for t in range(T - 1, -1, -1):
        cells = _cells(batch, t, config)
        targets = bellman_targets(batch, t, None if t == T - 1 else q, config)
        for a, cell in enumerate(cells):
            q.coef[t, a], q.intercept[t, a] = _refit(cell, targets, full, t, a)
            q.supports[t][a] = full
    return q


def run_oracle_q(
    spec: MdpSpec,
    target_policy: Policy,
    n_oracle: int,
    seed: int,
    config: FqiConfig,
    initial_sd: float = 1.0,
    rng_algorithm: str = DEFAULT_ALGORITHM,
) -> LinearQ:
    """Unrestricted backward fit on a fresh uniform-behavior batch: FQE of
    ``target_policy`` in evaluation mode, FQI in iteration mode."""
    if n_oracle < 20 * spec.d:
        raise InvalidConfig(f"n_oracle must be at least 20 * d = {20 * spec.d}")
    batch = simulate(spec, Uniform(spec.num_actions), n_oracle, initial_sd, seed, rng_algorithm)
    cfg = FqiConfig(
        mode=config.mode,
        target_policy=target_policy,
        discount=config.discount,
        expected_support=config.expected_support,
        seed=config.seed,
    )
    return fit_unrestricted(batch, cfg)
