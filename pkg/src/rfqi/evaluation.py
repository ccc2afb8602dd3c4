"""Accuracy metrics and structural diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyTruth
from .fqi import LinearQ
from .mdp import MdpSpec
from .regression import SupportSet
from .rng import make_rng

REWARD_FILTERED = "RewardFiltered"
NAIVE_THRESHOLDED = "NaiveThresholded"
METHODS = (REWARD_FILTERED, NAIVE_THRESHOLDED)


@dataclass
class MetricsRecord:
    method: str
    n: int
    replication: int
    q_mse: float
    tpr: float
    fpr: float
    fp_count: int
    wall_time_ms: float = 0.0
    error: str = ""


@dataclass(frozen=True)
class ReDiagnostic:
    subset_size: int
    num_sampled: int
    min_restricted_eig: float
    max_restricted_eig: float


def q_mse(estimate: LinearQ, oracle: LinearQ, eval_states: np.ndarray, t: int = 0) -> float:
    """Mean over states and actions of (q_hat_t(s, a) - q_oracle_t(s, a))^2."""
    S = np.atleast_2d(np.asarray(eval_states, dtype=np.float64))
    if S.shape[0] == 0:
        raise ValueError("eval_states is empty")
    diff = estimate.values(S, t) - oracle.values(S, t)
    return float(np.mean(diff * diff))


def support_metrics(estimated: SupportSet, truth: SupportSet, d: int) -> tuple[float, float]:
    """(true positive rate, false positive rate) of ``estimated`` against ``truth``."""
    tp, fp = _counts(estimated, truth, d)
    negatives = d - len(truth)
    return tp / len(truth), (fp / negatives if negatives else 0.0)


def false_positive_count(estimated: SupportSet, truth: SupportSet, d: int) -> int:
    return _counts(estimated, truth, d)[1]


def _counts(estimated: SupportSet, truth: SupportSet, d: int) -> tuple[int, int]:
    if len(truth) == 0:
        raise EmptyTruth("true support is empty; TPR is undefined")
    est = set(estimated.indices)
    if any(not 0 <= j < d for j in est | set(truth.indices)):
        raise ValueError(f"support indices must lie in [0, {d})")
    tp = len(est & set(truth.indices))
    return tp, len(est) - tp


def re_diagnostic(
    design: np.ndarray,
    subset_size: int,
    num_sampled: int,
    seed: int = 0,
    include: SupportSet | None = None,
) -> ReDiagnostic:
    """Sampled proxy for the restricted eigenvalues of X^T X / n.

    Draws ``num_sampled`` coordinate subsets uniformly (without replacement
    within a subset) from one stream, so a larger ``num_sampled`` with the same
    seed extends the earlier draws. ``include``, when given, is evaluated too.
    """
    X = np.asarray(design, dtype=np.float64)
    n, d = X.shape
    if not 1 <= subset_size <= min(n, d):
        raise ValueError("subset_size must lie in [1, min(n, d)]")
    gram = X.T @ X / n
    rng = make_rng(seed)
    subsets = [rng.choice(d, size=subset_size, replace=False) for _ in range(num_sampled)]
    if include is not None and len(include):
        subsets.append(np.asarray(include.indices))
    lo, hi = np.inf, 0.0
    for idx in subsets:
        eig = np.linalg.eigvalsh(gram[np.ix_(idx, idx)])
        lo = min(lo, eig[0])
        hi = max(hi, eig[-1])
    # roundoff can push a singular block slightly negative
    lo = max(float(lo), 0.0)
    return ReDiagnostic(subset_size, len(subsets), lo, max(float(hi), lo))


def beta_min_margin(spec: MdpSpec, penalty: float, sigma: float) -> float:
    """min |reward coefficient| over actions and support coordinates, minus penalty * sigma."""
    idx = list(spec.support.indices)
    if not idx:
        return -penalty * sigma
    return float(np.min(np.abs(spec.reward_coef[:, idx]))) - penalty * sigma
