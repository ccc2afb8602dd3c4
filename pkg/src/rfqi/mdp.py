"""Block-structured linear MDPs, behavior/target policies and trajectory simulation.

Timesteps are 0-based in code: ``t = 0`` is the first decision stage.
Coordinates ``0..support_size-1`` are the reward-relevant block; the
transition block mapping exogenous coordinates into that block is zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

import numpy as np

from .errors import InvalidConfig
from .regression import SupportSet
from .rng import DEFAULT_ALGORITHM, make_rng

if TYPE_CHECKING:
    from .fqi import LinearQ


@dataclass(frozen=True, eq=False)
class MdpSpec:
    d: int
    support: SupportSet
    num_actions: int
    transition: np.ndarray  # (num_actions, d, d)
    reward_coef: np.ndarray  # (num_actions, d)
    state_noise_sd: float
    reward_noise_sd: float
    horizon: int
    discount: float
    spectral_cap: float
    beta_min_floor: float

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "support": list(self.support.indices),
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "discount": self.discount,
            "state_noise_sd": self.state_noise_sd,
            "reward_noise_sd": self.reward_noise_sd,
            "spectral_cap": self.spectral_cap,
            "beta_min_floor": self.beta_min_floor,
            "reward_coef": self.reward_coef.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MdpSpec":
        d = int(data["d"])
        return cls(
            d=d,
            support=SupportSet(tuple(data["support"]), d),
            num_actions=int(data["num_actions"]),
            transition=np.asarray(data["transition"], dtype=np.float64),
            reward_coef=np.asarray(data["reward_coef"], dtype=np.float64),
            state_noise_sd=float(data["state_noise_sd"]),
            reward_noise_sd=float(data["reward_noise_sd"]),
            horizon=int(data["horizon"]),
            discount=float(data["discount"]),
            spectral_cap=float(data["spectral_cap"]),
            beta_min_floor=float(data["beta_min_floor"]),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_noise(self, state_noise_sd: float, reward_noise_sd: float) -> "MdpSpec":
        return MdpSpec(**{**self.__dict__, "state_noise_sd": state_noise_sd, "reward_noise_sd": reward_noise_sd})

    def check_invariants(self) -> None:
        rho = self.support.mask()
        if self.transition.shape != (self.num_actions, self.d, self.d):
            raise InvalidConfig("transition has the wrong shape")
        if self.reward_coef.shape != (self.num_actions, self.d):
            raise InvalidConfig("reward_coef has the wrong shape")
        if np.any(self.transition[:, rho][:, :, ~rho] != 0.0):
            raise InvalidConfig("exogenous-to-relevant transition block is not exactly zero")
        if np.any(self.reward_coef[:, ~rho] != 0.0):
            raise InvalidConfig("reward depends on exogenous coordinates")
        if len(self.support) and np.min(np.abs(self.reward_coef[:, rho])) < self.beta_min_floor:
            raise InvalidConfig("reward coefficients violate the beta-min floor")
        for a in range(self.num_actions):
            if np.linalg.norm(self.transition[a], 2) > self.spectral_cap + 1e-9:
                raise InvalidConfig(f"spectral norm of transition {a} exceeds the cap")


# -- policies ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Logistic:
    """Binary: ``coef`` has shape (d,) and P(a=1|s) = sigmoid(coef . s).
    Multi-action: ``coef`` has shape (num_actions, d) and probabilities are a softmax."""

    coef: np.ndarray

    @property
    def num_actions(self) -> int:
        c = np.asarray(self.coef)
        return 2 if c.ndim == 1 else c.shape[0]


@dataclass(frozen=True, eq=False)
class Greedy:
    q: "LinearQ"
    t: int = 0

    @property
    def num_actions(self) -> int:
        return self.q.num_actions

    def at(self, t: int) -> "Greedy":
        return Greedy(self.q, t)


@dataclass(frozen=True)
class Uniform:
    num_actions: int = 2


Policy = Union[Logistic, Greedy, Uniform]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def policy_probs(policy: Policy, state, t: int | None = None) -> np.ndarray:
    """Action probabilities for one state (d,) or a batch of states (n, d).

    ``t`` selects the stage of a Greedy policy; it defaults to the policy's own ``t``.
    """
    s = np.asarray(state, dtype=np.float64)
    single = s.ndim == 1
    S = s[None, :] if single else s
    if isinstance(policy, Uniform):
        probs = np.full((S.shape[0], policy.num_actions), 1.0 / policy.num_actions)
    elif isinstance(policy, Logistic):
        c = np.asarray(policy.coef, dtype=np.float64)
        if c.ndim == 1:
            p1 = _sigmoid(S @ c)
            probs = np.column_stack([1.0 - p1, p1])
        else:
            z = S @ c.T
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=1, keepdims=True)
    elif isinstance(policy, Greedy):
        stage = policy.t if t is None else t
        values = policy.q.values(S, stage)
        probs = np.zeros_like(values)
        probs[np.arange(S.shape[0]), np.argmax(values, axis=1)] = 1.0
    else:
        raise TypeError(f"unsupported policy {policy!r}")
    return probs[0] if single else probs


def sample_actions(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; ``probs`` (n, A), ``uniforms`` (n,)."""
    cdf = np.cumsum(probs, axis=1)
    a = (uniforms[:, None] >= cdf).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)


# -- generation -------------------------------------------------------------


def generate_mdp(
    d: int,
    support_size: int,
    num_actions: int = 2,
    horizon: int = 5,
    discount: float = 0.9,
    noise: tuple[float, float] = (0.4, 0.6),
    beta_min_floor: float = 0.5,
    spectral_cap: float = 0.9,
    seed: int = 0,
    rng_algorithm: str = DEFAULT_ALGORITHM,
) -> MdpSpec:
    state_sd, reward_sd = noise
    if d < 1 or not (0 <= support_size <= d):
        raise InvalidConfig("need d >= 1 and 0 <= support_size <= d")
    if num_actions < 2:
        raise InvalidConfig("need at least two actions")
    if horizon < 1:
        raise InvalidConfig("horizon must be at least 1")
    if not (0 < discount <= 1):
        raise InvalidConfig("discount must lie in (0, 1]")
    if state_sd < 0 or reward_sd < 0:
        raise InvalidConfig("noise scales must be non-negative")
    if beta_min_floor <= 0 or spectral_cap <= 0:
        raise InvalidConfig("beta_min_floor and spectral_cap must be positive")

    rng = make_rng(seed, algorithm=rng_algorithm)
    rho = np.zeros(d, dtype=bool)
    rho[:support_size] = True
    transition = rng.normal(0.2, 1.0, size=(num_actions, d, d))
    # rows are next-state coordinates, columns current-state coordinates
    transition[:, :support_size, support_size:] = 0.0
    if np.isfinite(spectral_cap):
        for a in range(num_actions):
            norm = np.linalg.norm(transition[a], 2)
            transition[a] *= spectral_cap / max(spectral_cap, norm)
    magnitude = rng.uniform(beta_min_floor, 3.0 * beta_min_floor, size=(num_actions, support_size))
    sign = np.where(rng.random((num_actions, support_size)) < 0.5, -1.0, 1.0)
    reward_coef = np.zeros((num_actions, d))
    reward_coef[:, :support_size] = sign * magnitude

    spec = MdpSpec(
        d=d,
        support=SupportSet(tuple(range(support_size)), d),
        num_actions=num_actions,
        transition=transition,
        reward_coef=reward_coef,
        state_noise_sd=float(state_sd),
        reward_noise_sd=float(reward_sd),
        horizon=int(horizon),
        discount=float(discount),
        spectral_cap=float(spectral_cap),
        beta_min_floor=float(beta_min_floor),
    )
    spec.check_invariants()
    return spec


def random_logistic_policy(d: int, seed: int, rng_algorithm: str = DEFAULT_ALGORITHM) -> Logistic:
    """Binary logistic policy with coefficients Uniform[-0.5, 0.5]."""
    return Logistic(make_rng(seed, algorithm=rng_algorithm).uniform(-0.5, 0.5, size=d))


# -- dynamics ---------------------------------------------------------------


def step(spec: MdpSpec, state, action: int, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """One transition. Draws d + 1 standard normals: reward noise first, then state noise."""
    s = np.asarray(state, dtype=np.float64)
    if s.shape != (spec.d,):
        raise ValueError(f"state must have length {spec.d}")
    if not 0 <= action < spec.num_actions:
        raise ValueError(f"action must lie in [0, {spec.num_actions})")
    z = rng.standard_normal(spec.d + 1)
    reward = float(spec.reward_coef[action] @ s) + spec.reward_noise_sd * z[0]
    next_state = spec.transition[action] @ s + spec.state_noise_sd * z[1:]
    return reward, next_state


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """``path[i, t]`` is the state at stage t of trajectory i (t = 0..T), so the
    next state of stage t is the state of stage t + 1 by construction."""

    path: np.ndarray  # (n, T + 1, d)
    actions: np.ndarray  # (n, T) int
    rewards: np.ndarray  # (n, T)
    num_actions: int
    seed: int
    spec_fingerprint: str

    def __post_init__(self):
        n, T1, _ = self.path.shape
        if self.actions.shape != (n, T1 - 1) or self.rewards.shape != (n, T1 - 1):
            raise ValueError("actions/rewards do not match the state path")
        if not (np.all(np.isfinite(self.path)) and np.all(np.isfinite(self.rewards))):
            raise ValueError("trajectory batch contains non-finite values")

    @property
    def n(self) -> int:
        return self.path.shape[0]

    @property
    def horizon(self) -> int:
        return self.path.shape[1] - 1

    @property
    def d(self) -> int:
        return self.path.shape[2]

    def states(self, t: int) -> np.ndarray:
        return self.path[:, t]

    def next_states(self, t: int) -> np.ndarray:
        return self.path[:, t + 1]

    def trajectory(self, i: int) -> list[Transition]:
        return [
            Transition(self.path[i, t], int(self.actions[i, t]), float(self.rewards[i, t]), self.path[i, t + 1])
            for t in range(self.horizon)
        ]


def _trajectory_draws(seed: int, n: int, d: int, T: int, rng_algorithm: str):
    normals = np.empty((n, d + T * (d + 1)))
    uniforms = np.empty((n, T))
    for i in range(n):
        rng = make_rng(seed, i, algorithm=rng_algorithm)
        normals[i] = rng.standard_normal(normals.shape[1])
        uniforms[i] = rng.random(T)
    return normals, uniforms


def simulate(
    spec: MdpSpec,
    behavior: Policy,
    n: int,
    initial_sd: float = 1.0,
    seed: int = 0,
    rng_algorithm: str = DEFAULT_ALGORITHM,
) -> TrajectoryBatch:
    """``n`` independent trajectories of length ``spec.horizon``.

    Trajectory i reads only its own stream ``make_rng(seed, i)``: d normals for
    the initial state, then per stage one reward-noise and d state-noise normals,
    then T uniforms for action sampling. The dynamics are then rolled out for
    all trajectories at once.
    """
    if n < 1:
        raise InvalidConfig("n must be at least 1")
    d, T, A = spec.d, spec.horizon, spec.num_actions
    if behavior.num_actions != A:
        raise InvalidConfig("behavior policy and MDP disagree on the number of actions")
    normals, uniforms = _trajectory_draws(seed, n, d, T, rng_algorithm)
    path = np.empty((n, T + 1, d))
    actions = np.empty((n, T), dtype=np.int64)
    rewards = np.empty((n, T))
    path[:, 0] = initial_sd * normals[:, :d]
    for t in range(T):
        s = path[:, t]
        block = normals[:, d + t * (d + 1) : d + (t + 1) * (d + 1)]
        a = sample_actions(policy_probs(behavior, s, t), uniforms[:, t])
        actions[:, t] = a
        rewards[:, t] = np.einsum("ij,ij->i", spec.reward_coef[a], s) + spec.reward_noise_sd * block[:, 0]
        nxt = np.empty((n, d))
        for act in range(A):
            m = a == act
            # einsum rather than BLAS matmul: row results must not depend on
            # how many rows are multiplied together
            nxt[m] = np.einsum("ij,nj->ni", spec.transition[act], s[m])
        path[:, t + 1] = nxt + spec.state_noise_sd * block[:, 1:]
    return TrajectoryBatch(path, actions, rewards, A, int(seed), spec.fingerprint())


def features(state, action: int, num_actions: int, d: int) -> np.ndarray:
    """Action-product feature map: block ``action`` holds the state, others are zero."""
    s = np.asarray(state, dtype=np.float64)
    if s.shape != (d,):
        raise ValueError(f"state must have length {d}")
    if not 0 <= action < num_actions:
        raise ValueError(f"action must lie in [0, {num_actions})")
    phi = np.zeros(d * num_actions)
    phi[action * d : (action + 1) * d] = s
    return phi
