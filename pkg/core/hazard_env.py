"""Synthetic rare-event environment with an exact criticality oracle.

The default system is a chain of integrators (position, velocity, ...) held
near the origin by a scripted feedback policy ``u(s) = -policy_gain * s`` and
pushed around by finite-support noise. Event A is the position reaching
``hazard_threshold``. Because the noise support is finite, the probability of
A within ``horizon_h`` steps can be computed exactly by enumeration.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
from pydantic import BaseModel, Field

from .errors import ConfigurationError, EnumerationBudgetError, UsageError
from .seeding import spawn_generators

logger = logging.getLogger(__name__)

# Rejection attempts when an initial draw already sits in the hazard region.
MAX_INITIAL_DRAWS = 100
# Episodes simulated together per vectorized block.
ROLLOUT_BLOCK = 512
# Slack for the oracle's pruning bound against rounding in the transition.
PRUNE_SLACK = 1e-9


class EnvConfig(BaseModel):
    """Parameters of the synthetic environment.

    With the defaults the initial spread is small against the stationary
    spread, so events come from noise excursions during the episode. A
    critical episode then holds at most ``episode_len_max - horizon_h``
    negative transitions for its ``horizon_h`` positive ones.
    """

    state_dim: int = Field(2, ge=1)
    noise_support: list[float] = Field(default_factory=lambda: [-0.06, 0.0, 0.06])
    noise_probs: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.25])
    hazard_threshold: float = 1.0
    horizon_h: int = Field(6, ge=1)
    policy_gain: float = 0.2
    dt: float = 1.0
    episode_len_max: int = Field(300, ge=1)
    rarity_scale: float = Field(1.0, gt=0)
    init_mean: list[float] | None = None
    init_spread: float = Field(0.02, ge=0)
    enumeration_budget: int = Field(10**7, ge=1)
    allow_degenerate_noise: bool = False

    def check(self) -> "EnvConfig":
        """Validate cross-field invariants; raise ConfigurationError."""
        probs = np.asarray(self.noise_probs, dtype=np.float64)
        if len(self.noise_support) != len(self.noise_probs):
            raise ConfigurationError("noise_support and noise_probs differ in length")
        if len(self.noise_support) < 2 and not self.allow_degenerate_noise:
            raise ConfigurationError("noise_support needs at least two values")
        if len(self.noise_support) < 1:
            raise ConfigurationError("noise_support is empty")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"noise_probs must be non-negative and sum to 1, got {self.noise_probs}")
        if self.init_mean is not None and len(self.init_mean) != self.state_dim:
            raise ConfigurationError("init_mean length must equal state_dim")
        return self

    @property
    def scaled_support(self) -> np.ndarray:
        return self.rarity_scale * np.asarray(self.noise_support, dtype=np.float64)

    @property
    def mean_vector(self) -> np.ndarray:
        if self.init_mean is None:
            return np.zeros(self.state_dim)
        return np.asarray(self.init_mean, dtype=np.float64)

    def transition_matrix(self) -> np.ndarray:
        """Closed-loop matrix M with s' = M s + w."""
        d = self.state_dim
        m = (1.0 - self.policy_gain) * np.eye(d)
        for i in range(d - 1):
            m[i, i + 1] = self.dt
        return m


@dataclass
class EnvState:
    """Environment state at step ``t``; ``s[0]`` is the position."""

    s: np.ndarray
    t: int = 0
    terminated: bool = False
    event_occurred: bool = False

    @property
    def position(self) -> float:
        return float(self.s[0])


@dataclass
class Episode:
    """One trajectory: states s_0..s_T and actions a_0..a_{T-1}."""

    episode_id: str
    states: np.ndarray
    actions: np.ndarray
    critical: bool
    metadata: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        """Number of steps T (one less than the number of states)."""
        return len(self.states) - 1

    def validate(self, hazard_threshold: float) -> None:
        positions = self.states[:, 0]
        if len(self.actions) != self.length:
            raise UsageError(f"{self.episode_id}: {len(self.actions)} actions for {self.length} steps")
        if np.any(positions[:-1] >= hazard_threshold):
            raise UsageError(f"{self.episode_id}: event before the final state")
        if self.critical != bool(positions[-1] >= hazard_threshold):
            raise UsageError(f"{self.episode_id}: critical flag disagrees with final state")


@runtime_checkable
class EpisodeSource(Protocol):
    """Anything that produces Episode records can feed the dataset module.

    Sources without an exact oracle set ``oracle_available = False``; oracle
    based evaluation is then skipped.
    """

    oracle_available: bool

    def generate(self, n_episodes: int, seed: int) -> list[Episode]: ...


def policy_action(s: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Scripted stabilizing feedback."""
    return -config.policy_gain * s


def transition(s: np.ndarray, w: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Deterministic part of a step for a given (already scaled) noise vector.

    Elementwise so that batched and single calls round identically.
    """
    s = np.asarray(s, dtype=np.float64)
    nxt = (1.0 - config.policy_gain) * s
    if config.state_dim > 1:
        nxt[..., :-1] = nxt[..., :-1] + config.dt * s[..., 1:]
    return nxt + w


def _initial_state(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    mean = config.mean_vector
    spread = config.rarity_scale * config.init_spread
    for _ in range(MAX_INITIAL_DRAWS):
        s = mean + spread * rng.standard_normal(config.state_dim)
        if s[0] < config.hazard_threshold:
            return s
    raise ConfigurationError("initial distribution keeps landing in the hazard region")


def _draw_noise(config: EnvConfig, rng: np.random.Generator, size) -> np.ndarray:
    idx = rng.choice(len(config.noise_support), size=size, p=np.asarray(config.noise_probs))
    return config.scaled_support[idx]


def reset(config: EnvConfig, seed: int) -> EnvState:
    """Initial state, deterministic given the seed."""
    config.check()
    return EnvState(s=_initial_state(config, np.random.default_rng(seed)))


def step(state: EnvState, config: EnvConfig, rng: np.random.Generator) -> EnvState:
    """Advance one step under the scripted policy and sampled noise."""
    if state.terminated:
        raise UsageError("cannot step a terminated state")
    w = _draw_noise(config, rng, config.state_dim)
    s_next = transition(state.s, w, config)
    event = bool(s_next[0] >= config.hazard_threshold)
    t = state.t + 1
    return EnvState(
        s=s_next,
        t=t,
        terminated=event or t == config.episode_len_max,
        event_occurred=event,
    )


def rollout(config: EnvConfig, rng: np.random.Generator, episode_id: str) -> Episode:
    """Single episode stepped one state at a time."""
    config.check()
    state = EnvState(s=_initial_state(config, rng))
    states = [state.s]
    actions = []
    while not state.terminated:
        actions.append(policy_action(state.s, config))
        state = step(state, config, rng)
        states.append(state.s)
    return Episode(
        episode_id=episode_id,
        states=np.array(states),
        actions=np.array(actions).reshape(-1, config.state_dim),
        critical=state.event_occurred,
    )


def _rollout_block(config: EnvConfig, rngs: list[np.random.Generator], ids: list[str]) -> list[Episode]:
    """Vectorized rollout; consumes each generator exactly as ``rollout`` does."""
    n, d, horizon = len(rngs), config.state_dim, config.episode_len_max
    traj = np.empty((n, horizon + 1, d))
    noise = np.empty((n, horizon, d))
    for i, rng in enumerate(rngs):
        traj[i, 0] = _initial_state(config, rng)
        noise[i] = _draw_noise(config, rng, (horizon, d))

    end = np.full(n, horizon)
    alive = np.ones(n, dtype=bool)
    for t in range(horizon):
        traj[:, t + 1] = transition(traj[:, t], noise[:, t], config)
        hit = alive & (traj[:, t + 1, 0] >= config.hazard_threshold)
        end[hit] = t + 1
        alive &= ~hit
        if not alive.any():
            break

    episodes = []
    for i in range(n):
        states = traj[i, : end[i] + 1].copy()
        episodes.append(
            Episode(
                episode_id=ids[i],
                states=states,
                actions=policy_action(states[:-1], config),
                critical=bool(states[-1, 0] >= config.hazard_threshold),
            )
        )
    return episodes


def generate_episodes(config: EnvConfig, n_episodes: int, seed: int) -> list[Episode]:
    """Seeded, independent episodes; each owns its own RNG stream."""
    config.check()
    if n_episodes < 1:
        raise UsageError("n_episodes must be >= 1")
    rngs = spawn_generators(seed, n_episodes)
    ids = [f"s{seed}-e{i:07d}" for i in range(n_episodes)]
    episodes: list[Episode] = []
    for start in range(0, n_episodes, ROLLOUT_BLOCK):
        stop = start + ROLLOUT_BLOCK
        episodes.extend(_rollout_block(config, rngs[start:stop], ids[start:stop]))
    logger.info(
        "Generated %d episodes (seed=%d), critical fraction %.4g",
        n_episodes, seed, critical_fraction(episodes),
    )
    return episodes


def critical_fraction(episodes: list[Episode]) -> float:
    if not episodes:
        return 0.0
    return sum(e.critical for e in episodes) / len(episodes)


def _joint_noise(config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """All joint noise vectors with their probabilities."""
    support = config.scaled_support
    probs = np.asarray(config.noise_probs, dtype=np.float64)
    combos = list(itertools.product(range(len(support)), repeat=config.state_dim))
    idx = np.array(combos)
    return support[idx], np.prod(probs[idx], axis=1)


def _reach_bounds(config: EnvConfig, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients c_i = e0' M^i and worst-case noise lift n_i for i = 1..horizon."""
    m = config.transition_matrix()
    support = config.scaled_support
    hi, lo = support.max(), support.min()
    coefs = np.empty((horizon + 1, config.state_dim))
    row = np.zeros(config.state_dim)
    row[0] = 1.0
    for i in range(horizon + 1):
        coefs[i] = row
        row = row @ m
    lifts = np.zeros(horizon + 1)
    for i in range(1, horizon + 1):
        # noise at step j enters position through e0' M^(i-1-j)
        c = coefs[:i]
        lifts[i] = np.sum(np.where(c >= 0, c * hi, c * lo))
    return coefs, lifts


def _enumeration_size(config: EnvConfig, horizon: int) -> int:
    return len(config.noise_support) ** (config.state_dim * horizon)


def true_criticality(state: EnvState | np.ndarray, config: EnvConfig, horizon: int | None = None) -> float:
    """Exact P(A within horizon | s) by enumerating every noise sequence.

    Branches whose worst-case position over the remaining steps stays below the
    threshold are dropped; they contribute exactly zero.
    """
    config.check()
    h = config.horizon_h if horizon is None else horizon
    s = np.asarray(state.s if isinstance(state, EnvState) else state, dtype=np.float64)
    if s[0] >= config.hazard_threshold:
        return 1.0
    if h <= 0:
        return 0.0
    size = _enumeration_size(config, h)
    if size > config.enumeration_budget:
        raise EnumerationBudgetError(
            f"exact enumeration needs {size} paths (budget {config.enumeration_budget}); "
            "use monte_carlo_criticality instead"
        )

    noise, noise_p = _joint_noise(config)
    coefs, lifts = _reach_bounds(config, h)
    frontier = s[None, :]
    weight = np.ones(1)
    total = 0.0
    for t in range(h):
        remaining = h - t
        reach = frontier @ coefs[1 : remaining + 1].T + lifts[1 : remaining + 1]
        keep = reach.max(axis=1) >= config.hazard_threshold - PRUNE_SLACK
        frontier, weight = frontier[keep], weight[keep]
        if len(frontier) == 0:
            break
        nxt = transition(frontier[:, None, :], noise[None, :, :], config)
        prob = weight[:, None] * noise_p[None, :]
        hit = nxt[..., 0] >= config.hazard_threshold
        total += float(prob[hit].sum())
        frontier = nxt[~hit]
        weight = prob[~hit]
    return min(1.0, total)


def monte_carlo_criticality(
    state: EnvState | np.ndarray,
    config: EnvConfig,
    n_samples: int = 100_000,
    seed: int = 0,
    horizon: int | None = None,
) -> tuple[float, float]:
    """Monte Carlo estimate of criticality and its binomial standard error."""
    config.check()
    h = config.horizon_h if horizon is None else horizon
    s = np.asarray(state.s if isinstance(state, EnvState) else state, dtype=np.float64)
    if s[0] >= config.hazard_threshold:
        return 1.0, 0.0
    rng = np.random.default_rng(seed)
    paths = np.repeat(s[None, :], n_samples, axis=0)
    hit = np.zeros(n_samples, dtype=bool)
    for _ in range(h):
        paths = transition(paths, _draw_noise(config, rng, paths.shape), config)
        hit |= paths[:, 0] >= config.hazard_threshold
    p = float(hit.mean())
    return p, float(np.sqrt(max(p * (1 - p), 1e-300) / n_samples))


def calibrate_rarity(
    config: EnvConfig,
    target_rate: float = 1e-2,
    n_pilot: int = 2000,
    seed: int = 0,
    rel_tol: float = 0.1,
    max_iter: int = 30,
) -> tuple[EnvConfig, float]:
    """Tune ``rarity_scale`` so the pilot critical-episode rate hits the target.

    The pilot reuses one seed for every candidate scale; with a zero initial
    mean the whole trajectory scales linearly with ``rarity_scale``, so the
    realized rate is monotone in it and bisection applies.
    """
    config.check()

    rates: dict[float, float] = {}

    def rate_at(scale: float) -> float:
        if scale not in rates:
            candidate = config.model_copy(update={"rarity_scale": scale})
            rates[scale] = critical_fraction(generate_episodes(candidate, n_pilot, seed))
        return rates[scale]

    lo = hi = config.rarity_scale
    rate = rate_at(hi)
    while rate < target_rate and hi < 1e6:
        lo, hi = hi, hi * 2.0
        rate = rate_at(hi)
    while rate_at(lo) > target_rate and lo > 1e-6:
        hi, lo = lo, lo / 2.0

    best_scale, best_rate = hi, rate_at(hi)
    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        rate = rate_at(mid)
        if abs(rate - target_rate) < abs(best_rate - target_rate):
            best_scale, best_rate = mid, rate
        if abs(rate - target_rate) <= rel_tol * target_rate:
            break
        if rate < target_rate:
            lo = mid
        else:
            hi = mid
    logger.info("Calibrated rarity_scale=%.6g (pilot rate %.4g, target %.4g)", best_scale, best_rate, target_rate)
    return config.model_copy(update={"rarity_scale": best_scale}), best_rate


class HazardEnv:
    """Built-in EpisodeSource backed by the module functions."""

    oracle_available = True

    def __init__(self, config: EnvConfig):
        self.config = config.check()

    def reset(self, seed: int) -> EnvState:
        return reset(self.config, seed)

    def step(self, state: EnvState, rng: np.random.Generator) -> EnvState:
        return step(state, self.config, rng)

    def generate(self, n_episodes: int, seed: int) -> list[Episode]:
        return generate_episodes(self.config, n_episodes, seed)

    def criticality(self, state: EnvState | np.ndarray) -> float:
        return true_criticality(state, self.config)
