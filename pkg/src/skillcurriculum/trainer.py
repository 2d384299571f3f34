"""PPO with value warm-up, plus behavioral cloning.

``train`` is the RL routine used everywhere a skill is learned or transferred:
it fits a fresh critic to Monte Carlo returns of the incoming policy before
touching the policy, then runs PPO iterations until the success threshold,
the step budget, or the stop rule ends it.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .envs import rollout_batch
from .policy import StochasticPolicy, ValueFunction, as_tensor

log = logging.getLogger(__name__)

SOLVED = "solved"
BUDGET_EXHAUSTED = "budget_exhausted"
REJECTED = "rejected"


class TrainingAborted(RuntimeError):
    """A loss went non-finite; the iteration was abandoned."""


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    steps_per_iteration: int = 2048
    epochs: int = 10
    minibatch_size: int = 256
    budget: int = 200_000
    success_threshold: float = 0.9
    max_grad_norm: float = 0.5
    entropy_coef: float = 0.0
    warmup_multiplier: int = 4
    warmup_max_passes: int = 500
    warmup_tol: float = 1e-4
    warmup_patience: int = 5
    warmup_lr: float = 1e-3
    warmup_minibatch: int = 1024

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.lr <= 0 or self.warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps_per_iteration < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("steps_per_iteration, epochs and minibatch_size must be >= 1")
        if self.budget < self.steps_per_iteration:
            raise ValueError("budget must cover at least one iteration")
        if not 0 <= self.success_threshold <= 1:
            raise ValueError("success_threshold must lie in [0, 1]")
        if self.warmup_patience < 1 or self.warmup_max_passes < 0 or self.warmup_multiplier < 1:
            raise ValueError("warmup_patience and warmup_multiplier must be >= 1, warmup_max_passes >= 0")

    def episodes_per_iteration(self, horizon: int) -> int:
        return max(1, math.ceil(self.steps_per_iteration / max(horizon, 1)))


@dataclass(frozen=True)
class CurvePoint:
    steps: int
    mean_return: float
    success_rate: float


@dataclass
class TrainCurve:
    points: list[CurvePoint] = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def append(self, steps: int, mean_return: float, success_rate: float):
        if self.points and steps <= self.points[-1].steps:
            raise ValueError("curve steps must be strictly increasing")
        if not 0 <= success_rate <= 1:
            raise ValueError("success rate must lie in [0, 1]")
        self.points.append(CurvePoint(int(steps), float(mean_return), float(success_rate)))

    def return_at(self, steps: int) -> float:
        """Mean return of the latest record at or before ``steps`` (first record if none)."""
        if not self.points:
            raise ValueError("empty curve")
        value = self.points[0].mean_return
        for p in self.points:
            if p.steps > steps:
                break
            value = p.mean_return
        return value

    def steps_to(self, threshold: float) -> Optional[int]:
        """Steps at the first record whose success rate reaches ``threshold``."""
        for p in self.points:
            if p.success_rate >= threshold:
                return p.steps
        return None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(p)) + "\n" for p in self.points)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainCurve":
        curve = cls()
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                curve.append(d["steps"], d["mean_return"], d["success_rate"])
        return curve

    def save(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrainCurve":
        return cls.from_jsonl(Path(path).read_text())


@dataclass(frozen=True)
class Outcome:
    status: str
    steps: int

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


@dataclass
class TrainResult:
    policy: StochasticPolicy
    curve: TrainCurve
    outcome: Outcome
    value_fn: ValueFunction
    warmup_steps: int


# -- advantage estimation -------------------------------------------------

def gae(rewards, values, last_value, gamma: float, lam: float):
    """Generalized advantage estimation over the last axis.

    ``values[..., t]`` is V(s_t); ``last_value`` bootstraps the state after the
    final reward (pass 0 for a terminal end). Returns ``(advantages, targets)``
    with ``targets = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    last_value = np.asarray(last_value, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError(f"rewards {rewards.shape} and values {values.shape} differ in shape")
    if last_value.shape != rewards.shape[:-1]:
        raise ValueError(f"last_value shape {last_value.shape} != {rewards.shape[:-1]}")
    adv = np.zeros_like(rewards)
    next_value, running = last_value, np.zeros_like(last_value)
    for t in range(rewards.shape[-1] - 1, -1, -1):
        delta = rewards[..., t] + gamma * next_value - values[..., t]
        running = delta + gamma * lam * running
        adv[..., t] = running
        next_value = values[..., t]
    return adv, adv + values


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Monte Carlo returns to episode end, no bootstrap."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        running = rewards[..., t] + gamma * running
        out[..., t] = running
    return out


# -- PPO ------------------------------------------------------------------

def surrogate_loss(policy: StochasticPolicy, obs, actions, old_log_probs, advantages, clip: float):
    """Negative clipped surrogate objective, averaged over the batch."""
    ratio = torch.exp(policy.log_prob(obs, actions) - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1 - clip, 1 + clip) * advantages
    return -torch.min(unclipped, clipped).mean(), ratio


class Optimizers:
    """Adam state carried across PPO iterations of one training run."""

    def __init__(self, policy: StochasticPolicy, value_fn: ValueFunction, config: PpoConfig):
        params = policy.trainable_parameters()
        self.policy = torch.optim.Adam(params, lr=config.lr) if params else None
        self.value = torch.optim.Adam(value_fn.parameters(), lr=config.lr)


def _flat(batch):
    obs = batch.states[:, :-1].reshape(-1, batch.states.shape[-1])
    actions = batch.actions.reshape(-1, batch.actions.shape[-1])
    return as_tensor(obs), as_tensor(actions)


def ppo_update(policy: StochasticPolicy, value_fn: ValueFunction, batch, config: PpoConfig,
               rng: np.random.Generator, optimizers: Optional[Optimizers] = None) -> tuple:
    """One PPO iteration on ``batch`` (collected by the current ``policy``).

    Updates ``policy`` and ``value_fn`` in place and returns them with a stats dict.
    """
    optimizers = optimizers or Optimizers(policy, value_fn, config)
    values = value_fn.predict(batch.states)
    adv, targets = gae(batch.rewards, values[:, :-1], values[:, -1], config.gamma, config.lam)
    obs, actions = _flat(batch)
    adv = adv.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv_t, targets_t = as_tensor(adv), as_tensor(targets.reshape(-1))
    with torch.no_grad():
        old_logp = policy.log_prob(obs, actions)

    n = len(adv)
    stats = {"policy_loss": [], "value_loss": [], "clip_frac": [], "approx_kl": []}
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = torch.as_tensor(perm[start:start + config.minibatch_size])
            pol_loss, ratio = surrogate_loss(policy, obs[idx], actions[idx], old_logp[idx], adv_t[idx], config.clip)
            if config.entropy_coef:
                pol_loss = pol_loss - config.entropy_coef * policy.entropy(obs[idx]).mean()
            v_loss = ((value_fn(obs[idx]) - targets_t[idx]) ** 2).mean()
            if not (torch.isfinite(pol_loss) and torch.isfinite(v_loss)):
                raise TrainingAborted(f"non-finite loss (policy={pol_loss.item()}, value={v_loss.item()})")
            if optimizers.policy is not None:
                optimizers.policy.zero_grad()
                pol_loss.backward()
                torch.nn.utils.clip_grad_norm_(policy.trainable_parameters(), config.max_grad_norm)
                optimizers.policy.step()
            optimizers.value.zero_grad()
            v_loss.backward()
            torch.nn.utils.clip_grad_norm_(value_fn.parameters(), config.max_grad_norm)
            optimizers.value.step()
            with torch.no_grad():
                stats["policy_loss"].append(pol_loss.item())
                stats["value_loss"].append(v_loss.item())
                stats["clip_frac"].append(((ratio - 1).abs() > config.clip).double().mean().item())
                stats["approx_kl"].append((ratio - 1 - torch.log(ratio)).mean().item())
    return policy, value_fn, {k: float(np.mean(v)) for k, v in stats.items()}


# -- value warm-up ---------------------------------------------------------

def fit_value_function(states, targets, config: PpoConfig, rng: np.random.Generator,
                       validation=None) -> tuple[ValueFunction, int]:
    """Fit a fresh critic to ``targets`` until the held-out MSE stops improving.

    Convergence: the best ``validation=(states, targets)`` MSE has not improved
    by a relative ``warmup_tol`` for ``warmup_patience`` passes (or
    ``warmup_max_passes`` were run); the best parameters are kept. Without a
    validation set the training MSE is used. Inputs and outputs are
    standardized with the training data's statistics (constant input dims are
    left unscaled). Returns ``(value_fn, passes)``.
    """
    vf = ValueFunction(rng)
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    vf.shift.fill_(float(targets.mean()))
    vf.scale.fill_(float(max(targets.std(), 1e-6)))
    std = states.std(axis=0)
    vf.obs_mean.copy_(as_tensor(states.mean(axis=0)))
    vf.obs_std.copy_(as_tensor(np.where(std > 1e-6, std, 1.0)))
    obs, y = as_tensor(states), as_tensor(targets)
    val_obs, val_y = (obs, y) if validation is None else (as_tensor(validation[0]), as_tensor(validation[1]))
    opt = torch.optim.Adam(vf.parameters(), lr=config.warmup_lr)
    n = len(y)

    def val_mse():
        with torch.no_grad():
            return ((vf(val_obs) - val_y) ** 2).mean().item()

    best, best_state, stale = val_mse(), copy.deepcopy(vf.state_dict()), 0
    passes = 0
    while passes < config.warmup_max_passes and best > 0:
        perm = rng.permutation(n)
        for start in range(0, n, config.warmup_minibatch):
            idx = torch.as_tensor(perm[start:start + config.warmup_minibatch])
            loss = ((vf(obs[idx]) - y[idx]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        passes += 1
        mse = val_mse()
        if mse < best:
            improved = mse < best * (1 - config.warmup_tol)
            best, best_state = mse, copy.deepcopy(vf.state_dict())
            stale = 0 if improved else stale + 1
        else:
            stale += 1
        if stale >= config.warmup_patience:
            break
    vf.load_state_dict(best_state)
    return vf, passes


def value_warmup(task, policy: StochasticPolicy, config: PpoConfig, rng: np.random.Generator):
    """Fit a fresh critic to Monte Carlo returns of ``policy`` on ``task``.

    The policy is only sampled, never updated. One episode in eight is held
    out to decide convergence. Returns ``(value_fn, env_steps)``.
    """
    n = config.warmup_multiplier * config.episodes_per_iteration(task.horizon)
    batch = rollout_batch(task, policy, n, rng)
    returns = discounted_returns(batch.rewards, config.gamma)
    dim = batch.states.shape[-1]
    states = batch.states[:, :-1]
    n_val = n // 8 if n >= 8 else 0
    train_s, train_y = states[n_val:].reshape(-1, dim), returns[n_val:].reshape(-1)
    validation = (states[:n_val].reshape(-1, dim), returns[:n_val].reshape(-1)) if n_val else None
    vf, _ = fit_value_function(train_s, train_y, config, rng, validation)
    return vf, batch.n_steps


# -- training loop ---------------------------------------------------------

StopRule = Callable[[TrainCurve], bool]


def train(task, initial_policy: StochasticPolicy, config: PpoConfig, rng: np.random.Generator,
          stop_rule: Optional[StopRule] = None, warmup: bool = True) -> TrainResult:
    """Fine-tune a clone of ``initial_policy`` on ``task``.

    Each iteration collects a batch of full episodes, records its mean return
    and success rate, and stops as solved once the success rate reaches the
    threshold; the step count then includes that iteration. Otherwise PPO
    updates the policy and ``stop_rule(curve)`` may reject the run.
    ``warmup=False`` skips the critic warm-up (fresh untrained critic), for
    ablations only.
    """
    policy = initial_policy.clone()
    if warmup:
        value_fn, warmup_steps = value_warmup(task, policy, config, rng)
    else:
        value_fn, warmup_steps = ValueFunction(rng), 0
    optimizers = Optimizers(policy, value_fn, config)
    curve = TrainCurve()
    n_episodes = config.episodes_per_iteration(task.horizon)
    steps = 0
    while True:
        batch = rollout_batch(task, policy, n_episodes, rng)
        steps += batch.n_steps
        success = float(batch.episode_success.mean())
        curve.append(steps, float(batch.episode_returns.mean()), success)
        if success >= config.success_threshold:
            outcome = Outcome(SOLVED, steps)
            break
        ppo_update(policy, value_fn, batch, config, rng, optimizers)
        if stop_rule is not None and stop_rule(curve):
            outcome = Outcome(REJECTED, steps)
            break
        if steps + batch.n_steps > config.budget:
            outcome = Outcome(BUDGET_EXHAUSTED, steps)
            break
    log.debug("%s: %s after %d steps", getattr(task, "name", task), outcome.status, steps)
    return TrainResult(policy, curve, outcome, value_fn, warmup_steps)


# -- behavioral cloning ----------------------------------------------------

@dataclass(frozen=True)
class BCConfig:
    epochs: int = 100
    lr: float = 1e-3
    minibatch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.minibatch_size < 1:
            raise ValueError("invalid BC config")


@dataclass
class BCResult:
    losses: list[float]
    stopped_early: bool


def fit_nll(params, terms, config: BCConfig, rng: np.random.Generator) -> BCResult:
    """Minimize summed Gaussian NLL over several (log_prob_fn, states, actions) datasets.

    Every optimizer step takes one minibatch from each dataset. After each epoch
    the full-data loss is recomputed; if it rises, the parameters from the
    previous epoch are restored and fitting stops.
    """
    if not terms or any(len(s) == 0 for _, s, _ in terms):
        raise ValueError("empty dataset")
    data = [(fn, as_tensor(s), as_tensor(a)) for fn, s, a in terms]
    opt = torch.optim.Adam(params, lr=config.lr)
    n_max = max(len(s) for _, s, _ in data)

    def full_loss():
        with torch.no_grad():
            return sum(-fn(s, a).mean().item() for fn, s, a in data)

    losses = [full_loss()]
    for _ in range(config.epochs):
        snapshot = [p.detach().clone() for p in params]
        perms = [rng.permutation(len(s)) for _, s, _ in data]
        for start in range(0, n_max, config.minibatch_size):
            loss = 0.0
            for (fn, s, a), perm in zip(data, perms):
                idx = torch.as_tensor(perm[start % len(perm):][:config.minibatch_size])
                loss = loss - fn(s[idx], a[idx]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        current = full_loss()
        if not math.isfinite(current) or current > losses[-1]:
            with torch.no_grad():
                for p, old in zip(params, snapshot):
                    p.copy_(old)
            log.info("BC stopped after %d epochs: loss %.6g -> %.6g", len(losses) - 1, losses[-1], current)
            return BCResult(losses, True)
        losses.append(current)
    return BCResult(losses, False)


def behavioral_clone(states, actions, model: StochasticPolicy, config: BCConfig,
                     rng: np.random.Generator) -> tuple[StochasticPolicy, BCResult]:
    """Fit ``model`` (in place) to (state, action) pairs by maximum likelihood."""
    if len(states) == 0:
        raise ValueError("empty dataset")
    result = fit_nll(model.trainable_parameters(), [(model.log_prob, states, actions)], config, rng)
    return model, result
