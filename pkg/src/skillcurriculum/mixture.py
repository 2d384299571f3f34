"""Product-of-experts skill mixing: joint pre-training and frozen-expert adaptation.

A ``MixturePolicySet`` holds ``k`` shared Gaussian experts and one softmax
mixer per task. Pre-training distills single-task skills into the set by
maximizing the likelihood of their actions under the composed policy, so
gradients reach the shared experts through every task's mixer. Adaptation
freezes the existing experts, optionally appends fresh ones, and trains a
new mixer with PPO.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .envs import rollout_batch
from .policy import GaussianPolicy, MixerFunction, MixturePolicy, checkpoint_bytes, from_checkpoint
from .trainer import BCConfig, BCResult, PpoConfig, StopRule, TrainResult, fit_nll, train


class MixtureError(ValueError):
    pass


@dataclass
class MixturePolicySet:
    experts: list[GaussianPolicy]
    mixers: dict[str, MixerFunction] = field(default_factory=dict)

    def __post_init__(self):
        if not self.experts:
            raise MixtureError("a mixture needs at least one expert")
        for task, m in self.mixers.items():
            if m.k != self.k:
                raise MixtureError(f"mixer for {task!r} has arity {m.k}, expected {self.k}")

    @property
    def k(self) -> int:
        return len(self.experts)

    @property
    def tasks(self) -> list[str]:
        return sorted(self.mixers)

    def policy(self, task: str) -> MixturePolicy:
        """Composed policy for ``task`` (shares modules with the set)."""
        if task not in self.mixers:
            raise KeyError(f"no mixer for {task!r}")
        return MixturePolicy(self.experts, self.mixers[task])

    def frozen_flags(self) -> list[bool]:
        return [e.frozen for e in self.experts]

    # -- checkpoints -------------------------------------------------------
    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"format_version": 1, "k": self.k, "experts": [], "mixers": {}}
        for i, e in enumerate(self.experts):
            data = checkpoint_bytes(e)
            name = f"expert_{i:02d}.json"
            (out / name).write_bytes(data)
            manifest["experts"].append({"file": name, "frozen": e.frozen,
                                        "sha256": hashlib.sha256(data).hexdigest()})
        for task, m in sorted(self.mixers.items()):
            name = f"mixer_{task}.json"
            (out / name).write_bytes(checkpoint_bytes(m))
            manifest["mixers"][task] = name
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MixturePolicySet":
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text())
        experts = []
        for meta in manifest["experts"]:
            data = (src / meta["file"]).read_bytes()
            if hashlib.sha256(data).hexdigest() != meta["sha256"]:
                raise MixtureError(f"{meta['file']} does not match its manifest hash")
            expert = from_checkpoint(json.loads(data))
            expert.set_frozen(meta["frozen"])
            experts.append(expert)
        mixers = {t: from_checkpoint(json.loads((src / f).read_text())) for t, f in manifest["mixers"].items()}
        return cls(experts, mixers)


def select_pretrain_tasks(scratch_costs: Mapping[str, int], m: int) -> list[str]:
    """The ``m`` tasks with the largest from-scratch cost, ties broken by task id."""
    if not 1 <= m < len(scratch_costs):
        raise MixtureError(f"m must lie in [1, {len(scratch_costs) - 1}] so some task is left to adapt to")
    return sorted(scratch_costs, key=lambda t: (-scratch_costs[t], t))[:m]


@dataclass(frozen=True)
class PretrainConfig:
    tasks: tuple[str, ...]
    k: Optional[int] = None
    dataset_size: int = 20_000
    bc: BCConfig = field(default_factory=BCConfig)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(sorted(self.tasks)))
        if not self.tasks:
            raise MixtureError("pre-training needs at least one task")
        if self.k is not None and self.k < 1:
            raise MixtureError("k must be >= 1")
        if self.dataset_size < 1:
            raise MixtureError("dataset_size must be >= 1")

    @property
    def n_experts(self) -> int:
        return len(self.tasks) if self.k is None else self.k


def collect_datasets(experts: Mapping[str, GaussianPolicy], task_space: Mapping, tasks, size: int,
                     rng: np.random.Generator) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Roll out each task's expert (stochastic actions) for ``size`` state-action pairs.

    Sampled actions are kept as labels: the experts' mean actions alone do not
    solve the press tasks, so the noise is part of the skill.
    """
    missing = [t for t in tasks if t not in experts]
    if missing:
        raise MixtureError(f"no trained expert for pre-training task(s) {missing}")
    data = {}
    for t in sorted(tasks):
        task = task_space[t]
        batch = rollout_batch(task, experts[t], math.ceil(size / max(task.horizon, 1)), rng)
        states = batch.states[:, :-1].reshape(-1, batch.states.shape[-1])[:size]
        actions = batch.actions.reshape(-1, batch.actions.shape[-1])[:size]
        data[t] = (states, actions)
    return data


def fit_mixture(datasets: Mapping[str, tuple[np.ndarray, np.ndarray]], k: int, bc: BCConfig,
                rng: np.random.Generator) -> tuple[MixturePolicySet, BCResult]:
    """Jointly fit ``k`` shared experts and one mixer per dataset by summed NLL.

    Experts are drawn from ``rng``; mixers from a child generator, so with
    ``k=1`` and one dataset this follows the same trajectory as plain
    behavioral cloning of a single policy.
    """
    experts = [GaussianPolicy(rng) for _ in range(k)]
    mixer_rng = rng.spawn(1)[0]
    mixers = {t: MixerFunction(mixer_rng, k) for t in sorted(datasets)}
    pset = MixturePolicySet(experts, mixers)
    params = [p for e in experts for p in e.parameters()] + [p for m in mixers.values() for p in m.parameters()]
    terms = [(pset.policy(t).log_prob, *datasets[t]) for t in sorted(datasets)]
    result = fit_nll(params, terms, bc, rng)
    return pset, result


def pretrain(experts: Mapping[str, GaussianPolicy], task_space: Mapping, config: PretrainConfig,
             rng: np.random.Generator) -> tuple[MixturePolicySet, BCResult]:
    """Distill one single-task skill per pre-training task into a shared mixture."""
    data = collect_datasets(experts, task_space, config.tasks, config.dataset_size, rng)
    return fit_mixture(data, config.n_experts, config.bc, rng)


def _pad_mixer(mixer: MixerFunction, extra: int) -> MixerFunction:
    """Same weights over the first experts and exactly zero weight on ``extra`` new ones."""
    if extra == 0:
        return mixer
    padded = MixerFunction(np.random.default_rng(0), mixer.k + extra)
    old, new = mixer.net[-1], padded.net[-1]
    with torch.no_grad():
        for a, b in zip(mixer.net[:-1].parameters(), padded.net[:-1].parameters()):
            b.copy_(a)
        new.weight.zero_()
        new.weight[: mixer.k] = old.weight
        new.bias.fill_(-math.inf)
        new.bias[: mixer.k] = old.bias
    for p in padded.parameters():
        p.requires_grad_(False)
    return padded


def adapt(pset: MixturePolicySet, new_task: str, task, config: PpoConfig, rng: np.random.Generator,
          expand_k: int = 0, stop_rule: Optional[StopRule] = None) -> tuple[MixturePolicySet, TrainResult]:
    """Learn a mixer for ``new_task`` over frozen experts (plus ``expand_k`` fresh ones).

    The input set is not modified; a new set sharing no parameters with it is returned.
    """
    if new_task in pset.mixers:
        raise MixtureError(f"{new_task!r} already has a mixer")
    if expand_k < 0:
        raise MixtureError("expand_k must be nonnegative")
    experts = [e.clone() for e in pset.experts]
    for e in experts:
        e.set_frozen(True)
    experts += [GaussianPolicy(rng) for _ in range(expand_k)]
    mixer = MixerFunction(rng, len(experts))
    result = train(task, MixturePolicy(experts, mixer), config, rng, stop_rule=stop_rule)
    trained = result.policy
    mixers = {t: _pad_mixer(copy.deepcopy(m), expand_k) for t, m in pset.mixers.items()}
    mixers[new_task] = trained.mixer
    return MixturePolicySet(list(trained.experts), mixers), result

