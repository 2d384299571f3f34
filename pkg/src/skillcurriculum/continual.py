"""Continual skill acquisition: one task per epoch, transfer from the library.

Four modes pick the base skill for each new target:

* ``scratch``: always a fresh random policy.
* ``random``: a uniformly chosen library skill; after ``random_retries``
  rejected bases the task falls back to a fresh policy.
* ``optimal`` / ``pessimal``: the parent in the minimum / maximum spanning
  arborescence of the transfer graph. A rejected or unsolved transfer deletes
  its edge and the tree is re-solved before retrying; the retry's base is
  always a learned skill or a fresh policy.

Every attempt, rejected or not, is charged to the run's step total.
"""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .curriculum import SCRATCH, CurriculumTree, TaskGraph, max_arborescence, min_arborescence, \
    remove_edge_and_replan, traversal
from .policy import GaussianPolicy, checkpoint_bytes, from_checkpoint
from .trainer import PpoConfig, TrainCurve, train
from .transfer import RejectionRule, pair_rng

log = logging.getLogger(__name__)

SCRATCH_MODE, RANDOM_MODE, OPTIMAL_MODE, PESSIMAL_MODE = "scratch", "random", "optimal", "pessimal"
MODES = (SCRATCH_MODE, RANDOM_MODE, OPTIMAL_MODE, PESSIMAL_MODE)


class ContinualError(RuntimeError):
    """Raised when a run cannot proceed; ``ledger`` holds the epochs completed so far."""

    def __init__(self, message: str, ledger: Optional["RunLedger"] = None):
        super().__init__(message)
        self.ledger = ledger


# -- skill library -----------------------------------------------------------

@dataclass(frozen=True)
class SkillEntry:
    task: str
    checkpoint: bytes
    base: str
    steps: int
    success_rate: float

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.checkpoint).hexdigest()

    def policy(self) -> GaussianPolicy:
        """A fresh copy of the stored skill."""
        return from_checkpoint(json.loads(self.checkpoint))


class SkillLibrary:
    """Grow-only map from task id to an immutable skill snapshot."""

    def __init__(self):
        self._entries: dict[str, SkillEntry] = {}

    def __contains__(self, task) -> bool:
        return task in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def tasks(self) -> list[str]:
        return sorted(self._entries)

    def entry(self, task: str) -> SkillEntry:
        return self._entries[task]

    def add(self, task: str, policy: GaussianPolicy, base: str, steps: int, success_rate: float) -> SkillEntry:
        if task in self._entries:
            raise ValueError(f"library already holds a skill for {task!r}; entries are never replaced")
        entry = SkillEntry(task, checkpoint_bytes(policy), base, int(steps), float(success_rate))
        self._entries[task] = entry
        return entry

    def policy(self, task: str) -> GaussianPolicy:
        if task not in self._entries:
            raise KeyError(f"no skill for {task!r} in the library")
        return self._entries[task].policy()

    def manifest(self) -> dict:
        return {
            t: {"file": f"{t}.json", "base": e.base, "steps": e.steps,
                "success_rate": e.success_rate, "sha256": e.digest}
            for t, e in sorted(self._entries.items())
        }

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for t, e in sorted(self._entries.items()):
            (out / f"{t}.json").write_bytes(e.checkpoint)
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "SkillLibrary":
        src = Path(directory)
        lib = cls()
        for t, meta in json.loads((src / "manifest.json").read_text()).items():
            data = (src / meta["file"]).read_bytes()
            if hashlib.sha256(data).hexdigest() != meta["sha256"]:
                raise ValueError(f"checkpoint for {t!r} does not match its manifest hash")
            lib._entries[t] = SkillEntry(t, data, meta["base"], meta["steps"], meta["success_rate"])
        return lib


# -- run ledger --------------------------------------------------------------

@dataclass
class Attempt:
    base: str
    outcome: str
    steps: int
    warmup_steps: int
    curve: TrainCurve = field(repr=False)

    def to_dict(self) -> dict:
        return {"base": self.base, "outcome": self.outcome, "steps": self.steps, "warmup_steps": self.warmup_steps}


@dataclass
class EpochRecord:
    epoch: int
    target: str
    attempts: list[Attempt]
    replans: list[dict] = field(default_factory=list)

    @property
    def base(self) -> str:
        return self.attempts[-1].base

    @property
    def outcome(self) -> str:
        return self.attempts[-1].outcome

    @property
    def steps(self) -> int:
        return sum(a.steps for a in self.attempts)

    @property
    def rejections(self) -> int:
        return len(self.attempts) - 1

    def curve(self) -> TrainCurve:
        """All attempts laid end to end on one step axis."""
        out, offset = TrainCurve(), 0
        for a in self.attempts:
            for p in a.curve:
                out.append(offset + p.steps, p.mean_return, p.success_rate)
            offset += a.steps
        return out

    def to_dict(self) -> dict:
        return {
            "type": "epoch", "epoch": self.epoch, "target": self.target, "base": self.base,
            "outcome": self.outcome, "steps": self.steps, "rejections": self.rejections,
            "attempts": [a.to_dict() for a in self.attempts], "replans": self.replans,
            "curve": f"curves/{self.epoch:02d}_{self.target}.jsonl",
        }


@dataclass
class RunLedger:
    mode: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return sum(e.steps for e in self.epochs)

    @property
    def total_warmup_steps(self) -> int:
        return sum(a.warmup_steps for e in self.epochs for a in e.attempts)

    @property
    def replan_events(self) -> list[dict]:
        return [r for e in self.epochs for r in e.replans]

    def curves(self) -> dict[str, TrainCurve]:
        return {e.target: e.curve() for e in self.epochs}

    def append(self, record: EpochRecord):
        expected = len(self.epochs) + 1
        if record.epoch != expected:
            raise ValueError(f"epoch {record.epoch} out of sequence (expected {expected})")
        self.epochs.append(record)

    def to_jsonl(self) -> str:
        lines = [json.dumps(e.to_dict(), sort_keys=True) for e in self.epochs]
        totals = {"type": "totals", "mode": self.mode, "seed": self.seed, "epochs": len(self.epochs),
                  "total_steps": self.total_steps, "total_warmup_steps": self.total_warmup_steps,
                  "rejections": sum(e.rejections for e in self.epochs),
                  "replans": len(self.replan_events)}
        lines.append(json.dumps(totals, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, directory) -> None:
        out = Path(directory)
        (out / "curves").mkdir(parents=True, exist_ok=True)
        (out / "ledger.jsonl").write_text(self.to_jsonl())
        for e in self.epochs:
            e.curve().save(out / e.to_dict()["curve"])


# -- modes -------------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumMode:
    kind: str
    graph: Optional[TaskGraph] = None
    tree: Optional[CurriculumTree] = None

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown mode {self.kind!r}; expected one of {MODES}")
        if self.is_curriculum:
            if self.graph is None or self.tree is None:
                raise ValueError(f"{self.kind} mode needs a task graph and its tree")
            self.tree.validate(self.graph.tasks)

    @property
    def is_curriculum(self) -> bool:
        return self.kind in (OPTIMAL_MODE, PESSIMAL_MODE)

    @property
    def objective(self) -> str:
        return "max" if self.kind == PESSIMAL_MODE else "min"

    @classmethod
    def of(cls, kind: str, graph: Optional[TaskGraph] = None) -> "CurriculumMode":
        if kind == OPTIMAL_MODE:
            return cls(kind, graph, min_arborescence(graph))
        if kind == PESSIMAL_MODE:
            return cls(kind, graph, max_arborescence(graph))
        return cls(kind)

    def replanned(self, edge: tuple[str, str], learned=()) -> tuple["CurriculumMode", bool]:
        """Drop a failed edge and re-solve; returns ``(mode, pinned)``.

        The target of ``edge`` is retried right away, so if the new tree hangs
        it under a task not yet in ``learned``, the tree is re-solved with the
        target's in-edges limited to learned tasks and the root (``pinned``).
        """
        graph, tree = remove_edge_and_replan(self.graph, edge, self.objective)
        target = edge[1]
        parent = tree.parent[target][0]
        pinned = parent != graph.root and parent not in learned
        if pinned:
            allowed = {(u, v): w for (u, v), w in graph.edges.items()
                       if v != target or u == graph.root or u in learned}
            solve = max_arborescence if self.objective == "max" else min_arborescence
            tree = solve(TaskGraph(graph.tasks, allowed, graph.root))
        return CurriculumMode(self.kind, graph, tree), pinned


def choose_target_task(mode: CurriculumMode, remaining, rng: np.random.Generator) -> str:
    """Next unvisited task in traversal order, or a uniform pick for non-curriculum modes."""
    remaining = sorted(remaining)
    if not remaining:
        raise ValueError("no tasks remaining")
    if mode.is_curriculum:
        return next(t for t in traversal(mode.tree) if t in remaining)
    return remaining[int(rng.integers(len(remaining)))]


def choose_base_skill(mode: CurriculumMode, target: str, library: SkillLibrary, rng: np.random.Generator,
                      exclude=()) -> tuple[str, Optional[GaussianPolicy]]:
    """Returns ``(base_id, policy clone)``; ``(SCRATCH, None)`` means a fresh random policy."""
    if mode.kind == SCRATCH_MODE:
        return SCRATCH, None
    if mode.kind == RANDOM_MODE:
        options = [t for t in library.tasks if t not in exclude]
        if not options:
            return SCRATCH, None
        base = options[int(rng.integers(len(options)))]
        return base, library.policy(base)
    parent = mode.tree.parent[target][0]
    if parent == SCRATCH:
        return SCRATCH, None
    if parent not in library:
        raise ContinualError(f"parent skill {parent!r} of {target!r} is not in the library")
    return parent, library.policy(parent)


# -- runner ------------------------------------------------------------------

@dataclass(frozen=True)
class ContinualConfig:
    ppo: PpoConfig = field(default_factory=PpoConfig)
    margin_fraction: float = 0.1
    random_retries: int = 2

    def __post_init__(self):
        if not 0 <= self.margin_fraction <= 1:
            raise ValueError("margin_fraction must lie in [0, 1]")
        if self.random_retries < 0:
            raise ValueError("random_retries must be nonnegative")

    @property
    def margin(self) -> int:
        return int(round(self.margin_fraction * self.ppo.budget))


def run_continual(task_space: Mapping, mode: CurriculumMode, config: ContinualConfig, seed: int,
                  scratch_curves: Mapping[str, TrainCurve]) -> tuple[SkillLibrary, RunLedger]:
    """Learn every task once, in the order and from the bases the mode dictates.

    ``scratch_curves`` are the from-scratch reference curves for the rejection
    rule. Fresh-policy attempts are never rejected; if one fails to solve its
    task the run aborts with ``ContinualError`` carrying the partial ledger.
    """
    library = SkillLibrary()
    ledger = RunLedger(mode.kind, seed)
    choice_rng = np.random.default_rng([seed, zlib.crc32(b"continual"), zlib.crc32(mode.kind.encode())])
    remaining = set(task_space)
    epoch = 0
    while remaining:
        epoch += 1
        target = choose_target_task(mode, remaining, choice_rng)
        record = EpochRecord(epoch, target, [])
        rejected: list[str] = []
        while True:
            if mode.kind == RANDOM_MODE and len(rejected) >= config.random_retries:
                base, policy = SCRATCH, None
            else:
                base, policy = choose_base_skill(mode, target, library, choice_rng, exclude=rejected)
            rng = pair_rng(seed, base, target)
            if policy is None:
                policy = GaussianPolicy(rng)
                stop = None
            else:
                stop = RejectionRule(config.margin, scratch_curves[target])
            result = train(task_space[target], policy, config.ppo, rng, stop_rule=stop)
            record.attempts.append(Attempt(base, result.outcome.status, result.outcome.steps,
                                           result.warmup_steps, result.curve))
            log.info("epoch %d: %s -> %s %s after %d steps", epoch, base, target,
                     result.outcome.status, result.outcome.steps)
            if result.outcome.solved:
                break
            if base == SCRATCH:
                ledger.append(record)
                raise ContinualError(f"{target!r} not solved from scratch within the budget", ledger)
            rejected.append(base)
            if mode.is_curriculum:
                mode, pinned = mode.replanned((base, target), library.tasks)
                record.replans.append({
                    "removed": [base, target],
                    "new_parent": mode.tree.parent[target][0],
                    "pinned": pinned,
                    "tree_total": mode.tree.total,
                })
        library.add(target, result.policy, base, record.steps, result.curve.points[-1].success_rate)
        ledger.append(record)
        remaining.discard(target)
    return library, ledger


# -- frontier ----------------------------------------------------------------

def frontier(curves: Mapping[str, Mapping[str, TrainCurve]], thresholds) -> dict[str, dict[float, Optional[int]]]:
    """Total steps for every task of a mode to first reach each success threshold.

    A mode's total is None (the sentinel) when some task never reaches the threshold.
    """
    table: dict[str, dict[float, Optional[int]]] = {}
    for mode, per_task in curves.items():
        row: dict[float, Optional[int]] = {}
        for theta in thresholds:
            steps = [c.steps_to(theta) for _, c in sorted(per_task.items())]
            row[float(theta)] = None if any(s is None for s in steps) else sum(steps)
        table[mode] = row
    return table


def frontier_csv(table: Mapping[str, Mapping[float, Optional[int]]], sentinel: str = "NA") -> str:
    modes = list(table)
    thetas = sorted({t for row in table.values() for t in row})
    lines = ["threshold," + ",".join(modes)]
    for theta in thetas:
        cells = [sentinel if table[m].get(theta) is None else str(table[m][theta]) for m in modes]
        lines.append(f"{theta:g}," + ",".join(cells))
    return "\n".join(lines) + "\n"
