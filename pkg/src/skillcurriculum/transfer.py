"""Transfer costs between skills, success evaluation and the rejection rule.

``C[base -> target]`` is the number of env steps a clone of the ``base``
skill needs to reach the success threshold on ``target``. ``A`` divides that
by the from-scratch cost, so the scratch row of ``A`` is exactly 1.

Every (base, target) training run draws from its own generator seeded by
``(seed, crc32(base), crc32(target))``. Entries therefore do not depend on
evaluation order, and a later run that trains the same pair from the same
base skill reproduces the same curve.
"""
from __future__ import annotations

import csv
import io
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .curriculum import SCRATCH
from .envs import rollout_batch
from .policy import GaussianPolicy, StochasticPolicy, load_checkpoint, save_checkpoint
from .trainer import PpoConfig, TrainCurve, train

log = logging.getLogger(__name__)

FAIL = "FAIL"
KEEP = "keep"
REJECT = "reject"


class ScratchTrainingFailed(RuntimeError):
    """A task could not be learned from scratch, so its costs are undefined."""


def pair_rng(seed: int, base: str, target: str) -> np.random.Generator:
    """Generator dedicated to training ``target`` from ``base`` under ``seed``."""
    return np.random.default_rng([seed, zlib.crc32(base.encode()), zlib.crc32(target.encode())])


def evaluate(task, policy: StochasticPolicy, n_episodes: int, rng: np.random.Generator) -> float:
    """Fraction of stochastic-policy episodes that succeed."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    return float(rollout_batch(task, policy, n_episodes, rng).episode_success.mean())


@dataclass
class TransferRecord:
    """One cell of the matrix. ``cost``/``ratio`` are None for failed transfers."""

    base: str
    target: str
    cost: Optional[int]
    ratio: Optional[float]
    curve: Optional[TrainCurve] = None

    @property
    def failed(self) -> bool:
        return self.cost is None


@dataclass
class CostMatrix:
    tasks: tuple[str, ...]
    records: dict[tuple[str, str], TransferRecord]
    threshold: float = 0.9
    scratch_skills: dict[str, GaussianPolicy] = field(default_factory=dict)

    def __post_init__(self):
        self.tasks = tuple(sorted(self.tasks))
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def bases(self) -> tuple[str, ...]:
        return (SCRATCH, *self.tasks)

    def record(self, base: str, target: str) -> TransferRecord:
        return self.records[(base, target)]

    def cost(self, base: str, target: str) -> Optional[int]:
        rec = self.records.get((base, target))
        return None if rec is None else rec.cost

    def ratio(self, base: str, target: str) -> Optional[float]:
        rec = self.records.get((base, target))
        return None if rec is None else rec.ratio

    def scratch_cost(self, target: str) -> Optional[int]:
        return self.cost(SCRATCH, target)

    def scratch_curve(self, target: str) -> Optional[TrainCurve]:
        return self.records[(SCRATCH, target)].curve

    def with_cost(self, base: str, target: str, cost: Optional[int]) -> "CostMatrix":
        """Copy with one C entry replaced (ratio recomputed, curve kept)."""
        records = dict(self.records)
        old = records[(base, target)]
        c_scratch = self.scratch_cost(target)
        ratio = 1.0 if base == SCRATCH else (None if cost is None else cost / c_scratch)
        records[(base, target)] = TransferRecord(base, target, cost, ratio, old.curve)
        return CostMatrix(self.tasks, records, self.threshold, self.scratch_skills)

    # -- CSV ---------------------------------------------------------------
    def _csv(self, cell) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["base", *self.tasks])
        for base in self.bases:
            w.writerow([base, *(cell(base, t) for t in self.tasks)])
        return buf.getvalue()

    def c_csv(self) -> str:
        return self._csv(lambda b, t: FAIL if self.cost(b, t) is None else str(int(self.cost(b, t))))

    def a_csv(self) -> str:
        def cell(b, t):
            if b == SCRATCH:
                return "1.0"
            r = self.ratio(b, t)
            return FAIL if r is None else f"{r:.6f}"
        return self._csv(cell)

    @classmethod
    def from_c_csv(cls, text: str, threshold: float = 0.9) -> "CostMatrix":
        """Parse a C table written by ``c_csv`` (curves and skills are not restored)."""
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if not rows or rows[0][0] != "base":
            raise ValueError("line 1: expected a header starting with 'base'")
        tasks = tuple(rows[0][1:])
        if len(set(tasks)) != len(tasks) or not tasks:
            raise ValueError("line 1: target ids must be unique and nonempty")
        costs: dict[tuple[str, str], Optional[int]] = {}
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(tasks) + 1:
                raise ValueError(f"line {lineno}: expected {len(tasks) + 1} cells, got {len(row)}")
            base = row[0]
            if base != SCRATCH and base not in tasks:
                raise ValueError(f"line {lineno}: unknown base {base!r}")
            for target, cell in zip(tasks, row[1:]):
                if cell == FAIL:
                    costs[(base, target)] = None
                    continue
                try:
                    value = int(cell)
                except ValueError:
                    raise ValueError(f"line {lineno}: cell {cell!r} is neither an integer nor {FAIL}") from None
                if value <= 0:
                    raise ValueError(f"line {lineno}: costs must be positive, got {value}")
                costs[(base, target)] = value
        for t in tasks:
            if costs.get((SCRATCH, t)) is None:
                raise ValueError(f"missing scratch cost for {t!r}")
        records = {}
        for (base, target), c in costs.items():
            ratio = 1.0 if base == SCRATCH else (None if c is None else c / costs[(SCRATCH, target)])
            records[(base, target)] = TransferRecord(base, target, c, ratio)
        return cls(tasks, records, threshold)

    def save(self, directory) -> None:
        """Write C.csv, A.csv, one curve JSONL per pair and the scratch skill checkpoints."""
        out = Path(directory)
        (out / "curves").mkdir(parents=True, exist_ok=True)
        (out / "C.csv").write_text(self.c_csv())
        (out / "A.csv").write_text(self.a_csv())
        for (base, target), rec in sorted(self.records.items()):
            if rec.curve is not None:
                rec.curve.save(out / "curves" / f"{base}__{target}.jsonl")
        if self.scratch_skills:
            (out / "skills").mkdir(exist_ok=True)
            for t, skill in sorted(self.scratch_skills.items()):
                save_checkpoint(skill, out / "skills" / f"{t}.json")

    @classmethod
    def load(cls, directory, threshold: float = 0.9) -> "CostMatrix":
        """Inverse of ``save``: C costs, curves and scratch skills."""
        src = Path(directory)
        matrix = cls.from_c_csv((src / "C.csv").read_text(), threshold)
        for (base, target), rec in matrix.records.items():
            path = src / "curves" / f"{base}__{target}.jsonl"
            if path.exists():
                rec.curve = TrainCurve.load(path)
        for t in matrix.tasks:
            path = src / "skills" / f"{t}.json"
            if path.exists():
                matrix.scratch_skills[t] = load_checkpoint(path)
        return matrix


# -- building --------------------------------------------------------------

def _train_pair(args):
    task, base_name, target, base_policy, config, seed = args
    torch.set_num_threads(1)
    rng = pair_rng(seed, base_name, target)
    if base_policy is None:
        base_policy = GaussianPolicy(rng)
    result = train(task, base_policy, config, rng)
    return base_name, target, result


def _run_all(jobs_args, jobs: int):
    if jobs <= 1:
        return [_train_pair(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_pair, jobs_args))


def build_cost_matrix(task_space: Mapping, config: PpoConfig, seed: int, jobs: int = 1) -> CostMatrix:
    """Train every task from scratch, then every ordered pair from the scratch skills.

    Raises ``ScratchTrainingFailed`` if some task is not learnable from scratch.
    """
    tasks = tuple(sorted(task_space))
    scratch_runs = _run_all([(task_space[t], SCRATCH, t, None, config, seed) for t in tasks], jobs)
    records: dict[tuple[str, str], TransferRecord] = {}
    skills: dict[str, GaussianPolicy] = {}
    unsolved = []
    for _, target, result in scratch_runs:
        if not result.outcome.solved:
            unsolved.append(f"{target} ({result.outcome.status} after {result.outcome.steps} steps)")
            continue
        skills[target] = result.policy
        records[(SCRATCH, target)] = TransferRecord(SCRATCH, target, result.outcome.steps, 1.0, result.curve)
        log.info("scratch -> %s: %d steps", target, result.outcome.steps)
    if unsolved:
        raise ScratchTrainingFailed("from-scratch training failed for: " + ", ".join(unsolved))

    pair_args = [(task_space[t], b, t, skills[b], config, seed) for b in tasks for t in tasks]
    for base, target, result in _run_all(pair_args, jobs):
        c = result.outcome.steps if result.outcome.solved else None
        ratio = None if c is None else c / records[(SCRATCH, target)].cost
        records[(base, target)] = TransferRecord(base, target, c, ratio, result.curve)
        log.info("%s -> %s: %s", base, target, FAIL if c is None else c)
    return CostMatrix(tasks, records, config.success_threshold, skills)


# -- rejection ---------------------------------------------------------------

def rejection_check(current: TrainCurve, scratch_ref: TrainCurve, steps_used: int, margin: int) -> str:
    """``REJECT`` if the transfer's return trails scratch's return ``margin`` steps earlier.

    Within the first ``margin`` steps the reference would be scratch's initial
    return, so the transfer always gets that long before it can be rejected.
    """
    if not scratch_ref.points:
        raise ValueError("scratch reference curve is empty")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if steps_used <= margin or not current.points:
        return KEEP
    mine = current.return_at(steps_used)
    ref = scratch_ref.return_at(steps_used - margin)
    return REJECT if mine < ref else KEEP


@dataclass(frozen=True)
class RejectionRule:
    """Stop rule for ``trainer.train``: checked once per PPO iteration."""

    margin: int
    scratch_ref: TrainCurve

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")

    def __call__(self, curve: TrainCurve) -> bool:
        return rejection_check(curve, self.scratch_ref, curve.points[-1].steps, self.margin) == REJECT
