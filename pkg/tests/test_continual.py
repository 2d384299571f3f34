import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import skillcurriculum.continual as continual
from conftest import ClockTask
from skillcurriculum.continual import (
    Attempt, ContinualConfig, ContinualError, CurriculumMode, EpochRecord, RunLedger, SkillLibrary,
    choose_base_skill, choose_target_task, frontier, frontier_csv, run_continual,
)
from skillcurriculum.curriculum import SCRATCH, TaskGraph, build_graph, min_arborescence
from skillcurriculum.policy import GaussianPolicy, ValueFunction, checkpoint_hash
from skillcurriculum.trainer import BUDGET_EXHAUSTED, REJECTED, SOLVED, Outcome, PpoConfig, TrainCurve, TrainResult
from skillcurriculum.transfer import CostMatrix, build_cost_matrix

seeds = st.integers(0, 2**32 - 1)
TOY = PpoConfig(steps_per_iteration=200, budget=400, warmup_max_passes=3)


def policy(seed=0):
    return GaussianPolicy(np.random.default_rng(seed))


def curve(*points):
    c = TrainCurve()
    for steps, ret, rate in points:
        c.append(steps, ret, rate)
    return c


# -- library -----------------------------------------------------------------

def test_library_is_grow_only():
    lib = SkillLibrary()
    lib.add("a", policy(), SCRATCH, 10, 0.95)
    with pytest.raises(ValueError):
        lib.add("a", policy(1), SCRATCH, 10, 0.95)
    assert lib.tasks == ["a"] and "a" in lib and len(lib) == 1


def test_stored_skill_is_a_snapshot():
    lib, pi = SkillLibrary(), policy()
    entry = lib.add("a", pi, SCRATCH, 10, 0.95)
    digest = entry.digest
    with torch.no_grad():
        pi.log_std.add_(1.0)
        copy = lib.policy("a")
        copy.log_std.add_(1.0)
    assert lib.entry("a").digest == digest
    assert checkpoint_hash(lib.policy("a")) == checkpoint_hash(policy())
    assert lib.policy("a") is not lib.policy("a")


def test_missing_skill_is_a_key_error():
    with pytest.raises(KeyError):
        SkillLibrary().policy("a")


def test_library_round_trip_and_tamper_check(tmp_path):
    lib = SkillLibrary()
    lib.add("b", policy(2), "a", 300, 0.9)
    lib.add("a", policy(1), SCRATCH, 200, 1.0)
    lib.save(tmp_path)
    again = SkillLibrary.load(tmp_path)
    assert again.manifest() == lib.manifest()
    assert json.loads((tmp_path / "manifest.json").read_text())["b"]["base"] == "a"
    (tmp_path / "a.json").write_bytes((tmp_path / "b.json").read_bytes())
    with pytest.raises(ValueError, match="hash"):
        SkillLibrary.load(tmp_path)


# -- ledger ------------------------------------------------------------------

def attempt(base, outcome, steps, warmup=0):
    return Attempt(base, outcome, steps, warmup, curve((steps, 1.0, 1.0 if outcome == SOLVED else 0.0)))


def test_epochs_must_be_contiguous_from_one():
    ledger = RunLedger("optimal", 0)
    with pytest.raises(ValueError):
        ledger.append(EpochRecord(2, "a", [attempt(SCRATCH, SOLVED, 5)]))
    ledger.append(EpochRecord(1, "a", [attempt(SCRATCH, SOLVED, 5)]))
    with pytest.raises(ValueError):
        ledger.append(EpochRecord(1, "b", [attempt(SCRATCH, SOLVED, 5)]))


def test_totals_include_rejected_attempts():
    ledger = RunLedger("optimal", 3)
    ledger.append(EpochRecord(1, "a", [attempt(SCRATCH, SOLVED, 100, 40)]))
    ledger.append(EpochRecord(2, "b", [attempt("a", REJECTED, 30, 40), attempt(SCRATCH, SOLVED, 70, 40)],
                              [{"removed": ["a", "b"], "new_parent": SCRATCH, "tree_total": 170}]))
    assert ledger.total_steps == 200 and ledger.total_warmup_steps == 120
    assert ledger.epochs[1].rejections == 1 and ledger.epochs[1].base == SCRATCH
    lines = [json.loads(x) for x in ledger.to_jsonl().splitlines()]
    assert [x["type"] for x in lines] == ["epoch", "epoch", "totals"]
    assert lines[-1] == {"type": "totals", "mode": "optimal", "seed": 3, "epochs": 2, "total_steps": 200,
                         "total_warmup_steps": 120, "rejections": 1, "replans": 1}
    assert lines[1]["curve"] == "curves/02_b.jsonl" and lines[1]["steps"] == 100


def test_epoch_curve_concatenates_attempts():
    rec = EpochRecord(1, "b", [Attempt("a", REJECTED, 40, 0, curve((20, 1.0, 0.1), (40, 2.0, 0.2))),
                               Attempt(SCRATCH, SOLVED, 30, 0, curve((30, 5.0, 0.95)))])
    assert [(p.steps, p.success_rate) for p in rec.curve()] == [(20, 0.1), (40, 0.2), (70, 0.95)]


def test_ledger_save_writes_curves(tmp_path):
    ledger = RunLedger("scratch", 0)
    ledger.append(EpochRecord(1, "a", [attempt(SCRATCH, SOLVED, 100)]))
    ledger.save(tmp_path)
    assert TrainCurve.load(tmp_path / "curves" / "01_a.jsonl") == ledger.epochs[0].curve()


# -- choosing targets and bases ------------------------------------------------

GRAPH = TaskGraph(("a", "b", "c"), {(SCRATCH, "a"): 10, (SCRATCH, "b"): 10, (SCRATCH, "c"): 10,
                                    ("a", "b"): 2, ("b", "c"): 2})


def test_curriculum_mode_needs_a_valid_tree():
    with pytest.raises(ValueError):
        CurriculumMode("optimal")
    with pytest.raises(ValueError):
        CurriculumMode("sideways")
    assert CurriculumMode.of("optimal", GRAPH).tree.total == 14
    assert CurriculumMode.of("pessimal", GRAPH).tree.total == 30


def test_curriculum_target_follows_traversal():
    mode = CurriculumMode.of("optimal", GRAPH)
    rng = np.random.default_rng(0)
    assert choose_target_task(mode, {"a", "b", "c"}, rng) == "a"
    assert choose_target_task(mode, {"b", "c"}, rng) == "b"


@pytest.mark.parametrize("kind", ["scratch", "random", "optimal", "pessimal"])
def test_last_remaining_task_is_chosen(kind):
    mode = CurriculumMode.of(kind, GRAPH)
    assert choose_target_task(mode, {"c"}, np.random.default_rng(0)) == "c"


def test_random_target_is_reproducible_and_uniform():
    mode = CurriculumMode.of("random")
    picks = [choose_target_task(mode, {"a", "b", "c"}, np.random.default_rng(s)) for s in range(300)]
    again = [choose_target_task(mode, {"a", "b", "c"}, np.random.default_rng(s)) for s in range(300)]
    assert picks == again and all(60 < picks.count(t) < 140 for t in "abc")


def test_no_remaining_task_is_an_error():
    with pytest.raises(ValueError):
        choose_target_task(CurriculumMode.of("random"), set(), np.random.default_rng(0))


def full_library():
    lib = SkillLibrary()
    for i, t in enumerate("abc"):
        lib.add(t, policy(i), SCRATCH, 10, 1.0)
    return lib


def test_scratch_mode_always_starts_fresh():
    assert choose_base_skill(CurriculumMode.of("scratch"), "a", full_library(), np.random.default_rng(0)) \
        == (SCRATCH, None)


def test_random_mode_with_empty_library_starts_fresh():
    assert choose_base_skill(CurriculumMode.of("random"), "a", SkillLibrary(), np.random.default_rng(0)) \
        == (SCRATCH, None)


def test_random_mode_respects_exclusions():
    lib = full_library()
    rng = np.random.default_rng(0)
    mode = CurriculumMode.of("random")
    assert {choose_base_skill(mode, "x", lib, rng, exclude=("a", "c"))[0] for _ in range(20)} == {"b"}
    assert choose_base_skill(mode, "x", lib, rng, exclude=("a", "b", "c")) == (SCRATCH, None)


def test_curriculum_mode_clones_the_parent_skill():
    lib = full_library()
    base, pi = choose_base_skill(CurriculumMode.of("optimal", GRAPH), "b", lib, np.random.default_rng(0))
    assert base == "a" and checkpoint_hash(pi) == lib.entry("a").digest
    with torch.no_grad():
        pi.log_std.add_(1.0)
    assert checkpoint_hash(lib.policy("a")) == lib.entry("a").digest


def test_curriculum_parent_missing_from_library_is_an_error():
    with pytest.raises(ContinualError):
        choose_base_skill(CurriculumMode.of("optimal", GRAPH), "c", SkillLibrary(), np.random.default_rng(0))


def test_curriculum_root_child_starts_fresh():
    assert choose_base_skill(CurriculumMode.of("optimal", GRAPH), "a", SkillLibrary(),
                             np.random.default_rng(0)) == (SCRATCH, None)


def test_config_margin():
    assert ContinualConfig(PpoConfig(budget=200_000)).margin == 20_000
    with pytest.raises(ValueError):
        ContinualConfig(margin_fraction=1.5)


# -- runs on a toy family ---------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    space = {t: ClockTask(success=True, horizon=20) for t in "abc"}
    return space, build_cost_matrix(space, TOY, seed=0)


def run(space, matrix, kind, seed=0):
    mode = CurriculumMode.of(kind, build_graph(matrix))
    curves = {t: matrix.scratch_curve(t) for t in space}
    return run_continual(space, mode, ContinualConfig(TOY), seed, curves)


def test_scratch_run_costs_the_scratch_row(toy):
    space, matrix = toy
    _, ledger = run(space, matrix, "scratch")
    assert ledger.total_steps == sum(matrix.scratch_cost(t) for t in space)
    assert all(e.base == SCRATCH for e in ledger.epochs)


@pytest.mark.parametrize("kind", ["scratch", "random", "optimal", "pessimal"])
def test_every_mode_solves_every_task_once(toy, kind):
    space, matrix = toy
    lib, ledger = run(space, matrix, kind)
    assert lib.tasks == sorted(space) and sorted(e.target for e in ledger.epochs) == sorted(space)
    assert [e.epoch for e in ledger.epochs] == [1, 2, 3]


def test_runs_are_bitwise_reproducible(toy, tmp_path):
    space, matrix = toy
    for kind in ("random", "optimal"):
        a, la = run(space, matrix, kind, seed=5)
        b, lb = run(space, matrix, kind, seed=5)
        assert la.to_jsonl() == lb.to_jsonl() and a.manifest() == b.manifest()


def test_curriculum_run_follows_tree_precedence(toy):
    space, matrix = toy
    mode = CurriculumMode.of("optimal", build_graph(matrix))
    _, ledger = run(space, matrix, "optimal")
    order = [e.target for e in ledger.epochs]
    for e in ledger.epochs:
        assert e.base == mode.tree.parent[e.target][0]
        if e.base != SCRATCH:
            assert order.index(e.base) < order.index(e.target)


# -- control flow with scripted training outcomes ----------------------------------

class ScriptedTrain:
    """Stands in for PPO: outcome per (base, target) from a script, default solved.

    The base of each attempt is read off the task, where the patched pair_rng left it.
    """

    def __init__(self, script=None, steps=100):
        self.script, self.steps, self.calls = dict(script or {}), steps, []

    def __call__(self, task, initial, config, rng, stop_rule=None):
        self.calls.append((task.name, stop_rule is not None))
        status = self.script.get((task.base, task.name), SOLVED)
        c = curve((self.steps, 1.0, 1.0 if status == SOLVED else 0.0))
        return TrainResult(initial, c, Outcome(status, self.steps), ValueFunction(rng), 7)


class Named(ClockTask):
    def __init__(self, name):
        super().__init__(success=True, horizon=20)
        self.name, self.base = name, None


def scripted_run(monkeypatch, kind, script, matrix_text, seed=0, retries=2):
    matrix = CostMatrix.from_c_csv(matrix_text)
    space = {t: Named(t) for t in matrix.tasks}
    fake = ScriptedTrain(script)
    real_pair_rng = continual.pair_rng

    def pair(seed_, base, target):
        space[target].base = base
        return real_pair_rng(seed_, base, target)

    monkeypatch.setattr(continual, "train", fake)
    monkeypatch.setattr(continual, "pair_rng", pair)
    scratch_curves = {t: curve((100, 0.0, 1.0)) for t in matrix.tasks}
    mode = CurriculumMode.of(kind, build_graph(matrix))
    lib, ledger = run_continual(space, mode, ContinualConfig(TOY, random_retries=retries), seed, scratch_curves)
    return lib, ledger, fake


CHAIN = "base,a,b\nscratch,1000,1000\na,100,100\nb,100,100\n"


def test_rejected_transfer_is_replanned_once(monkeypatch):
    lib, ledger, fake = scripted_run(monkeypatch, "optimal", {("a", "b"): REJECTED}, CHAIN)
    e = ledger.epochs[1]
    assert [(a.base, a.outcome) for a in e.attempts] == [("a", REJECTED), (SCRATCH, SOLVED)]
    assert ledger.replan_events == [{"removed": ["a", "b"], "new_parent": SCRATCH, "pinned": False,
                                     "tree_total": 1100}]
    assert ledger.total_steps == 300 and lib.entry("b").base == SCRATCH and lib.entry("b").steps == 200


def test_retry_never_waits_on_an_unlearned_parent(monkeypatch):
    # without a->b the cheapest tree hangs b under c, which is learned only later
    text = "base,a,b,c\nscratch,10,10,50\na,1,1,60\nb,70,1,70\nc,80,2,1\n"
    matrix = CostMatrix.from_c_csv(text)
    mode = CurriculumMode.of("optimal", build_graph(matrix))
    assert mode.replanned(("a", "b"))[0].tree.parent["b"][0] == SCRATCH
    free = CurriculumMode.of("optimal", build_graph(matrix)).graph.without(("a", "b"))
    assert min_arborescence(free).parent["b"][0] == "c"
    _, ledger, _ = scripted_run(monkeypatch, "optimal", {("a", "b"): REJECTED}, text)
    (event,) = ledger.replan_events
    assert event["pinned"] and event["new_parent"] == SCRATCH
    assert [(e.target, e.base) for e in ledger.epochs] == [("a", SCRATCH), ("b", SCRATCH), ("c", SCRATCH)]


def test_budget_exhausted_transfer_is_replanned_too(monkeypatch):
    _, ledger, _ = scripted_run(monkeypatch, "optimal", {("a", "b"): BUDGET_EXHAUSTED}, CHAIN)
    assert len(ledger.replan_events) == 1


def test_only_transfers_carry_the_rejection_rule(monkeypatch):
    _, _, fake = scripted_run(monkeypatch, "optimal", {}, CHAIN)
    assert fake.calls == [("a", False), ("b", True)]


def test_scratch_failure_aborts_with_partial_ledger(monkeypatch):
    with pytest.raises(ContinualError) as info:
        scripted_run(monkeypatch, "optimal", {(SCRATCH, "b"): BUDGET_EXHAUSTED},
                     "base,a,b\nscratch,1000,1000\na,100,FAIL\nb,100,100\n")
    ledger = info.value.ledger
    assert [e.target for e in ledger.epochs] == ["b"] and ledger.epochs[-1].outcome == BUDGET_EXHAUSTED


def test_random_mode_falls_back_to_scratch_after_retries(monkeypatch):
    text = "base,a,b,c,d\nscratch,9,9,9,9\n" + "".join(f"{t},1,1,1,1\n" for t in "abcd")
    script = {(b, t): REJECTED for b in "abcd" for t in "abcd"}
    _, ledger, _ = scripted_run(monkeypatch, "random", script, text, seed=1)
    for e in ledger.epochs:
        bases = [a.base for a in e.attempts]
        assert bases[-1] == SCRATCH and len(bases) == min(e.epoch - 1, 2) + 1
        assert len(set(bases[:-1])) == len(bases) - 1


# -- frontier ------------------------------------------------------------------------

def test_frontier_at_zero_is_one_measurement_per_task():
    curves = {"scratch": {"a": curve((200, 0, 0.1), (400, 0, 0.95)), "b": curve((300, 0, 0.0), (600, 0, 1.0))}}
    assert frontier(curves, [0.0])["scratch"][0.0] == 500


def test_frontier_sentinel_above_every_curve():
    curves = {"optimal": {"a": curve((200, 0, 0.5))}}
    table = frontier(curves, [0.5, 0.9])
    assert table["optimal"] == {0.5: 200, 0.9: None}
    assert frontier_csv(table) == "threshold,optimal\n0.5,200\n0.9,NA\n"


@given(seed=seeds)
@settings(max_examples=100, deadline=None)
def test_frontier_totals_grow_with_threshold(seed):
    rng = np.random.default_rng(seed)
    per_task = {}
    for t in "abc":
        rates = np.maximum.accumulate(rng.uniform(0, 1, 8))
        per_task[t] = curve(*[(100 * (i + 1), 0.0, r) for i, r in enumerate(rates)])
    row = frontier({"m": per_task}, [0.1, 0.3, 0.5, 0.7, 0.9])["m"]
    values = [v for v in row.values() if v is not None]
    assert values == sorted(values)
    defined = [v is not None for v in row.values()]
    assert defined == sorted(defined, reverse=True)
