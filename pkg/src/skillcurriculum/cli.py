"""Command-line front end.

    skillcurriculum costmatrix --config cfg.json --out runs/matrix
    skillcurriculum plan runs/matrix/C.csv --objective min --out runs/plan
    skillcurriculum run --config cfg.json --matrix runs/matrix --mode optimal --out runs/optimal
    skillcurriculum frontier runs/scratch runs/optimal --thresholds 0.5,0.9 --out runs/frontier.csv
    skillcurriculum pretrain --config cfg.json --matrix runs/matrix --out runs/mixture
    skillcurriculum adapt --config cfg.json --mixture runs/mixture --out runs/adapt

Exit status: 0 on success, 1 for usage or configuration errors (including
missing inputs), 2 for runtime failures such as a task that cannot be learned.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, load_config
from .continual import ContinualError, CurriculumMode, frontier, frontier_csv, run_continual
from .curriculum import CurriculumError, build_graph, max_arborescence, min_arborescence, to_dot, traversal
from .mixture import MixtureError, MixturePolicySet, adapt, pretrain, select_pretrain_tasks
from .trainer import TrainCurve, TrainingAborted
from .transfer import CostMatrix, ScratchTrainingFailed, build_cost_matrix, pair_rng

log = logging.getLogger("skillcurriculum")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    try:
        return cfg.replace(seed=args.seed, output_dir=args.out, mode=getattr(args, "mode", None),
                           jobs=getattr(args, "jobs", None), budget=args.budget)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def _load_matrix(path, threshold: float) -> CostMatrix:
    p = _require_dir(path, "cost matrix")
    if not (p / "C.csv").is_file():
        raise UsageError(f"no C.csv in {p}")
    try:
        return CostMatrix.load(p, threshold)
    except ValueError as exc:
        raise ConfigError(f"{p / 'C.csv'}: {exc}") from None


def cmd_costmatrix(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    matrix = build_cost_matrix(cfg.task_space(), cfg.ppo_config(), cfg.seed, jobs=cfg.jobs)
    matrix.save(out)
    print(matrix.c_csv(), end="")
    print(f"wrote {out / 'C.csv'} and {out / 'A.csv'}")
    return EXIT_OK


def cmd_plan(args) -> int:
    path = Path(args.costs)
    if not path.is_file():
        raise UsageError(f"cost file not found: {path}")
    try:
        matrix = CostMatrix.from_c_csv(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    graph = build_graph(matrix)
    tree = min_arborescence(graph) if args.objective == "min" else max_arborescence(graph)
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    name = "optimal" if args.objective == "min" else "pessimal"
    (out / f"tree_{name}.dot").write_text(to_dot(tree, name))
    (out / f"traversal_{name}.txt").write_text("\n".join(traversal(tree)) + "\n")
    for task in traversal(tree):
        parent, weight = tree.parent[task]
        print(f"{parent} -> {task}: {int(weight)}")
    print(f"predicted total steps ({name}): {int(tree.total)}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    matrix = _load_matrix(args.matrix, cfg.success_threshold)
    task_space = cfg.task_space()
    missing = [t for t in task_space if t not in matrix.tasks or matrix.scratch_curve(t) is None]
    if missing:
        raise UsageError(f"cost matrix lacks scratch curves for {missing}")
    graph = build_graph(matrix)
    mode = CurriculumMode.of(cfg.mode, graph)
    out = Path(cfg.output_dir)
    scratch_curves = {t: matrix.scratch_curve(t) for t in task_space}
    try:
        library, ledger = run_continual(task_space, mode, cfg.continual_config(), cfg.seed, scratch_curves)
    except ContinualError as exc:
        if exc.ledger is not None:
            exc.ledger.save(out)
        raise
    ledger.save(out)
    library.save(out / "library")
    lines = [f"mode {cfg.mode} seed {cfg.seed}", "epoch target base outcome steps rejections"]
    for e in ledger.epochs:
        lines.append(f"{e.epoch} {e.target} {e.base} {e.outcome} {e.steps} {e.rejections}")
    lines.append(f"total steps {ledger.total_steps} (value warm-up {ledger.total_warmup_steps})")
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def _read_run(directory) -> tuple[str, dict[str, TrainCurve]]:
    d = _require_dir(directory, "run")
    ledger = d / "ledger.jsonl"
    if not ledger.is_file():
        raise UsageError(f"no ledger.jsonl in {d}")
    mode, curves = None, {}
    for lineno, line in enumerate(ledger.read_text().splitlines(), start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{ledger}: line {lineno}: {exc.msg}") from None
        if rec.get("type") == "epoch":
            curves[rec["target"]] = TrainCurve.load(d / rec["curve"])
        elif rec.get("type") == "totals":
            mode = rec["mode"]
    if mode is None:
        raise ConfigError(f"{ledger}: missing totals line")
    return mode, curves


def cmd_frontier(args) -> int:
    try:
        thresholds = [float(x) for x in args.thresholds.split(",")]
    except ValueError:
        raise UsageError(f"--thresholds must be comma-separated numbers, got {args.thresholds!r}") from None
    runs = {}
    for d in args.runs:
        mode, curves = _read_run(d)
        if mode in runs:
            raise UsageError(f"two runs for mode {mode!r}")
        runs[mode] = curves
    text = frontier_csv(frontier(runs, thresholds))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if cfg.pretrain.m >= len(cfg.tasks):
        raise ConfigError(f"pretrain.m={cfg.pretrain.m} leaves none of the {len(cfg.tasks)} tasks to adapt to")
    matrix = _load_matrix(args.matrix, cfg.success_threshold)
    tasks = select_pretrain_tasks({t: matrix.scratch_cost(t) for t in cfg.tasks}, cfg.pretrain.m)
    missing = [t for t in tasks if t not in matrix.scratch_skills]
    if missing:
        raise UsageError(f"cost matrix has no scratch skill checkpoints for {missing}")
    pconf = cfg.pretrain_config(tasks)
    pset, result = pretrain(matrix.scratch_skills, cfg.task_space(), pconf, pair_rng(cfg.seed, "pretrain", "mixture"))
    out = Path(cfg.output_dir)
    pset.save(out)
    (out / "bc_losses.json").write_text(json.dumps({"tasks": list(pconf.tasks), "losses": result.losses,
                                                    "stopped_early": result.stopped_early}, indent=2) + "\n")
    print(f"pre-trained {pset.k} experts on {', '.join(pconf.tasks)}; final NLL {result.losses[-1]:.6f}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    src = _require_dir(args.mixture, "mixture")
    if not (src / "manifest.json").is_file():
        raise UsageError(f"no manifest.json in {src}")
    base = MixturePolicySet.load(src)
    task_space = cfg.task_space()
    targets = list(args.task or cfg.adapt.tasks or [t for t in task_space if t not in base.mixers])
    unknown = [t for t in targets if t not in task_space]
    if unknown:
        raise UsageError(f"unknown task(s) {unknown}")
    out = Path(cfg.output_dir)
    for t in sorted(targets):
        pset, result = adapt(base, t, task_space[t], cfg.ppo_config(), pair_rng(cfg.seed, "mixture", t),
                             expand_k=cfg.adapt.expand_k)
        pset.save(out / t)
        result.curve.save(out / f"{t}.jsonl")
        print(f"{t}: {result.outcome.status} after {result.outcome.steps} steps")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillcurriculum", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=False, jobs=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--budget", type=int, help="override the per-task step budget")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if mode:
            p.add_argument("--mode", choices=("scratch", "random", "optimal", "pessimal"))
        if jobs:
            p.add_argument("--jobs", type=int, help="parallel worker processes")

    p = sub.add_parser("costmatrix", help="measure transfer costs between every pair of tasks")
    common(p, jobs=True)
    p.set_defaults(func=cmd_costmatrix)

    p = sub.add_parser("plan", help="solve for the optimal or pessimal curriculum tree")
    p.add_argument("costs", help="C.csv written by costmatrix")
    p.add_argument("--objective", choices=("min", "max"), default="min")
    p.add_argument("--out", help="output directory (default: next to C.csv)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="continual learning over every task")
    common(p, mode=True)
    p.add_argument("--matrix", required=True, help="directory written by costmatrix")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("frontier", help="total steps per success threshold for several runs")
    p.add_argument("runs", nargs="+", help="directories written by run")
    p.add_argument("--thresholds", default="0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--out", default="frontier.csv")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("pretrain", help="distill the hardest tasks' skills into a mixture")
    common(p)
    p.add_argument("--matrix", required=True, help="directory written by costmatrix")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="fit new mixers over frozen experts")
    common(p)
    p.add_argument("--mixture", required=True, help="directory written by pretrain")
    p.add_argument("--task", action="append", help="task to adapt to (repeatable; default: all held out)")
    p.set_defaults(func=cmd_adapt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScratchTrainingFailed, ContinualError, TrainingAborted, CurriculumError, MixtureError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
