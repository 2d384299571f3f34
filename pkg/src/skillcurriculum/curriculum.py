"""Curriculum graphs and spanning arborescences.

Vertices are task ids plus the ``scratch`` root. An edge ``base -> target``
weighs the env steps needed to reach the success threshold on ``target``
starting from the ``base`` skill; scratch edges carry from-scratch costs, so
the star rooted at scratch is always a feasible curriculum.

Minimum arborescences are found with the Chu-Liu/Edmonds cycle-contraction
algorithm. Ties between equal-weight in-edges go to the lexicographically
smallest ``(base, target)`` pair.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping

SCRATCH = "scratch"


class CurriculumError(ValueError):
    pass


@dataclass(frozen=True)
class TaskGraph:
    tasks: tuple[str, ...]
    edges: Mapping[tuple[str, str], float] = field(default_factory=dict)
    root: str = SCRATCH

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(sorted(self.tasks)))
        vertices = set(self.tasks) | {self.root}
        for (u, v) in self.edges:
            if v == self.root:
                raise CurriculumError(f"edge {u}->{v} enters the root")
            if u not in vertices or v not in vertices:
                raise CurriculumError(f"edge {u}->{v} references an unknown vertex")
            if u == v:
                raise CurriculumError(f"self-loop on {u}")

    @property
    def vertices(self) -> tuple[str, ...]:
        return (self.root, *self.tasks)

    def without(self, edge: tuple[str, str]) -> "TaskGraph":
        edges = dict(self.edges)
        del edges[edge]
        return TaskGraph(self.tasks, edges, self.root)


@dataclass(frozen=True)
class CurriculumTree:
    """Spanning arborescence: ``parent[task] = (parent_vertex, edge_weight)``."""

    parent: Mapping[str, tuple[str, float]]
    root: str = SCRATCH

    @property
    def total(self) -> float:
        return sum(w for _, w in self.parent.values())

    @property
    def edges(self) -> set[tuple[str, str]]:
        return {(p, t) for t, (p, _) in self.parent.items()}

    def children(self, vertex: str) -> list[str]:
        return sorted(t for t, (p, _) in self.parent.items() if p == vertex)

    def validate(self, tasks) -> None:
        """Check one parent per task, no cycles, everything reachable from the root."""
        if set(self.parent) != set(tasks):
            raise CurriculumError("tree does not span exactly the task set")
        for t in self.parent:
            seen = {t}
            v = t
            while v != self.root:
                v = self.parent[v][0]
                if v in seen:
                    raise CurriculumError(f"cycle through {t}")
                seen.add(v)


def build_graph(matrix) -> TaskGraph:
    """Graph of successful transfers from a cost matrix (weights are env steps C).

    Failed transfers and the diagonal contribute no edge; every task gets the
    scratch edge weighted by its from-scratch cost.
    """
    edges: dict[tuple[str, str], float] = {}
    for target in matrix.tasks:
        c = matrix.scratch_cost(target)
        if c is None:
            raise CurriculumError(f"missing scratch cost for {target}")
        edges[(SCRATCH, target)] = c
    for base in matrix.tasks:
        for target in matrix.tasks:
            c = matrix.cost(base, target)
            if base != target and c is not None:
                edges[(base, target)] = c
    return TaskGraph(tuple(matrix.tasks), edges)


def _find_cycle(parent: dict) -> list | None:
    done: set = set()
    for start in sorted(parent, key=repr):
        path, pos = [], {}
        v = start
        while v in parent and v not in done and v not in pos:
            pos[v] = len(path)
            path.append(v)
            v = parent[v]
        if v in pos:
            return path[pos[v]:]
        done.update(path)
    return None


def _edmonds(vertices, edges, root, counter):
    """``edges``: {(u, v): (weight, original_edge)}. Returns {v: original_edge}."""
    best: dict = {}
    for (u, v), (w, orig) in edges.items():
        if v == root or u == v:
            continue
        if v not in best or (w, orig) < best[v][1:]:
            best[v] = ((u, v), w, orig)
    missing = [v for v in vertices if v != root and v not in best]
    if missing:
        raise CurriculumError(f"vertices unreachable from {root}: {sorted(map(str, missing))}")
    cycle = _find_cycle({v: e[0][0] for v, e in best.items()})
    if cycle is None:
        return {v: e[2] for v, e in best.items()}

    in_cycle = set(cycle)
    node = ("<cycle>", next(counter))
    contracted: dict = {}
    for (u, v), (w, orig) in edges.items():
        if u in in_cycle and v in in_cycle:
            continue
        if v in in_cycle:
            key, w = (u, node), w - best[v][1]
        elif u in in_cycle:
            key = (node, v)
        else:
            key = (u, v)
        if key not in contracted or (w, orig) < contracted[key][:2]:
            contracted[key] = (w, orig)
    new_vertices = [v for v in vertices if v not in in_cycle] + [node]
    chosen = _edmonds(new_vertices, contracted, root, counter)

    # map chosen original edges back to this level's endpoints; the edge entering
    # the contracted node displaces the cycle edge into the vertex it enters
    endpoints = {orig: (u, v) for (u, v), (_, orig) in edges.items()}
    result = {endpoints[orig][1]: orig for orig in chosen.values()}
    for v in cycle:
        result.setdefault(v, best[v][2])
    return result


def _solve(graph: TaskGraph, sign: float) -> CurriculumTree:
    edges = {(u, v): (sign * w, (u, v)) for (u, v), w in graph.edges.items()}
    chosen = _edmonds(list(graph.vertices), edges, graph.root, itertools.count())
    parent = {}
    for v in graph.tasks:
        u, t = chosen[v]
        parent[t] = (u, graph.edges[(u, t)])
    tree = CurriculumTree(parent, graph.root)
    tree.validate(graph.tasks)
    return tree


def min_arborescence(graph: TaskGraph) -> CurriculumTree:
    """Minimum-weight spanning arborescence rooted at ``graph.root``."""
    return _solve(graph, 1.0)


def max_arborescence(graph: TaskGraph) -> CurriculumTree:
    """Maximum-weight spanning arborescence (minimum on negated weights)."""
    return _solve(graph, -1.0)


def traversal(tree: CurriculumTree) -> list[str]:
    """Pre-order walk from the root, children in lexicographic order; root omitted."""
    order: list[str] = []
    stack = list(reversed(tree.children(tree.root)))
    while stack:
        v = stack.pop()
        order.append(v)
        stack.extend(reversed(tree.children(v)))
    return order


def remove_edge_and_replan(graph: TaskGraph, edge: tuple[str, str], objective: str = "min"):
    """Delete a failed transfer edge and re-solve. Scratch edges are never removed."""
    if edge[0] == graph.root:
        raise CurriculumError("refusing to delete a scratch edge: the curriculum would become infeasible")
    if edge not in graph.edges:
        raise CurriculumError(f"no edge {edge[0]}->{edge[1]} in graph")
    pruned = graph.without(edge)
    solve = min_arborescence if objective == "min" else max_arborescence
    return pruned, solve(pruned)


def _fmt_weight(w: float) -> str:
    return str(int(w)) if float(w).is_integer() else repr(float(w))


def to_dot(tree: CurriculumTree, name: str = "curriculum") -> str:
    """Graphviz DOT text: root as a box, tasks as ellipses, edges labeled with weights."""
    lines = [f"digraph \"{name}\" {{", f"  \"{tree.root}\" [shape=box];"]
    for t in sorted(tree.parent):
        lines.append(f"  \"{t}\" [shape=ellipse];")
    for t, (p, w) in sorted(tree.parent.items(), key=lambda kv: (kv[1][0], kv[0])):
        lines.append(f"  \"{p}\" -> \"{t}\" [label=\"{_fmt_weight(w)}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"
