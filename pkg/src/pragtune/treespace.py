"""Loop-transformation search without user parameterization.

A loop nest is an object tree of named loops.  Search-tree nodes stack one
transformation (tiling, interchange or thread parallelization) on top of
their parent's loop tree; the untransformed source is the root.  Stacks the
compiler rejects are pruned together with their subtrees.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .evaluator import Evaluator, Status, TrialRecord
from .optimizer import SearchState
from .space import Configuration

DEFAULT_TILE_CHOICES = (2, 4)
MAX_STACK_DEPTH = 4
# transformations act on at most this many outermost loops of a perfect chain;
# tiling doubles chain length, so unbounded interchanges grow factorially
MAX_TARGETS = 3
EXPLOIT_PROBABILITY = 0.7
BASELINE_LABEL = "baseline"

_ROOT_NAME = ""
_LOOP_NUM_RE = re.compile(r"^loop(\d+)$")


class ShapeError(ValueError):
    """A transformation does not fit the loop tree it is applied to."""


class TreeSearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoopNode:
    name: str
    children: tuple[LoopNode, ...] = ()
    transformable: bool = True

    def walk(self) -> Iterator[LoopNode]:
        yield self
        for c in self.children:
            yield from c.walk()

    def loops(self) -> list[LoopNode]:
        """Every real loop (the function-body root excluded), pre-order."""
        return [n for n in self.walk() if n.name != _ROOT_NAME]

    def names(self) -> list[str]:
        return [n.name for n in self.loops()]

    def find(self, name: str) -> LoopNode | None:
        return next((n for n in self.walk() if n.name == name), None)

    def to_json(self) -> dict:
        d: dict = {"name": self.name}
        if self.children:
            d["children"] = [c.to_json() for c in self.children]
        if not self.transformable:
            d["transformable"] = False
        return d

    @classmethod
    def from_json(cls, d: dict) -> LoopNode:
        return cls(d["name"], tuple(cls.from_json(c) for c in d.get("children", ())), d.get("transformable", True))


def function_body(*loops: LoopNode) -> LoopNode:
    """Wrap top-level loops in the non-transformable function-body root."""
    return LoopNode(_ROOT_NAME, tuple(loops), transformable=False)


def perfect_nest(*names: str) -> LoopNode:
    node = None
    for n in reversed(names):
        node = LoopNode(n, () if node is None else (node,))
    return function_body(node)


def load_loops(path: str | Path) -> tuple[LoopNode, dict]:
    """Read a loop annotation file: ``{"loops": [{"name": ..., "children": [...]}]}``."""
    data = json.loads(Path(path).read_text())
    body = function_body(*(LoopNode.from_json(d) for d in data["loops"]))
    names = body.names()
    if len(set(names)) != len(names):
        raise ShapeError("loop names in the annotation file are not unique")
    return body, data


@dataclass(frozen=True)
class Transformation:
    kind: Literal["tile", "interchange", "parallelize"]
    targets: tuple[str, ...]
    sizes: tuple[int, ...] = ()
    permutation: tuple[str, ...] = ()


def fresh_names(tree: LoopNode, count: int) -> list[str]:
    """``count`` names ``loopN`` numbered above every loop in the tree."""
    top = 0
    for name in tree.names():
        m = _LOOP_NUM_RE.match(name)
        if m:
            top = max(top, int(m.group(1)))
    return [f"loop{top + i}" for i in range(1, count + 1)]


def _parent_map(tree: LoopNode) -> dict[str, LoopNode]:
    out = {}
    for n in tree.walk():
        for c in n.children:
            out[c.name] = n
    return out


def _check_path(tree: LoopNode, targets: Sequence[str]) -> list[LoopNode]:
    if not targets:
        raise ShapeError("no target loops")
    if len(set(targets)) != len(targets):
        raise ShapeError("duplicate target loops")
    nodes = []
    for name in targets:
        n = tree.find(name) if name != _ROOT_NAME else None
        if n is None:
            raise ShapeError(f"loop {name!r} not found")
        if not n.transformable:
            raise ShapeError(f"loop {name!r} is not transformable")
        nodes.append(n)
    for outer, inner in zip(nodes, nodes[1:]):
        if len(outer.children) != 1 or outer.children[0].name != inner.name:
            raise ShapeError(f"{outer.name} and {inner.name} are not perfectly nested")
    return nodes


def _replace(tree: LoopNode, old_name: str, new: LoopNode) -> LoopNode:
    if tree.name == old_name:
        return new
    if not tree.children:
        return tree
    return LoopNode(tree.name, tuple(_replace(c, old_name, new) for c in tree.children), tree.transformable)


def _chain(names: Sequence[str], innermost_children: tuple[LoopNode, ...]) -> LoopNode:
    node_children = innermost_children
    node = None
    for n in reversed(names):
        node = LoopNode(n, node_children)
        node_children = (node,)
    return node


def apply_transform(tree: LoopNode, t: Transformation) -> LoopNode:
    nodes = _check_path(tree, t.targets)
    inner_children = nodes[-1].children
    if t.kind == "tile":
        if len(t.sizes) != len(t.targets) or any(s < 1 for s in t.sizes):
            raise ShapeError("tile needs one positive size per target")
        new = fresh_names(tree, 2 * len(t.targets))
        return _replace(tree, t.targets[0], _chain(new, inner_children))
    if t.kind == "interchange":
        if sorted(t.permutation) != sorted(t.targets):
            raise ShapeError("permutation is not a bijection over the targets")
        new = fresh_names(tree, len(t.targets))
        return _replace(tree, t.targets[0], _chain(new, inner_children))
    if t.kind == "parallelize":
        if len(t.targets) != 1:
            raise ShapeError("parallelize takes exactly one loop")
        n = nodes[0]
        return _replace(tree, n.name, LoopNode(n.name, n.children, transformable=False))
    raise ShapeError(f"unknown transformation {t.kind!r}")


def emit_pragma(tree: LoopNode, t: Transformation) -> str:
    """Pragma text for ``t`` applied to ``tree`` (the tree before applying)."""
    loops = ",".join(t.targets)
    if t.kind == "tile":
        new = fresh_names(tree, 2 * len(t.targets))
        n = len(t.targets)
        return (
            f"#pragma clang loop({loops}) tile sizes({','.join(map(str, t.sizes))}) "
            f"floor_ids({','.join(new[:n])}) tile_ids({','.join(new[n:])})"
        )
    if t.kind == "interchange":
        new = fresh_names(tree, len(t.targets))
        return f"#pragma clang loop({loops}) interchange permutation({','.join(t.permutation)}) permuted_ids({','.join(new)})"
    return f"#pragma clang loop({loops}) parallelize_thread"


# -- derivation -------------------------------------------------------------


def nest_starts(tree: LoopNode) -> list[LoopNode]:
    """Transformable loops that are not the sole child of a transformable parent."""
    parents = _parent_map(tree)
    out = []
    for n in tree.loops():
        p = parents[n.name]
        if n.transformable and (not p.transformable or len(p.children) != 1):
            out.append(n)
    return out


def perfect_chain(start: LoopNode) -> list[LoopNode]:
    chain = [start]
    while len(chain[-1].children) == 1 and chain[-1].children[0].transformable:
        chain.append(chain[-1].children[0])
    return chain


def _inside_parallel(tree: LoopNode) -> set[str]:
    """Names of loops nested in a non-transformable loop."""
    out: set[str] = set()

    def visit(n: LoopNode, under: bool) -> None:
        for c in n.children:
            if under:
                out.add(c.name)
            visit(c, under or not c.transformable)

    visit(tree, False)
    return out


def candidate_transformations(tree: LoopNode, tile_choices: Sequence[int],
                              max_targets: int = MAX_TARGETS) -> list[Transformation]:
    tiles, swaps, pars = [], [], []
    shadowed = _inside_parallel(tree)
    for start in nest_starts(tree):
        chain = [n.name for n in perfect_chain(start)][:max_targets]
        for k in range(1, len(chain) + 1):
            for sizes in itertools.product(tile_choices, repeat=k):
                tiles.append(Transformation("tile", tuple(chain[:k]), sizes=tuple(sizes)))
        for k in range(2, len(chain) + 1):
            targets = tuple(chain[:k])
            for perm in itertools.permutations(targets):
                if perm != targets:
                    swaps.append(Transformation("interchange", targets, permutation=perm))
        if start.name not in shadowed:
            pars.append(Transformation("parallelize", (start.name,)))
    return tiles + swaps + pars


@dataclass(eq=False)
class TransformStack:
    """Search-tree node: the parent's loop tree plus one more transformation."""

    tree: LoopNode
    parent: TransformStack | None = None
    applied: Transformation | None = None
    pragma: str = ""
    status: Literal["unexplored", "evaluated", "rejected"] = "unexplored"
    metric: float | None = None
    children: list[TransformStack] | None = field(default=None, repr=False)

    @property
    def depth(self) -> int:
        return 0 if self.parent is None else self.parent.depth + 1

    @property
    def root(self) -> TransformStack:
        return self if self.parent is None else self.parent.root

    def pragmas(self) -> list[str]:
        """Pragmas in application order, root first."""
        out = []
        node = self
        while node.parent is not None:
            out.append(node.pragma)
            node = node.parent
        return out[::-1]

    def transformations(self) -> list[Transformation]:
        out = []
        node = self
        while node.parent is not None:
            out.append(node.applied)
            node = node.parent
        return out[::-1]

    def label(self) -> str:
        return "; ".join(self.pragmas()) or BASELINE_LABEL

    def child(self, t: Transformation) -> TransformStack:
        return TransformStack(apply_transform(self.tree, t), self, t, emit_pragma(self.tree, t))


def derive_children(node: TransformStack, tile_choices: Sequence[int] = DEFAULT_TILE_CHOICES,
                    max_depth: int = MAX_STACK_DEPTH, max_targets: int = MAX_TARGETS) -> list[TransformStack]:
    if node.status == "rejected":
        raise ValueError("cannot derive from a rejected node")
    if node.depth >= max_depth:
        return []
    out, seen = [], set()
    for t in candidate_transformations(node.tree, tile_choices, max_targets):
        child = node.child(t)
        key = tuple(child.pragmas())
        if key not in seen:
            seen.add(key)
            out.append(child)
    return out


# -- source instrumentation -------------------------------------------------


def insert_pragmas(source: str, node: TransformStack) -> str:
    """Place the stack's pragmas above the id annotation of each affected top-level loop.

    The last applied transformation is written first, as the compiler
    resolves stacked loop pragmas from the loop outward.
    """
    root_tree = node.root.tree
    top_names = [c.name for c in root_tree.children]
    groups: dict[int, list[str]] = {}
    path = []
    n = node
    while n.parent is not None:
        path.append(n)
        n = n.parent
    for step in reversed(path):
        pos = _top_position(step.parent.tree, step.applied.targets[0])
        groups.setdefault(pos, []).append(step.pragma)
    lines = source.splitlines(keepends=True)
    for pos in sorted(groups, reverse=True):
        name = top_names[pos]
        pat = re.compile(r"^(\s*)#pragma\s+clang\s+loop\s+id\(\s*" + re.escape(name) + r"\s*\)")
        idx = next((i for i, line in enumerate(lines) if pat.match(line)), None)
        if idx is None:
            raise TreeSearchError(f"source has no '#pragma clang loop id({name})' annotation")
        indent = pat.match(lines[idx]).group(1)
        block = [f"{indent}{p}\n" for p in reversed(groups[pos])]
        lines[idx:idx] = block
    return "".join(lines)


def _top_position(tree: LoopNode, name: str) -> int:
    for i, top in enumerate(tree.children):
        if top.find(name) is not None:
            return i
    raise ShapeError(f"loop {name!r} not found")


# -- search -----------------------------------------------------------------


StackEvaluateFn = Callable[[TransformStack], TrialRecord]


@dataclass
class TreeSearchResult:
    state: SearchState
    best: TransformStack
    root: TransformStack
    total: int
    valid: int
    nodes: list[TransformStack]


def tree_search(
    root_tree: LoopNode,
    evaluate: StackEvaluateFn,
    budget: int,
    tile_choices: Sequence[int] = DEFAULT_TILE_CHOICES,
    *,
    seed: int = 0,
    exploit: float = EXPLOIT_PROBABILITY,
    max_depth: int = MAX_STACK_DEPTH,
    max_targets: int = MAX_TARGETS,
    on_trial: Callable[[TransformStack, TrialRecord], None] | None = None,
) -> TreeSearchResult:
    """Epsilon-greedy descent until ``budget`` valid evaluations.

    With probability ``exploit`` an unexplored child of the best node so far
    is tried, otherwise a uniformly random unexplored node of the frontier.
    Compile or run failures reject the node: they count toward the total but
    not toward the valid budget, and their subtrees are never generated.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    state = SearchState()
    root = TransformStack(root_tree)
    evaluated: list[TransformStack] = []
    frontier: list[TransformStack] = []
    valid = 0

    def run(node: TransformStack) -> TrialRecord:
        nonlocal valid
        trial = evaluate(node)
        state.record(trial)
        if trial.status in (Status.COMPILE_FAIL, Status.RUN_FAIL):
            node.status = "rejected"
        else:
            node.status = "evaluated"
            node.metric = trial.metric
            valid += 1
            evaluated.append(node)
            node.children = derive_children(node, tile_choices, max_depth, max_targets)
            frontier.extend(node.children)
        if on_trial is not None:
            on_trial(node, trial)
        return trial

    first = run(root)
    if root.status == "rejected":
        raise TreeSearchError(f"the untransformed source failed ({first.status.value})")

    def best_node() -> TransformStack:
        # earliest of the lowest metric
        return min(enumerate(evaluated), key=lambda p: (p[1].metric, p[0]))[1]

    while valid < budget and frontier:
        pick = None
        if rng.random() < exploit:
            best = best_node()
            open_children = [c for c in best.children or () if c.status == "unexplored"]
            if open_children:
                pick = open_children[int(rng.integers(len(open_children)))]
                frontier.remove(pick)
        if pick is None:
            pick = frontier.pop(int(rng.integers(len(frontier))))
        run(pick)

    return TreeSearchResult(state, best_node(), root, state.executed, valid, evaluated)


def stack_evaluator(evaluator: Evaluator, source: str) -> StackEvaluateFn:
    """Evaluate stacks by instrumenting ``source`` and running it through ``evaluator``."""

    def run(node: TransformStack) -> TrialRecord:
        text = insert_pragmas(source, node)
        label = node.label()
        key = hashlib.sha256(label.encode()).hexdigest()[:16]
        return evaluator.evaluate_source(text, key, Configuration({"pragmas": label}))

    return run
