"""Constrained parameter spaces of categorical and ordinal choices.

A space holds named parameters, parent/child activation conditions and
forbidden clauses.  Configurations map every parameter name to a value or to
the :data:`INACTIVE` marker (a conditional child whose parent is not set to a
triggering value).
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

# Exact cardinality is computed by enumeration up to this many raw states.
ENUMERATION_BOUND = 1_000_000
# The sampler enumerates every valid configuration up front below this size.
SAMPLER_ENUMERATION_BOUND = 100_000


class _Inactive:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INACTIVE"

    def __reduce__(self):
        return (_Inactive, ())


INACTIVE = _Inactive()


class SpaceError(ValueError):
    """A space definition breaks one of its structural invariants."""


class UnknownParameterError(KeyError):
    """A configuration names a parameter the space does not define."""


class EmptySpaceError(RuntimeError):
    """The space has no valid configuration at all."""


@dataclass(frozen=True)
class Parameter:
    name: str
    kind: Literal["categorical", "ordinal"]
    values: tuple[str, ...]
    default: str | None = None  # None means the first value

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(self.values))
        if self.default is None and self.values:
            object.__setattr__(self, "default", self.values[0])
        if self.kind not in ("categorical", "ordinal"):
            raise SpaceError(f"{self.name}: unknown kind {self.kind!r}")
        if not self.values:
            raise SpaceError(f"{self.name}: empty value list")
        if len(set(self.values)) != len(self.values):
            raise SpaceError(f"{self.name}: duplicate values")
        for v in self.values:
            if not isinstance(v, str) or v == "":
                # "" is reserved for INACTIVE in templates and CSV output
                raise SpaceError(f"{self.name}: values must be non-empty strings, got {v!r}")
            if "\x00" in v or "\r" in v:
                # neither survives a round trip through results.csv
                raise SpaceError(f"{self.name}: value {v!r} contains NUL or carriage return")
        if self.default not in self.values:
            raise SpaceError(f"{self.name}: default {self.default!r} not among values")

    def index(self, value: str) -> int:
        return self.values.index(value)


@dataclass(frozen=True)
class ActivationCondition:
    """``child`` is active only while ``parent`` takes one of ``when``."""

    child: str
    parent: str
    when: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "when", frozenset(self.when))
        if not self.when:
            raise SpaceError(f"condition on {self.child}: empty triggering values")
        if self.child == self.parent:
            raise SpaceError(f"condition on {self.child}: child equals parent")


@dataclass(frozen=True)
class ForbiddenClause:
    assignments: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        items = self.assignments
        if isinstance(items, Mapping):
            items = items.items()
        object.__setattr__(self, "assignments", tuple(sorted(items)))
        if not self.assignments:
            raise SpaceError("forbidden clause with no assignments")

    def matches(self, cfg: Mapping[str, object]) -> bool:
        return all(cfg.get(name) == value for name, value in self.assignments)

    def __str__(self) -> str:
        return " && ".join(f"{n}={v!r}" for n, v in self.assignments)


class Configuration(Mapping):
    """Immutable, hashable assignment of parameter name to value or INACTIVE."""

    __slots__ = ("_items", "_dict", "_hash")

    def __init__(self, assignment: Mapping[str, object] | Iterable[tuple[str, object]]):
        items = assignment.items() if isinstance(assignment, Mapping) else assignment
        self._dict = dict(items)
        self._items = tuple(self._dict.items())
        self._hash = hash(frozenset(self._items))

    def __getitem__(self, key: str) -> object:
        return self._dict[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._dict)

    def __len__(self) -> int:
        return len(self._dict)

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Configuration):
            return self._dict == other._dict
        if isinstance(other, Mapping):
            return self._dict == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"Configuration({self._dict!r})"

    def to_json(self) -> dict[str, str | None]:
        return {k: (None if v is INACTIVE else v) for k, v in self._items}

    @classmethod
    def from_json(cls, data: Mapping[str, str | None]) -> Configuration:
        return cls({k: (INACTIVE if v is None else v) for k, v in data.items()})


@dataclass(frozen=True)
class Violation:
    kind: Literal["missing", "domain", "condition", "forbidden"]
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


@dataclass(frozen=True)
class Verdict:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class Cardinality:
    """Both counts of a space.

    ``product`` multiplies the domain sizes and ignores conditions and
    forbidden clauses.  ``exact`` counts distinct valid configurations when the
    product is within :data:`ENUMERATION_BOUND`; otherwise it equals the
    product and ``exact_is_bound`` is set.
    """

    product: int
    exact: int
    exact_is_bound: bool

    def __int__(self) -> int:
        return self.product


@dataclass(frozen=True)
class ParamSpace:
    parameters: tuple[Parameter, ...]
    conditions: tuple[ActivationCondition, ...] = ()
    forbidden: tuple[ForbiddenClause, ...] = ()
    seed: int = 0
    _by_name: dict[str, Parameter] = field(init=False, repr=False, compare=False)
    _parent_of: dict[str, ActivationCondition] = field(init=False, repr=False, compare=False)
    _order: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "parameters", tuple(self.parameters))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "forbidden", tuple(self.forbidden))
        if self.seed < 0:
            raise SpaceError("seed must be non-negative")
        by_name = {}
        for p in self.parameters:
            if p.name in by_name:
                raise SpaceError(f"duplicate parameter name {p.name!r}")
            by_name[p.name] = p
        parent_of = {}
        for c in self.conditions:
            for name in (c.child, c.parent):
                if name not in by_name:
                    raise SpaceError(f"condition references unknown parameter {name!r}")
            if c.child in parent_of:
                raise SpaceError(f"{c.child} is the child of more than one condition")
            unknown = c.when - set(by_name[c.parent].values)
            if unknown:
                raise SpaceError(f"condition on {c.child}: {sorted(unknown)} not values of {c.parent}")
            parent_of[c.child] = c
        for clause in self.forbidden:
            for name, value in clause.assignments:
                if name not in by_name:
                    raise SpaceError(f"forbidden clause references unknown parameter {name!r}")
                if value not in by_name[name].values:
                    raise SpaceError(f"forbidden clause: {value!r} is not a value of {name}")
        object.__setattr__(self, "_by_name", by_name)
        object.__setattr__(self, "_parent_of", parent_of)
        object.__setattr__(self, "_order", _topological_order(self.names, parent_of))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    def __getitem__(self, name: str) -> Parameter:
        return self._by_name[name]

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self.parameters)

    def is_conditional(self, name: str) -> bool:
        return name in self._parent_of

    def condition_for(self, name: str) -> ActivationCondition | None:
        return self._parent_of.get(name)

    def default_configuration(self) -> Configuration:
        return self.resolve({p.name: p.default for p in self.parameters})

    def resolve(self, raw: Mapping[str, str]) -> Configuration:
        """Turn a full raw assignment into a configuration, deactivating children."""
        out = dict(raw)
        for name in self._order:
            cond = self._parent_of.get(name)
            if cond is not None:
                pv = out[cond.parent]
                if pv is INACTIVE or pv not in cond.when:
                    out[name] = INACTIVE
        return Configuration((p.name, out[p.name]) for p in self.parameters)

    # -- (de)serialization -------------------------------------------------

    @classmethod
    def from_dict(cls, data: Mapping) -> ParamSpace:
        try:
            params = [
                Parameter(
                    name=p["name"],
                    kind=p["kind"],
                    values=tuple(p["values"]),
                    default=p.get("default", p["values"][0] if p["values"] else None),
                )
                for p in data["parameters"]
            ]
            conds = [
                ActivationCondition(c["child"], c["parent"], frozenset(c["when"]))
                for c in data.get("conditions", [])
            ]
            forb = [ForbiddenClause(tuple(f.items())) for f in data.get("forbidden", [])]
        except (KeyError, TypeError, IndexError) as exc:
            raise SpaceError(f"malformed space definition: {exc!r}") from exc
        return cls(tuple(params), tuple(conds), tuple(forb), int(data.get("seed", 0)))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "parameters": [
                {"name": p.name, "kind": p.kind, "values": list(p.values), "default": p.default}
                for p in self.parameters
            ],
            "conditions": [
                {
                    "child": c.child,
                    "parent": c.parent,
                    # keep the parent's declaration order for stable output
                    "when": [v for v in self[c.parent].values if v in c.when],
                }
                for c in self.conditions
            ],
            "forbidden": [dict(f.assignments) for f in self.forbidden],
        }


def _topological_order(names: tuple[str, ...], parent_of: Mapping[str, ActivationCondition]) -> tuple[str, ...]:
    order: list[str] = []
    state: dict[str, int] = {}

    def visit(n: str) -> None:
        mark = state.get(n)
        if mark == 2:
            return
        if mark == 1:
            raise SpaceError(f"cycle in conditions through {n!r}")
        state[n] = 1
        cond = parent_of.get(n)
        if cond is not None:
            visit(cond.parent)
        state[n] = 2
        order.append(n)

    for n in names:
        visit(n)
    return tuple(order)


def load_space(path: str | Path) -> ParamSpace:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpaceError(f"{path}: not valid JSON ({exc})") from exc
    return ParamSpace.from_dict(data)


def save_space(space: ParamSpace, path: str | Path) -> None:
    Path(path).write_text(json.dumps(space.to_dict(), indent=2) + "\n")


# -- validation -------------------------------------------------------------


def validate(space: ParamSpace, cfg: Mapping[str, object]) -> Verdict:
    """Check every configuration invariant; unknown names raise instead."""
    unknown = [k for k in cfg if k not in space]
    if unknown:
        raise UnknownParameterError(f"unknown parameter(s): {', '.join(map(str, unknown))}")
    violations: list[Violation] = []
    for p in space.parameters:
        if p.name not in cfg:
            violations.append(Violation("missing", p.name, f"{p.name} has no assignment"))
            continue
        v = cfg[p.name]
        cond = space.condition_for(p.name)
        if cond is not None:
            pv = cfg.get(cond.parent)
            should_be_active = pv is not INACTIVE and pv in cond.when
            if should_be_active and v is INACTIVE:
                violations.append(
                    Violation("condition", p.name, f"{p.name} is INACTIVE but {cond.parent}={pv!r} activates it")
                )
                continue
            if not should_be_active and v is not INACTIVE:
                violations.append(
                    Violation("condition", p.name, f"{p.name} must be INACTIVE while {cond.parent}={pv!r}")
                )
                continue
        elif v is INACTIVE:
            violations.append(Violation("condition", p.name, f"{p.name} is unconditional but INACTIVE"))
            continue
        if v is not INACTIVE and v not in p.values:
            violations.append(Violation("domain", p.name, f"{v!r} is not a value of {p.name}"))
    for clause in space.forbidden:
        if clause.matches(cfg):
            violations.append(Violation("forbidden", str(clause), f"forbidden clause matched: {clause}"))
    return Verdict(tuple(violations))


# -- enumeration ------------------------------------------------------------


def domain_product(space: ParamSpace) -> int:
    return math.prod(len(p.values) for p in space.parameters)


def _valid_index_matrix(space: ParamSpace) -> np.ndarray:
    """All distinct valid configurations as value indices, -1 for INACTIVE.

    Rows come out in lexicographic order of the index tuples.
    """
    sizes = [len(p.values) for p in space.parameters]
    col = {p.name: i for i, p in enumerate(space.parameters)}
    grids = np.indices(sizes, dtype=np.int32).reshape(len(sizes), -1).T.copy()
    for name in space._order:
        cond = space.condition_for(name)
        if cond is None:
            continue
        parent = space[cond.parent]
        trig = np.array([parent.index(v) for v in cond.when], dtype=np.int32)
        off = ~np.isin(grids[:, col[cond.parent]], trig)
        grids[off, col[name]] = -1
    keep = np.ones(len(grids), dtype=bool)
    for clause in space.forbidden:
        hit = np.ones(len(grids), dtype=bool)
        for name, value in clause.assignments:
            hit &= grids[:, col[name]] == space[name].index(value)
        keep &= ~hit
    return np.unique(grids[keep], axis=0)


def _config_from_indices(space: ParamSpace, row: Iterable[int]) -> Configuration:
    return Configuration(
        (p.name, INACTIVE if i < 0 else p.values[i]) for p, i in zip(space.parameters, row)
    )


def enumerate_valid(space: ParamSpace) -> list[Configuration]:
    if domain_product(space) > ENUMERATION_BOUND:
        raise SpaceError("space too large to enumerate")
    return [_config_from_indices(space, row) for row in _valid_index_matrix(space).tolist()]


def cardinality(space: ParamSpace) -> Cardinality:
    product = domain_product(space)
    if product > ENUMERATION_BOUND:
        return Cardinality(product=product, exact=product, exact_is_bound=True)
    return Cardinality(product=product, exact=len(_valid_index_matrix(space)), exact_is_bound=False)


# -- sampling ---------------------------------------------------------------


class Sampler:
    """Seeded sampler of valid configurations.

    Small spaces are enumerated once and sampled uniformly over distinct valid
    configurations; larger ones use rejection sampling over raw draws.
    """

    def __init__(self, space: ParamSpace, seed: int | None = None, max_tries_per_sample: int = 200):
        self.space = space
        self.seed = space.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.max_tries_per_sample = max_tries_per_sample
        self._pool: list[Configuration] | None = None
        if domain_product(space) <= SAMPLER_ENUMERATION_BOUND:
            self._pool = enumerate_valid(space)
            if not self._pool:
                raise EmptySpaceError("space has no valid configuration")

    def draw(self) -> Configuration | None:
        """One raw draw, resolved; None when it hits a forbidden clause."""
        raw = {p.name: p.values[self.rng.integers(len(p.values))] for p in self.space.parameters}
        cfg = self.space.resolve(raw)
        if any(c.matches(cfg) for c in self.space.forbidden):
            return None
        return cfg

    def sample(self, count: int, exclude: Iterable[Configuration] = ()) -> list[Configuration]:
        if count < 1:
            raise ValueError("count must be >= 1")
        exclude = exclude if isinstance(exclude, (set, frozenset)) else set(exclude)
        if self._pool is not None:
            remaining = [c for c in self._pool if c not in exclude]
            if len(remaining) <= count:
                order = self.rng.permutation(len(remaining))
            else:
                order = self.rng.choice(len(remaining), size=count, replace=False)
            return [remaining[i] for i in order]

        out: list[Configuration] = []
        seen: set[Configuration] = set()
        budget = self.max_tries_per_sample * count
        misses = 0
        while len(out) < count and misses < budget:
            cfg = self.draw()
            if cfg is None or cfg in exclude or cfg in seen:
                misses += 1
                continue
            seen.add(cfg)
            out.append(cfg)
        if not out and misses >= budget and not exclude:
            raise EmptySpaceError("no valid configuration found by rejection sampling")
        return out


def sample(space: ParamSpace, count: int, exclude: Iterable[Configuration] = (), seed: int | None = None) -> list[Configuration]:
    """Convenience one-shot sample from a freshly seeded sampler."""
    return Sampler(space, seed).sample(count, exclude)


# -- encoding ---------------------------------------------------------------

Scheme = Literal["tree", "gp"]


def encoded_length(space: ParamSpace, scheme: Scheme) -> int:
    if scheme == "tree":
        return len(space)
    n = 0
    for p in space.parameters:
        n += len(p.values) if p.kind == "categorical" else 1
        n += space.is_conditional(p.name)
    return n


def encode(space: ParamSpace, cfg: Mapping[str, object], scheme: Scheme = "tree", check: bool = True) -> np.ndarray:
    if check:
        verdict = validate(space, cfg)
        if not verdict:
            raise SpaceError(f"cannot encode invalid configuration: {verdict.violations[0]}")
    if scheme == "tree":
        return np.array(
            [-1.0 if cfg[p.name] is INACTIVE else float(p.index(cfg[p.name])) for p in space.parameters]
        )
    if scheme != "gp":
        raise ValueError(f"unknown scheme {scheme!r}")
    out: list[float] = []
    for p in space.parameters:
        v = cfg[p.name]
        if p.kind == "categorical":
            block = [0.0] * len(p.values)
            if v is not INACTIVE:
                block[p.index(v)] = 1.0
        else:
            span = max(len(p.values) - 1, 1)
            block = [0.0 if v is INACTIVE else p.index(v) / span]
        out.extend(block)
        if space.is_conditional(p.name):
            out.append(0.0 if v is INACTIVE else 1.0)
    return np.array(out)


def encode_many(space: ParamSpace, cfgs: Iterable[Mapping[str, object]], scheme: Scheme = "tree") -> np.ndarray:
    rows = [encode(space, c, scheme, check=False) for c in cfgs]
    if not rows:
        return np.empty((0, encoded_length(space, scheme)))
    return np.vstack(rows)


def decode(space: ParamSpace, vec: np.ndarray, scheme: Scheme = "tree") -> Configuration:
    vec = np.asarray(vec, dtype=float)
    if len(vec) != encoded_length(space, scheme):
        raise ValueError("vector length does not match the space")
    items = []
    if scheme == "tree":
        for p, x in zip(space.parameters, vec):
            i = int(round(x))
            items.append((p.name, INACTIVE if i < 0 else p.values[i]))
        return Configuration(items)
    pos = 0
    for p in space.parameters:
        if p.kind == "categorical":
            block = vec[pos : pos + len(p.values)]
            pos += len(p.values)
            value = p.values[int(np.argmax(block))] if block.max() > 0.5 else INACTIVE
        else:
            span = max(len(p.values) - 1, 1)
            value = p.values[int(round(vec[pos] * span))]
            pos += 1
        if space.is_conditional(p.name):
            if vec[pos] < 0.5:
                value = INACTIVE
            pos += 1
        items.append((p.name, value))
    return Configuration(items)


def iter_raw_assignments(space: ParamSpace) -> Iterator[dict[str, str]]:
    """Every raw assignment in the domain product (no conditions applied)."""
    for combo in itertools.product(*(p.values for p in space.parameters)):
        yield dict(zip(space.names, combo))
