"""Finite filtered markets with bid-ask processes.

A market is a rooted scenario tree (one atom per node), a trading cone per
node given by a finite generator list, and named claims defined on the leaves.
Everything is exact (``Fraction``) and immutable after construction.
"""

import itertools
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import Any

from . import settings
from .errors import (
    DimensionError,
    ProbabilityError,
    ScenarioSchemaError,
    SizeGuardError,
    TruncationError,
    ValidationError,
)
from .rationals import (
    ONE,
    ZERO,
    Vector,
    add,
    format_rational,
    format_vector,
    neg,
    parse_rational,
    parse_vector,
    scale,
    unit,
    zeros,
)

logger = logging.getLogger(__name__)

SCENARIO_KEYS = {"assets", "horizon", "nodes", "bidask", "generators", "claims", "family"}


@dataclass(frozen=True)
class Node:
    id: int
    time: int
    parent: int | None
    prob: Fraction


@dataclass(frozen=True)
class FiltrationTree:
    """Atoms of F_0, ..., F_T arranged as a rooted tree.

    Leaves are the time-T nodes in increasing id order; that order indexes
    every claim.
    """

    nodes: tuple[Node, ...]
    horizon: int

    @classmethod
    def build(cls, nodes: Iterable[Node], horizon: int) -> "FiltrationTree":
        tree = cls(tuple(sorted(nodes, key=lambda n: n.id)), horizon)
        tree.validate()
        return tree

    def validate(self) -> None:
        if self.horizon < 0:
            raise ValidationError(f"horizon must be >= 0, got {self.horizon}")
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValidationError("node ids must be the dense integers 0..n-1")
        roots = [n for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise ValidationError(f"exactly one root is required, found {len(roots)}")
        root = roots[0]
        if root.time != 0:
            raise ValidationError(f"root {root.id} must be at time 0")
        if root.prob != 1:
            raise ProbabilityError(f"root {root.id} must have probability 1/1")
        for node in self.nodes:
            if node.prob <= 0:
                raise ProbabilityError(f"node {node.id} has nonpositive probability")
            if not 0 <= node.time <= self.horizon:
                raise ValidationError(
                    f"node {node.id} has time {node.time} outside 0..{self.horizon}"
                )
            if node.parent is None:
                continue
            if not 0 <= node.parent < len(self.nodes):
                raise ValidationError(f"node {node.id} has unknown parent {node.parent}")
            if self.nodes[node.parent].time != node.time - 1:
                raise ValidationError(
                    f"node {node.id} at time {node.time} has parent {node.parent} "
                    f"at time {self.nodes[node.parent].time}"
                )
        for node in self.nodes:
            children = self.children[node.id]
            if node.time < self.horizon and not children:
                raise ValidationError(
                    f"node {node.id} at time {node.time} < T has no children"
                )
            if children:
                total = sum((self.nodes[c].prob for c in children), ZERO)
                if total != node.prob:
                    raise ProbabilityError(
                        f"children of node {node.id} sum to {format_rational(total)}, "
                        f"expected {format_rational(node.prob)}"
                    )

    @cached_property
    def children(self) -> dict[int, tuple[int, ...]]:
        children: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for node in self.nodes:
            if node.parent is not None and node.parent in children:
                children[node.parent].append(node.id)
        return {k: tuple(v) for k, v in children.items()}

    @property
    def root(self) -> int:
        return next(n.id for n in self.nodes if n.parent is None)

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.time == self.horizon)

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    @cached_property
    def leaf_position(self) -> dict[int, int]:
        return {leaf: i for i, leaf in enumerate(self.leaves)}

    def nodes_at(self, t: int) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.time == t)

    def prob(self, node: int) -> Fraction:
        return self.nodes[node].prob

    def time(self, node: int) -> int:
        return self.nodes[node].time

    def ancestor(self, node: int, t: int) -> int:
        while self.nodes[node].time > t:
            node = self.nodes[node].parent  # type: ignore[assignment]
        return node

    @cached_property
    def _leaves_below(self) -> dict[int, tuple[int, ...]]:
        below: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for leaf in self.leaves:
            node: int | None = leaf
            while node is not None:
                below[node].append(self.leaf_position[leaf])
                node = self.nodes[node].parent
        return {k: tuple(v) for k, v in below.items()}

    def leaves_below(self, node: int) -> tuple[int, ...]:
        """Positions (in leaf order) of the leaves in the subtree of ``node``."""
        return self._leaves_below[node]


@dataclass(frozen=True)
class BidAskProcess:
    """Per-node exchange matrices: ``matrices[node][i][j]`` is pi^{i+1,j+1}."""

    assets: int
    matrices: Mapping[int, tuple[tuple[Fraction, ...], ...]]

    def at(self, node: int) -> tuple[tuple[Fraction, ...], ...]:
        return self.matrices[node]

    def validate(self, tree: FiltrationTree) -> None:
        missing = [n.id for n in tree.nodes if n.id not in self.matrices]
        if missing:
            raise ValidationError(f"bid-ask matrix missing for nodes {missing}")
        for node, matrix in self.matrices.items():
            _check_shape(matrix, self.assets, node)
            for i in range(self.assets):
                if matrix[i][i] != 1:
                    raise ValidationError(
                        f"π^{{{i + 1},{i + 1}}} ≠ 1 at node {node}: π^{{i,i}}=1 is required"
                    )
            for i, j in itertools.product(range(self.assets), repeat=2):
                if matrix[i][j] <= 0:
                    raise ValidationError(
                        f"π^{{{i + 1},{j + 1}}} must be > 0 at node {node}"
                    )
            if chain := netting_violation(matrix):
                i, k, j = (c + 1 for c in chain)
                raise ValidationError(
                    f"netting violated for chain {i}→{k}→{j} at node {node}"
                )


def _check_shape(matrix: Sequence[Sequence[Fraction]], assets: int, node: int) -> None:
    if len(matrix) != assets or any(len(row) != assets for row in matrix):
        raise ValidationError(f"bid-ask matrix at node {node} must be {assets}x{assets}")


def netting_violation(matrix: Sequence[Sequence[Fraction]]) -> tuple[int, int, int] | None:
    """First chain (i, k, j) with pi^{i,j} > pi^{i,k} pi^{k,j}, if any.

    The two-step inequality for all triples implies it for every longer chain.
    """
    d = len(matrix)
    for i, j, k in itertools.product(range(d), repeat=3):
        if k in (i, j):
            continue
        if matrix[i][j] > matrix[i][k] * matrix[k][j]:
            return i, k, j
    return None


def net_out(matrix: Sequence[Sequence[Fraction]]) -> tuple[tuple[Fraction, ...], ...]:
    """Replace each rate by the cheapest chain (multiplicative Floyd-Warshall)."""
    d = len(matrix)
    rates = [list(row) for row in matrix]
    for k in range(d):
        for i in range(d):
            for j in range(d):
                rates[i][j] = min(rates[i][j], rates[i][k] * rates[k][j])
    if any(rates[i][i] != 1 for i in range(d)):
        raise ValidationError("bid-ask matrix has a round trip cheaper than 1; cannot net out")
    return tuple(tuple(row) for row in rates)


@dataclass(frozen=True)
class TradingConeField:
    """Generator lists of K_t(node), one list per node."""

    assets: int
    generators: Mapping[int, tuple[Vector, ...]]
    labels: Mapping[int, tuple[str, ...]]
    from_bidask: bool = False

    def at(self, node: int) -> tuple[Vector, ...]:
        return self.generators[node]

    def labels_at(self, node: int) -> tuple[str, ...]:
        return self.labels[node]

    @classmethod
    def hand_built(
        cls, assets: int, generators: Mapping[int, Sequence[Vector]]
    ) -> "TradingConeField":
        for node, vectors in generators.items():
            for v in vectors:
                if len(v) != assets:
                    raise DimensionError(
                        f"generator of length {len(v)} at node {node}, expected {assets}"
                    )
        return cls(
            assets,
            {node: tuple(vs) for node, vs in generators.items()},
            {node: tuple(f"g{i}" for i in range(len(vs))) for node, vs in generators.items()},
        )

    def has_disposal(self, node: int) -> bool:
        """Whether every -e_k is literally among the generators at ``node``."""
        present = set(self.generators[node])
        return all(neg(unit(self.assets, k)) in present for k in range(self.assets))


def build_trading_cones(tree: FiltrationTree, bidask: BidAskProcess) -> TradingConeField:
    """Generators e_j - pi^{i,j} e_i for i != j (lexicographic), then -e_1..-e_d."""
    d = bidask.assets
    generators: dict[int, tuple[Vector, ...]] = {}
    labels: dict[int, tuple[str, ...]] = {}
    for node in tree.nodes:
        matrix = bidask.at(node.id)
        vectors: list[Vector] = []
        names: list[str] = []
        for i, j in itertools.product(range(d), repeat=2):
            if i == j:
                continue
            vectors.append(add(unit(d, j), scale(-matrix[i][j], unit(d, i))))
            names.append(f"e{j + 1}-pi{i + 1}{j + 1}*e{i + 1}")
        for k in range(d):
            vectors.append(neg(unit(d, k)))
            names.append(f"-e{k + 1}")
        generators[node.id] = tuple(vectors)
        labels[node.id] = tuple(names)
    return TradingConeField(d, generators, labels, from_bidask=True)


@dataclass(frozen=True)
class Claim:
    """A random portfolio: one vector in Q^d per leaf, in leaf order."""

    values: tuple[Vector, ...]

    @property
    def assets(self) -> int:
        return len(self.values[0]) if self.values else 0

    @property
    def leaves(self) -> int:
        return len(self.values)

    def flat(self) -> Vector:
        return tuple(itertools.chain.from_iterable(self.values))

    @classmethod
    def from_flat(cls, flat: Sequence[Fraction], assets: int) -> "Claim":
        if assets < 1 or len(flat) % assets:
            raise DimensionError(f"flat vector of length {len(flat)} for {assets} assets")
        return cls(tuple(tuple(flat[i : i + assets]) for i in range(0, len(flat), assets)))

    @classmethod
    def zero(cls, assets: int, leaves: int) -> "Claim":
        return cls((zeros(assets),) * leaves)

    @classmethod
    def constant(cls, vector: Vector, leaves: int) -> "Claim":
        return cls((tuple(vector),) * leaves)

    def plus(self, other: "Claim") -> "Claim":
        return Claim(tuple(add(a, b) for a, b in zip(self.values, other.values, strict=True)))

    def minus(self, other: "Claim") -> "Claim":
        return self.plus(other.scaled(Fraction(-1)))

    def scaled(self, c: Fraction) -> "Claim":
        return Claim(tuple(scale(c, v) for v in self.values))

    def restricted(self, positions: Iterable[int]) -> "Claim":
        """The claim times the indicator of the given leaf positions."""
        keep = set(positions)
        zero = zeros(self.assets)
        return Claim(tuple(v if i in keep else zero for i, v in enumerate(self.values)))

    def is_zero(self) -> bool:
        return not any(any(v) for v in self.values)


def check_claim(claim: Claim, tree: FiltrationTree, assets: int, name: str = "claim") -> None:
    if claim.leaves != tree.leaf_count:
        raise DimensionError(
            f"{name} has {claim.leaves} leaf vectors, market has {tree.leaf_count} leaves"
        )
    if any(len(v) != assets for v in claim.values):
        raise DimensionError(f"{name} vectors must have length {assets}")


@dataclass(frozen=True)
class HedgingStrategy:
    """Adapted legs: ``legs[t]`` maps every time-t node to a vector in Q^d."""

    legs: tuple[Mapping[int, Vector], ...]

    def leg_claim(self, tree: FiltrationTree, t: int) -> Claim:
        assets = len(next(iter(self.legs[t].values())))
        values: list[Vector] = [zeros(assets)] * tree.leaf_count
        for node, vector in self.legs[t].items():
            for position in tree.leaves_below(node):
                values[position] = vector
        return Claim(tuple(values))

    def partial_sum(self, tree: FiltrationTree, t: int) -> dict[int, Vector]:
        """X_t(node) = sum of legs at times <= t along the path to ``node``."""
        totals: dict[int, Vector] = {}
        for node in tree.nodes_at(t):
            total = self.legs[t][node]
            for s in range(t):
                total = add(total, self.legs[s][tree.ancestor(node, s)])
            totals[node] = total
        return totals

    def total(self, tree: FiltrationTree) -> Claim:
        total = self.leg_claim(tree, 0)
        for t in range(1, len(self.legs)):
            total = total.plus(self.leg_claim(tree, t))
        return total


@dataclass(frozen=True)
class Market:
    tree: FiltrationTree
    assets: int
    cones: TradingConeField
    bidask: BidAskProcess | None = None
    claims: Mapping[str, Claim] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.tree.horizon

    def claim(self, name: str) -> Claim:
        if name == "zero" and name not in self.claims:
            return Claim.zero(self.assets, self.tree.leaf_count)
        try:
            return self.claims[name]
        except KeyError as e:
            raise ValidationError(
                f"unknown claim '{name}'; scenario defines {sorted(self.claims)}"
            ) from e

    def with_cones(self, cones: TradingConeField) -> "Market":
        return replace(self, cones=cones, bidask=None)

    def with_claims(self, claims: Mapping[str, Claim]) -> "Market":
        return replace(self, claims={**self.claims, **claims})

    def digest(self) -> dict[str, int]:
        return {
            "assets": self.assets,
            "horizon": self.horizon,
            "nodes": len(self.tree.nodes),
            "leaves": self.tree.leaf_count,
        }


def _require(document: Mapping[str, Any], key: str) -> Any:
    try:
        return document[key]
    except KeyError as e:
        raise ScenarioSchemaError(f"scenario field '{key}' is required") from e


def _parse(value: Any, where: str) -> Fraction:
    try:
        return parse_rational(value)
    except ValueError as e:
        raise ScenarioSchemaError(f"{where}: {e}") from e


def _parse_vector(values: Any, assets: int, where: str) -> Vector:
    if not isinstance(values, list):
        raise ScenarioSchemaError(f"{where}: expected a list of {assets} rationals")
    try:
        return parse_vector(values, assets)
    except ValueError as e:
        raise ScenarioSchemaError(f"{where}: {e}") from e


def _parse_int(document: Mapping[str, Any], key: str) -> int:
    value = _require(document, key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ScenarioSchemaError(f"scenario field '{key}' must be an integer")
    return value


def parse_claim(entries: Any, tree: FiltrationTree, assets: int, name: str) -> Claim:
    """Parse ``{leaf-id: d-vector}``; every leaf must be present."""
    if not isinstance(entries, Mapping):
        raise ScenarioSchemaError(f"claim '{name}' must map leaf ids to vectors")
    values: list[Vector | None] = [None] * tree.leaf_count
    for key, vector in entries.items():
        try:
            leaf = int(key)
        except ValueError as e:
            raise ScenarioSchemaError(f"claim '{name}': bad leaf id {key!r}") from e
        if leaf not in tree.leaf_position:
            raise ValidationError(f"claim '{name}': node {leaf} is not a leaf")
        values[tree.leaf_position[leaf]] = _parse_vector(
            vector, assets, f"claim '{name}' leaf {leaf}"
        )
    missing = [tree.leaves[i] for i, v in enumerate(values) if v is None]
    if missing:
        raise ValidationError(f"claim '{name}' is not defined on leaves {missing}")
    return Claim(tuple(v for v in values if v is not None))


def load_scenario(text: str, *, repair: bool | None = None) -> Market:
    """Parse and validate a scenario document.

    Args:
        text: the JSON document.
        repair: net out bid-ask chains instead of rejecting them; defaults to
            the CONIC_CLAIMS_REPAIR_NETTING setting.

    Returns:
        The validated Market, cones built from the bid-asks when given.

    Raises:
        ScenarioSchemaError: malformed document.
        ValidationError: a market invariant does not hold.
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioSchemaError(f"scenario is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ScenarioSchemaError("scenario must be a JSON object")
    if unknown := set(document) - SCENARIO_KEYS:
        raise ScenarioSchemaError(f"unknown scenario fields {sorted(unknown)}")
    if repair is None:
        repair = settings.repair_netting()

    if "family" in document:
        family = document["family"]
        if not isinstance(family, Mapping):
            raise ScenarioSchemaError("'family' must be an object with 'k' and 'N'")
        k = _parse(_require(family, "k"), "family.k")
        outcomes = _parse_int(family, "N")
        return build_two_asset_family(k, outcomes)

    assets = _parse_int(document, "assets")
    horizon = _parse_int(document, "horizon")
    if assets < 1:
        raise ValidationError("a market needs at least one asset")

    raw_nodes = _require(document, "nodes")
    if not isinstance(raw_nodes, list):
        raise ScenarioSchemaError("'nodes' must be a list")
    nodes = []
    for entry in raw_nodes:
        if not isinstance(entry, Mapping):
            raise ScenarioSchemaError("every node must be an object")
        parent = entry.get("parent")
        if parent is not None and not isinstance(parent, int):
            raise ScenarioSchemaError(f"node parent must be an integer or null: {entry}")
        nodes.append(
            Node(
                _parse_int(entry, "id"),
                _parse_int(entry, "time"),
                parent,
                _parse(_require(entry, "prob"), f"node {entry.get('id')} prob"),
            )
        )
    tree = FiltrationTree.build(nodes, horizon)

    bidask: BidAskProcess | None = None
    if "bidask" in document:
        raw = document["bidask"]
        if not isinstance(raw, Mapping):
            raise ScenarioSchemaError("'bidask' must map node ids to matrices")
        matrices = {}
        for key, rows in raw.items():
            node = int(key)
            if not isinstance(rows, list) or len(rows) != assets:
                raise ValidationError(f"bid-ask matrix at node {node} must be {assets}x{assets}")
            matrix = tuple(
                _parse_vector(row, assets, f"bidask node {node}") for row in rows
            )
            if repair and netting_violation(matrix):
                logger.warning(f"netting repaired by chain-minima at node {node}")
                matrix = net_out(matrix)
            matrices[node] = matrix
        bidask = BidAskProcess(assets, matrices)
        bidask.validate(tree)
        cones = build_trading_cones(tree, bidask)
    elif "generators" in document:
        raw = document["generators"]
        if not isinstance(raw, Mapping):
            raise ScenarioSchemaError("'generators' must map node ids to vector lists")
        generators = {}
        for key, vectors in raw.items():
            if not isinstance(vectors, list):
                raise ScenarioSchemaError(f"generators of node {key} must be a list of vectors")
            generators[int(key)] = [
                _parse_vector(v, assets, f"generators node {key}") for v in vectors
            ]
        missing = [n.id for n in tree.nodes if n.id not in generators]
        if missing:
            raise ValidationError(f"generator list missing for nodes {missing}")
        cones = TradingConeField.hand_built(assets, generators)
    else:
        raise ScenarioSchemaError("scenario needs 'bidask' or 'generators'")

    raw_claims = document.get("claims", {})
    if not isinstance(raw_claims, Mapping):
        raise ScenarioSchemaError("'claims' must map claim names to {leaf: vector} maps")
    claims = {
        name: parse_claim(entries, tree, assets, name) for name, entries in raw_claims.items()
    }
    market = Market(tree, assets, cones, bidask, claims)
    logger.info(
        f"loaded market with {assets} assets, horizon {horizon}, "
        f"{len(tree.nodes)} nodes and {tree.leaf_count} leaves"
    )
    return market


def scenario_document(market: Market) -> dict[str, Any]:
    tree = market.tree
    document: dict[str, Any] = {
        "assets": market.assets,
        "horizon": market.horizon,
        "nodes": [
            {
                "id": n.id,
                "time": n.time,
                "parent": n.parent,
                "prob": format_rational(n.prob),
            }
            for n in tree.nodes
        ],
    }
    if market.bidask is not None:
        document["bidask"] = {
            str(node): [format_vector(row) for row in market.bidask.at(node)]
            for node in sorted(market.bidask.matrices)
        }
    else:
        document["generators"] = {
            str(node): [format_vector(v) for v in market.cones.at(node)]
            for node in sorted(market.cones.generators)
        }
    document["claims"] = {
        name: {
            str(leaf): format_vector(claim.values[i]) for i, leaf in enumerate(tree.leaves)
        }
        for name, claim in market.claims.items()
    }
    return document


def dump_scenario(market: Market) -> str:
    return json.dumps(scenario_document(market), indent=2)


def build_two_asset_family(k: Fraction, outcomes: int) -> Market:
    """The two-asset, one-period market on Omega_N = {1..N}.

    P(omega) is proportional to 2^-omega. At time 0 one unit of asset 2 costs
    1 unit of asset 1 and sells for 1/k; at time 1 it costs k and sells for
    1/2. Claims: ``theta`` with theta(omega) = (-(1 - 1/(2 omega)), 1 - 1/omega),
    its first leg ``e2_minus_e1`` and ``zero``.
    """
    k = Fraction(k)
    if outcomes < 1:
        raise ValidationError(f"N must be >= 1, got {outcomes}")
    total = 2**outcomes - 1
    nodes = [Node(0, 0, None, ONE)]
    nodes += [Node(w, 1, 0, Fraction(2 ** (outcomes - w), total)) for w in range(1, outcomes + 1)]
    tree = FiltrationTree.build(nodes, 1)
    before = ((ONE, ONE), (k, ONE))
    after = ((ONE, k), (Fraction(2), ONE))
    bidask = BidAskProcess(
        2, {0: before, **{w: after for w in range(1, outcomes + 1)}}
    )
    bidask.validate(tree)
    claims = {
        "theta": Claim(
            tuple(
                (-(1 - Fraction(1, 2 * w)), 1 - Fraction(1, w))
                for w in range(1, outcomes + 1)
            )
        ),
        "e2_minus_e1": Claim.constant((Fraction(-1), ONE), outcomes),
        "zero": Claim.zero(2, outcomes),
    }
    return Market(tree, 2, build_trading_cones(tree, bidask), bidask, claims)


@dataclass(frozen=True)
class TruncationSets:
    """Events G_1..G_T, each a set of node ids at that time."""

    events: Mapping[int, frozenset[int]]

    @classmethod
    def everything(cls, tree: FiltrationTree) -> "TruncationSets":
        return cls({t: frozenset(tree.nodes_at(t)) for t in range(1, tree.horizon + 1)})

    @classmethod
    def from_events(
        cls, tree: FiltrationTree, events: Mapping[int, Iterable[int]]
    ) -> "TruncationSets":
        """Build from leaf-position events; each must be a union of time-t atoms."""
        sets: dict[int, frozenset[int]] = {}
        for t in range(1, tree.horizon + 1):
            positions = set(events.get(t, range(tree.leaf_count)))
            chosen = set()
            for node in tree.nodes_at(t):
                below = set(tree.leaves_below(node))
                if below <= positions:
                    chosen.add(node)
                elif below & positions:
                    raise TruncationError(
                        f"G_{t} is not F_{t}-measurable: it splits the atom of node {node}"
                    )
            sets[t] = frozenset(chosen)
        return cls(sets)

    def validate(self, tree: FiltrationTree) -> None:
        for t, nodes in self.events.items():
            if not 1 <= t <= tree.horizon:
                raise TruncationError(f"truncation event for time {t} outside 1..T")
            if stray := [n for n in nodes if tree.time(n) != t]:
                raise TruncationError(f"G_{t} contains nodes {stray} not at time {t}")

    def event(self, tree: FiltrationTree, t: int) -> frozenset[int]:
        return self.events.get(t, frozenset(tree.nodes_at(t)))

    def survivors(self, tree: FiltrationTree, t: int) -> frozenset[int]:
        """Time-t nodes in H_t = G_1 ∩ ... ∩ G_t."""
        return frozenset(
            node
            for node in tree.nodes_at(t)
            if all(tree.ancestor(node, s) in self.event(tree, s) for s in range(1, t + 1))
        )

    def complement_probability(self, tree: FiltrationTree, t: int) -> Fraction:
        chosen = self.event(tree, t)
        return sum((tree.prob(n) for n in tree.nodes_at(t) if n not in chosen), ZERO)


def truncated_geometric_weight(k: int, branching: int) -> Fraction:
    """2^-k / (1 - 2^-M) for k in 1..M."""
    return Fraction(2 ** (branching - k), 2**branching - 1)


def tail_probability(n: int, branching: int) -> Fraction:
    """Mass of {k > n} under the truncated geometric law on 1..M."""
    return sum(
        (truncated_geometric_weight(k, branching) for k in range(n + 1, branching + 1)),
        ZERO,
    )


@dataclass(frozen=True)
class RandomizedMarket:
    """The base market times independent truncated-geometric draws k_t in 1..M.

    Product node ids are assigned breadth-first; ``projection`` maps each to
    its base node and ``coordinates`` records (k_1, ..., k_t).
    """

    base: Market
    branching: int
    market: Market
    projection: Mapping[int, int]
    coordinates: Mapping[int, tuple[int, ...]]
    truncation: TruncationSets
    n: int

    def truncation_sets(self, n: int) -> TruncationSets:
        if not 1 <= n <= self.branching:
            raise ValidationError(f"truncation index must be in 1..{self.branching}, got {n}")
        tree = self.market.tree
        return TruncationSets(
            {
                t: frozenset(
                    node for node in tree.nodes_at(t) if self.coordinates[node][t - 1] <= n
                )
                for t in range(1, tree.horizon + 1)
            }
        )

    def lift_claim(self, claim: Claim) -> Claim:
        base_position = self.base.tree.leaf_position
        return Claim(
            tuple(
                claim.values[base_position[self.projection[leaf]]]
                for leaf in self.market.tree.leaves
            )
        )

    def lift_strategy(self, strategy: HedgingStrategy) -> HedgingStrategy:
        tree = self.market.tree
        return HedgingStrategy(
            tuple(
                {node: strategy.legs[t][self.projection[node]] for node in tree.nodes_at(t)}
                for t in range(len(strategy.legs))
            )
        )


def randomize_market(market: Market, branching: int, n: int) -> RandomizedMarket:
    """Product of ``market`` with a truncated geometric coordinate per period.

    Raises:
        SizeGuardError: if L * M^T exceeds the configured node budget.
    """
    if branching < 1:
        raise ValidationError(f"branching M must be >= 1, got {branching}")
    if not 1 <= n <= branching:
        raise ValidationError(f"truncation index n must be in 1..{branching}, got {n}")
    base = market.tree
    size = base.leaf_count * branching**base.horizon
    if size > (budget := settings.node_budget()):
        raise SizeGuardError(
            f"randomized tree would have {size} leaves, budget is {budget}"
        )

    nodes = [Node(0, 0, None, ONE)]
    projection = {0: base.root}
    coordinates: dict[int, tuple[int, ...]] = {0: ()}
    frontier = [0]
    for _ in range(base.horizon):
        next_frontier = []
        for parent in frontier:
            base_parent = projection[parent]
            for child in base.children[base_parent]:
                conditional = base.prob(child) / base.prob(base_parent)
                for k in range(1, branching + 1):
                    node_id = len(nodes)
                    prob = nodes[parent].prob * conditional * truncated_geometric_weight(k, branching)
                    nodes.append(Node(node_id, nodes[parent].time + 1, parent, prob))
                    projection[node_id] = child
                    coordinates[node_id] = (*coordinates[parent], k)
                    next_frontier.append(node_id)
        frontier = next_frontier
    tree = FiltrationTree.build(nodes, base.horizon)

    cones = market.cones
    product_cones = TradingConeField(
        cones.assets,
        {node: cones.at(projection[node]) for node in projection},
        {node: cones.labels_at(projection[node]) for node in projection},
        from_bidask=cones.from_bidask,
    )
    bidask = None
    if market.bidask is not None:
        bidask = BidAskProcess(
            market.assets, {node: market.bidask.at(projection[node]) for node in projection}
        )
    product = Market(tree, market.assets, product_cones, bidask)
    randomized = RandomizedMarket(
        market,
        branching,
        product,
        projection,
        coordinates,
        TruncationSets({}),
        n,
    )
    claims = {name: randomized.lift_claim(c) for name, c in market.claims.items()}
    randomized = replace(
        randomized,
        market=replace(product, claims=claims),
        truncation=randomized.truncation_sets(n),
    )
    logger.info(
        f"randomized market: M={branching}, n={n}, {tree.leaf_count} leaves "
        f"from {base.leaf_count}"
    )
    return randomized
