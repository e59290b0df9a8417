"""Finitely generated cones in claim space.

A claim is flattened to a vector of length ``d * L``: coordinate
``position * d + asset`` holds the holding of ``asset`` at the leaf with
canonical ``position``. Every question about a cone is answered by exact LPs;
polars and intersections use double description (pycddlib, GMP rationals)
within a dimension budget.
"""

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from fractions import Fraction
from functools import cached_property
from math import gcd, lcm

import cdd
import cdd.gmp

from . import linalg, settings
from .errors import (
    DimensionError,
    InternalCheckError,
    NeatReductionError,
    PolarBudgetError,
)
from .market_model import FiltrationTree, Market, TradingConeField
from .rational_lp import Bound, LinearProgram, Relation, Status, lp_solve
from .rationals import ONE, ZERO, Vector, add, dot, format_vector, is_zero, neg, unit, zeros

logger = logging.getLogger(__name__)

type Column = Mapping[int, Fraction]


@dataclass(frozen=True)
class GeneratorTag:
    """Where a lifted generator came from."""

    time: int | None = None
    node: int | None = None
    index: int | None = None
    label: str = ""

    def __str__(self) -> str:
        if self.node is None:
            return f"added: {self.label}"
        return f"t={self.time} node={self.node} g{self.index} ({self.label})"


@dataclass(frozen=True)
class LiftedCone:
    """cone(generators) inside Q^dimension, each generator tagged with provenance."""

    dimension: int
    generators: tuple[Vector, ...]
    tags: tuple[GeneratorTag, ...] = ()
    polar_generators: tuple[Vector, ...] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if any(len(g) != self.dimension for g in self.generators):
            raise DimensionError(f"generators must have length {self.dimension}")
        if not self.tags:
            object.__setattr__(
                self, "tags", tuple(GeneratorTag(label=f"g{i}") for i in range(len(self.generators)))
            )

    @cached_property
    def columns(self) -> tuple[dict[int, Fraction], ...]:
        return tuple({c: v for c, v in enumerate(g) if v} for g in self.generators)

    def extended(self, generators: Iterable[Vector], tags: Iterable[GeneratorTag]) -> "LiftedCone":
        return LiftedCone(
            self.dimension,
            (*self.generators, *generators),
            (*self.tags, *tags),
        )

    def __len__(self) -> int:
        return len(self.generators)


@dataclass(frozen=True)
class Subspace:
    dimension: int
    basis: tuple[Vector, ...] = ()

    @classmethod
    def span(cls, vectors: Iterable[Sequence[Fraction]], dimension: int) -> "Subspace":
        """Canonical (reduced echelon) basis of the span."""
        vectors = [tuple(v) for v in vectors if any(v)]
        return cls(dimension, tuple(linalg.row_basis(vectors, dimension)))

    @classmethod
    def whole(cls, dimension: int) -> "Subspace":
        return cls(dimension, tuple(unit(dimension, i) for i in range(dimension)))

    @property
    def rank(self) -> int:
        return len(self.basis)

    @property
    def is_trivial(self) -> bool:
        return not self.basis

    def contains(self, vector: Sequence[Fraction]) -> bool:
        return linalg.in_span(vector, self.basis, self.dimension)

    def complement(self) -> "Subspace":
        if self.is_trivial:
            return Subspace.whole(self.dimension)
        return Subspace.span(linalg.orthogonal_complement(self.basis, self.dimension), self.dimension)


@dataclass(frozen=True)
class ArbitrageWitness:
    """x = sum(coefficients * generators) with x >= 0 and x[coordinate] > 0."""

    claim: Vector
    coefficients: Vector
    coordinate: int

    def position(self, assets: int) -> tuple[int, int]:
        """(leaf position, asset) of the named positive coordinate."""
        return divmod(self.coordinate, assets)


@dataclass(frozen=True)
class MembershipResult:
    is_member: bool
    coefficients: Vector | None = None
    functional: Vector | None = None

    def __bool__(self) -> bool:
        return self.is_member


@dataclass(frozen=True)
class NullStrategies:
    """Null strategies of a factor list: tuples (x_i), x_i in factor i, sum x_i = 0.

    ``components[i]`` spans the projections onto factor ``i``; ``relint`` is a
    relative-interior null tuple.
    """

    components: tuple[Subspace, ...]
    is_vector_space: bool
    relint: tuple[Vector, ...]
    basis: tuple[tuple[Vector, ...], ...] = ()

    @property
    def is_trivial(self) -> bool:
        return all(c.is_trivial for c in self.components)


class Displacement(StrEnum):
    SCALAR_RAY = "scalar-ray"
    MEASURABLE = "measurable"


def coordinate_rows(
    columns: Sequence[Column], offset: int = 0
) -> dict[int, dict[int, Fraction]]:
    """Transpose sparse generator columns into per-coordinate LP rows."""
    rows: dict[int, dict[int, Fraction]] = {}
    for j, column in enumerate(columns):
        for c, v in column.items():
            rows.setdefault(c, {})[offset + j] = v
    return rows


def lift_vector(tree: FiltrationTree, assets: int, node: int, vector: Sequence[Fraction]) -> Vector:
    """``vector`` on every leaf below ``node``, zero elsewhere."""
    flat = [ZERO] * (assets * tree.leaf_count)
    for position in tree.leaves_below(node):
        flat[position * assets : (position + 1) * assets] = vector
    return tuple(flat)


def lift_cones(market: Market, times: Iterable[int]) -> LiftedCone:
    """Per-atom duplication of the node generators at the given times."""
    tree, cones = market.tree, market.cones
    dimension = market.assets * tree.leaf_count
    generators: list[Vector] = []
    tags: list[GeneratorTag] = []
    for t in times:
        for node in tree.nodes_at(t):
            for index, (g, label) in enumerate(
                zip(cones.at(node), cones.labels_at(node), strict=True)
            ):
                if is_zero(g):
                    continue
                generators.append(lift_vector(tree, market.assets, node, g))
                tags.append(GeneratorTag(t, node, index, label))
    return LiftedCone(dimension, tuple(generators), tuple(tags))


def attainable_cone(market: Market, start: int = 0) -> LiftedCone:
    """A_{start,T} = K_start + ... + K_T."""
    return lift_cones(market, range(start, market.horizon + 1))


def node_cone(market: Market, node: int) -> LiftedCone:
    """K_t(node) as a cone in Q^d."""
    cones = market.cones
    t = market.tree.time(node)
    return LiftedCone(
        market.assets,
        cones.at(node),
        tuple(
            GeneratorTag(t, node, i, label) for i, label in enumerate(cones.labels_at(node))
        ),
    )


def restrict(cone: LiftedCone, positions: Sequence[int], assets: int) -> LiftedCone:
    """Project onto the coordinates of the given leaf positions, dropping zero generators."""
    coordinates = [p * assets + i for p in positions for i in range(assets)]
    generators, tags = [], []
    for g, tag in zip(cone.generators, cone.tags, strict=True):
        projected = tuple(g[c] for c in coordinates)
        if any(projected):
            generators.append(projected)
            tags.append(tag)
    return LiftedCone(len(coordinates), tuple(generators), tuple(tags))


def member(cone: LiftedCone, x: Sequence[Fraction]) -> MembershipResult:
    """Decide x in cone; return coefficients, or a Farkas functional z.

    When x is outside, z . g <= 0 for every generator g and z . x > 0.
    """
    if len(x) != cone.dimension:
        raise DimensionError(f"claim of length {len(x)} for a cone in dimension {cone.dimension}")
    x = tuple(Fraction(v) for v in x)
    if not cone.generators:
        if is_zero(x):
            return MembershipResult(True, coefficients=())
        return MembershipResult(False, functional=x)

    lp = LinearProgram(len(cone.generators))
    rows = coordinate_rows(cone.columns)
    coordinates = []
    for c in range(cone.dimension):
        row = rows.get(c, {})
        if not row and not x[c]:
            continue
        lp.add_constraint(row, Relation.EQ, x[c])
        coordinates.append(c)
    outcome = lp_solve(lp)
    if outcome.is_feasible:
        return MembershipResult(True, coefficients=outcome.point)

    certificate = outcome.certificate or ()
    functional = [ZERO] * cone.dimension
    for r, c in enumerate(coordinates):
        functional[c] = certificate[r]
    z = tuple(functional)
    if dot(z, x) <= 0 or any(dot(z, g) > 0 for g in cone.generators):
        raise InternalCheckError("membership functional does not separate")
    return MembershipResult(False, functional=z)


def contains(outer: LiftedCone, inner: LiftedCone) -> bool:
    """Every generator of ``inner`` lies in ``outer``."""
    present = set(outer.generators)
    return all(g in present or member(outer, g).is_member for g in inner.generators)


def cone_equal(a: LiftedCone, b: LiftedCone) -> bool:
    if a.dimension != b.dimension:
        raise DimensionError(f"cones in dimensions {a.dimension} and {b.dimension}")
    return contains(a, b) and contains(b, a)


def primitive(vector: Sequence[Fraction]) -> Vector:
    """Positive multiple of ``vector`` with coprime integer entries."""
    if is_zero(vector):
        return tuple(Fraction(v) for v in vector)
    denominator = lcm(*(Fraction(v).denominator for v in vector))
    integers = [int(v * denominator) for v in vector]
    divisor = gcd(*integers)
    return tuple(Fraction(v, divisor) for v in integers)


def _dd_generators(
    inequalities: Sequence[Sequence[Fraction]],
    equalities: Sequence[Sequence[Fraction]],
    dimension: int,
) -> list[Vector]:
    """Generators of {x : p . x <= 0 for p in inequalities, e . x = 0 for e in equalities}.

    Lines come back as both directions. The result is sorted and primitive.
    """
    rows = [[ZERO, *neg(p)] for p in inequalities if any(p)]
    lin_rows = [[ZERO, *e] for e in equalities if any(e)]
    if not rows and not lin_rows:
        return [s for i in range(dimension) for s in (unit(dimension, i), unit(dimension, i, -ONE))]
    array = lin_rows + rows
    try:
        matrix = cdd.gmp.matrix_from_array(
            array, lin_set=set(range(len(lin_rows))), rep_type=cdd.RepType.INEQUALITY
        )
        generators = cdd.gmp.copy_generators(cdd.gmp.polyhedron_from_matrix(matrix))
    except (RuntimeError, ValueError) as e:
        raise InternalCheckError(f"double description failed: {e}") from e
    result: set[Vector] = set()
    for r, row in enumerate(generators.array):
        if row[0] != 0:
            continue
        ray = primitive(tuple(Fraction(v) for v in row[1:]))
        if is_zero(ray):
            continue
        result.add(ray)
        if r in generators.lin_set:
            result.add(neg(ray))
    return sorted(result)


def polar(cone: LiftedCone) -> LiftedCone:
    """Generators of {z : z . g <= 0 for all generators g}, double-polar checked.

    Raises:
        PolarBudgetError: if the ambient dimension exceeds the configured budget.
    """
    if cone.dimension > (budget := settings.dd_budget()):
        raise PolarBudgetError(
            f"double description refused in dimension {cone.dimension} (budget {budget}); "
            "use LP membership instead"
        )
    generators = tuple(_dd_generators(cone.generators, [], cone.dimension))
    double = LiftedCone(cone.dimension, tuple(_dd_generators(generators, [], cone.dimension)))
    if not cone_equal(double, cone):
        raise InternalCheckError("double polar differs from the cone")
    logger.debug(f"polar in dimension {cone.dimension}: {len(generators)} generators")
    return LiftedCone(
        cone.dimension,
        generators,
        tuple(GeneratorTag(label=f"polar {i}") for i in range(len(generators))),
        polar_generators=cone.generators,
    )


def with_polar(cone: LiftedCone) -> LiftedCone:
    """The same cone with its polar generator list cached."""
    return LiftedCone(cone.dimension, cone.generators, cone.tags, polar(cone).generators)


def intersect_subspace(
    cone: LiftedCone, orthogonal_to: Sequence[Sequence[Fraction]]
) -> LiftedCone:
    """cone ∩ {x : v . x = 0 for every v in orthogonal_to}."""
    if not any(any(v) for v in orthogonal_to):
        return cone
    inequalities = _dd_generators(cone.generators, [], cone.dimension)
    generators = tuple(_dd_generators(inequalities, orthogonal_to, cone.dimension))
    return LiftedCone(
        cone.dimension,
        generators,
        tuple(GeneratorTag(label=f"reduced {i}") for i in range(len(generators))),
    )


def intersect_cones(a: LiftedCone, b: LiftedCone) -> LiftedCone:
    if a.dimension != b.dimension:
        raise DimensionError(f"cones in dimensions {a.dimension} and {b.dimension}")
    inequalities = [
        *_dd_generators(a.generators, [], a.dimension),
        *_dd_generators(b.generators, [], b.dimension),
    ]
    generators = tuple(_dd_generators(inequalities, [], a.dimension))
    return LiftedCone(
        a.dimension,
        generators,
        tuple(GeneratorTag(label=f"meet {i}") for i in range(len(generators))),
    )


def null_support(columns: Sequence[Column]) -> tuple[frozenset[int], Vector]:
    """Largest support of {λ >= 0 : sum λ_j g_j = 0} and a point with that support.

    Each round maximizes the mass on indices outside the current support
    with λ <= 1; the returned point is the sum of the round optima.
    """
    n = len(columns)
    support: set[int] = set()
    total = zeros(n)
    if not n:
        return frozenset(), total
    rows = coordinate_rows(columns)
    while objective := {j: ONE for j in range(n) if j not in support}:
        lp = LinearProgram(n, bounds=[Bound(ZERO, ONE) for _ in range(n)])
        for row in rows.values():
            lp.add_constraint(row, Relation.EQ, ZERO)
        lp.set_objective(objective)
        outcome = lp_solve(lp)
        if outcome.status is not Status.OPTIMAL or not outcome.value or outcome.point is None:
            break
        support |= {j for j, v in enumerate(outcome.point) if v > 0}
        total = add(total, outcome.point)
    return frozenset(support), total


def lineality(cone: LiftedCone) -> Subspace:
    """lin(cone) = cone ∩ -cone, spanned by the generators in a null combination."""
    support, _ = null_support(cone.columns)
    return Subspace.span((cone.generators[j] for j in sorted(support)), cone.dimension)


def arbitrage_check(cone: LiftedCone) -> ArbitrageWitness | None:
    """A nonzero nonnegative element of the cone, if one exists.

    One LP maximizes sum(x) over x in cone, x >= 0, sum(x) <= 1; this is zero
    iff every single-coordinate maximum is zero.
    """
    if not cone.generators:
        return None
    lp = LinearProgram(len(cone.generators))
    rows = coordinate_rows(cone.columns)
    total: dict[int, Fraction] = {}
    for row in rows.values():
        lp.add_constraint(row, Relation.GE, ZERO)
        for j, v in row.items():
            total[j] = total.get(j, ZERO) + v
    total = {j: v for j, v in total.items() if v}
    if not total:
        return None
    lp.add_constraint(total, Relation.LE, ONE)
    lp.set_objective(total)
    outcome = lp_solve(lp)
    if outcome.status is not Status.OPTIMAL or not outcome.value or outcome.point is None:
        return None
    coefficients = outcome.point
    claim = [ZERO] * cone.dimension
    for j, column in enumerate(cone.columns):
        if coefficients[j]:
            for c, v in column.items():
                claim[c] += coefficients[j] * v
    if any(v < 0 for v in claim):
        raise InternalCheckError("arbitrage witness is not nonnegative")
    coordinate = next(c for c, v in enumerate(claim) if v > 0)
    logger.info(f"arbitrage found: coordinate {coordinate} is positive")
    return ArbitrageWitness(tuple(claim), coefficients, coordinate)


def null_strategies(factors: Sequence[LiftedCone]) -> NullStrategies:
    """Null strategies of ``factors`` and whether they form a vector space.

    The null set is the image of Λ = {λ >= 0 : sum over all generators = 0}.
    It is a vector space iff the negation of a relative-interior tuple is
    again a null tuple (one feasibility LP).
    """
    if not factors:
        return NullStrategies((), True, ())
    dimension = factors[0].dimension
    if any(f.dimension != dimension for f in factors):
        raise DimensionError("null-strategy factors must share the ambient dimension")

    owner: list[int] = []
    columns: list[Column] = []
    for i, factor in enumerate(factors):
        owner.extend([i] * len(factor))
        columns.extend(factor.columns)
    support, relint_weights = null_support(columns)

    def image(weights: Sequence[Fraction]) -> tuple[Vector, ...]:
        parts = [[ZERO] * dimension for _ in factors]
        for j, w in enumerate(weights):
            if w:
                for c, v in columns[j].items():
                    parts[owner[j]][c] += w * v
        return tuple(tuple(p) for p in parts)

    relint = image(relint_weights)
    trivial = tuple(Subspace(dimension) for _ in factors)
    if not support:
        return NullStrategies(trivial, True, relint)

    # Vector-space test: some μ in Λ maps to minus the relative-interior tuple.
    lp = LinearProgram(len(columns))
    for row in coordinate_rows(columns).values():
        lp.add_constraint(row, Relation.EQ, ZERO)
    for i in range(len(factors)):
        mine = [col if owner[j] == i else {} for j, col in enumerate(columns)]
        for c, row in coordinate_rows(mine).items():
            lp.add_constraint(row, Relation.EQ, -relint[i][c])
    is_vector_space = lp_solve(lp).is_feasible

    ordered = sorted(support)
    matrix = [[columns[j].get(c, ZERO) for j in ordered] for c in range(dimension)]
    kernel = linalg.nullspace(matrix, len(ordered))
    tuples = []
    for vector in kernel:
        weights = [ZERO] * len(columns)
        for j, w in zip(ordered, vector, strict=True):
            weights[j] = w
        tuples.append(image(weights))
    components = tuple(
        Subspace.span((t[i] for t in tuples), dimension) for i in range(len(factors))
    )
    logger.debug(
        f"null strategies over {len(factors)} factors: ranks "
        f"{[c.rank for c in components]}, vector space {is_vector_space}"
    )
    return NullStrategies(components, is_vector_space, relint, tuple(tuples))


def displaced_cone(
    cone: LiftedCone,
    xi: Sequence[Fraction],
    *,
    mode: Displacement = Displacement.MEASURABLE,
    tree: FiltrationTree | None = None,
    time: int | None = None,
    label: str = "ξ",
    check: bool = True,
) -> LiftedCone:
    """cone - R+ xi, or cone - mF_t+ xi with one appended generator per time-t atom.

    The result is finitely generated, hence closed. ``xi`` outside the cone
    only triggers a warning.
    """
    xi = tuple(Fraction(v) for v in xi)
    if len(xi) != cone.dimension:
        raise DimensionError(f"ξ of length {len(xi)} for a cone in dimension {cone.dimension}")
    if check and not member(cone, xi).is_member:
        logger.warning(f"displacing by {label}, which is not in the cone")
    if mode is Displacement.SCALAR_RAY:
        if is_zero(xi):
            return cone
        return cone.extended([neg(xi)], [GeneratorTag(label=f"-{label}")])

    if tree is None or time is None:
        raise ValueError("measurable displacement needs the tree and the time")
    assets = cone.dimension // tree.leaf_count
    generators, tags = [], []
    for node in tree.nodes_at(time):
        part = [ZERO] * cone.dimension
        for position in tree.leaves_below(node):
            for i in range(assets):
                part[position * assets + i] = -xi[position * assets + i]
        if any(part):
            generators.append(tuple(part))
            tags.append(GeneratorTag(label=f"-{label}·1[node {node}]"))
    return cone.extended(generators, tags)


def neat_reduce(market: Market) -> Market:
    """Replace K_t by M_t = K_t ∩ rho_t^⊥ so the null strategies become trivial.

    rho_t is the first-component projection of the null strategies of
    (K_t, ..., K_T); it is F_t-measurable, so the intersection is taken node
    by node. The sum cone is unchanged.

    Raises:
        NeatReductionError: the null strategies of (K_0, ..., K_T) are not a
            vector space.
    """
    horizon = market.horizon
    lifted = [lift_cones(market, [t]) for t in range(horizon + 1)]
    overall = null_strategies(lifted)
    if not overall.is_vector_space:
        raise NeatReductionError(
            "null strategies not a vector space; apply closure preprocessing first"
        )
    if overall.is_trivial:
        logger.info("null strategies already trivial; cones unchanged")
        return market

    tree, d = market.tree, market.assets
    generators = dict(market.cones.generators)
    labels = dict(market.cones.labels)
    for t in range(horizon):
        rho = null_strategies(lifted[t:]).components[0]
        if rho.is_trivial:
            continue
        for node in tree.nodes_at(t):
            position = tree.leaves_below(node)[0]
            local = [b[position * d : (position + 1) * d] for b in rho.basis]
            if not any(any(v) for v in local):
                continue
            reduced = intersect_subspace(node_cone(market, node), local)
            generators[node] = reduced.generators
            labels[node] = tuple(f"M{t}.{i}" for i in range(len(reduced.generators)))
            logger.debug(f"node {node}: {len(reduced.generators)} generators after reduction")

    reduced_market = market.with_cones(TradingConeField(d, generators, labels))
    if not cone_equal(attainable_cone(reduced_market), attainable_cone(market)):
        raise InternalCheckError("neat reduction changed the attainable cone")
    check = null_strategies([lift_cones(reduced_market, [t]) for t in range(horizon + 1)])
    if not check.is_trivial:
        raise InternalCheckError("null strategies remain after neat reduction")
    logger.info("neat reduction complete")
    return reduced_market


def dump_cone(cone: LiftedCone) -> list[dict[str, object]]:
    """Generators as rational strings with provenance, for ``--dump-cones``."""
    return [
        {"generator": format_vector(g), "tag": str(tag)}
        for g, tag in zip(cone.generators, cone.tags, strict=True)
    ]
