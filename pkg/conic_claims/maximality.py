"""Maximal claims, special decompositions and the density sequence.

The pipeline for a maximal claim theta:

1. ``special_decomposition`` splits theta into lazy legs (each leg as small
   as possible given what the later periods can still do);
2. with a nontrivial lineality the legs are replaced by support-maximal
   representatives of their equivalence classes;
3. the market is randomized and every leg after time 0 is switched off
   outside the events G_1 ∩ ... ∩ G_t;
4. each truncated claim is certified properly maximal by a consistent price
   process that prices it at zero.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from fractions import Fraction

from . import linalg
from .cone_engine import (
    Displacement,
    GeneratorTag,
    LiftedCone,
    Subspace,
    arbitrage_check,
    attainable_cone,
    cone_equal,
    coordinate_rows,
    displaced_cone,
    intersect_cones,
    lift_cones,
    lift_vector,
    lineality,
    member,
    neat_reduce,
    node_cone,
    null_strategies,
    null_support,
    restrict,
)
from .errors import (
    ArbitrageError,
    DecompositionError,
    GConditionError,
    InternalCheckError,
    NotAttainableError,
    NotMaximalError,
    ValidationError,
)
from .market_model import (
    Claim,
    FiltrationTree,
    HedgingStrategy,
    Market,
    RandomizedMarket,
    TruncationSets,
    check_claim,
    randomize_market,
)
from .pricing import (
    PriceProcess,
    PricingCertificate,
    find_consistent_process,
    validate_decomposition,
)
from .rational_lp import FREE, Bound, LinearProgram, Relation, Sense, Status, lp_solve
from .rationals import ONE, ZERO, Vector, add, dot, neg, scale, sub, zeros

logger = logging.getLogger(__name__)


class Verdict(StrEnum):
    NOT_IN_A = "not-in-A"
    NOT_MAXIMAL = "not-maximal"
    MAXIMAL = "maximal"
    PROPERLY_MAXIMAL = "properly-maximal"


@dataclass(frozen=True)
class MaximalityReport:
    verdict: Verdict
    maximal: bool
    properly_maximal: bool | None = None
    improvement: Claim | None = None
    improvement_value: Fraction | None = None
    certificate: PriceProcess | None = None
    pricing_certificate: PricingCertificate | None = None
    functional: Vector | None = None


@dataclass(frozen=True)
class EfficiencyResult:
    efficient: bool
    witness: Vector | None = None


@dataclass(frozen=True)
class HedgeRegion:
    """The convex set first ∩ (target - rest) of legs that leave a hedgeable remainder."""

    first: LiftedCone
    target: Vector
    rest: LiftedCone


@dataclass(frozen=True)
class UniformImprovement:
    epsilon: Fraction
    coefficients: Vector
    improved: Claim


@dataclass(frozen=True)
class ScalarizationFunctional:
    """A functional nonpositive on A_{t+1,T} and strictly negative off its lineality.

    ``per_node`` is its action on F_t-measurable claims: the pairing with a
    claim equal to v on the atom of ``node`` is ``per_node[node] . v``.
    """

    time: int
    weights: Vector
    per_node: Mapping[int, Vector]
    slack: Fraction
    lineality_generators: frozenset[int]

    def evaluate(self, claim: Sequence[Fraction]) -> Fraction:
        return dot(self.weights, claim)

    def check(self, rest: LiftedCone) -> bool:
        """Nonpositive on every generator, zero exactly on the lineality generators."""
        for j, a in enumerate(rest.generators):
            value = dot(self.weights, a)
            if j in self.lineality_generators:
                if value != 0:
                    return False
            elif value >= 0:
                return False
        return True


@dataclass(frozen=True)
class EquivalenceData:
    """The class [theta_t] = K_t ∩ (theta_t + lin(A_{t+1,T})) and its support-maximal member."""

    time: int
    lineality: Subspace
    theta: Mapping[int, Vector]
    representative: Mapping[int, Vector]
    coefficients: Mapping[int, Vector]
    local_lineality: Mapping[int, Subspace]
    sigma: Mapping[int, tuple[Vector, ...]]


@dataclass(frozen=True)
class SpecialDecomposition:
    strategy: HedgingStrategy
    functionals: tuple[ScalarizationFunctional, ...]
    representatives: tuple[EquivalenceData, ...] = ()
    verified: tuple[bool, ...] = ()


@dataclass(frozen=True)
class NullProjection:
    time: int
    space: Subspace
    complement: Subspace
    is_vector_space: bool

    @property
    def is_trivial(self) -> bool:
        return self.space.is_trivial


class GVariant(StrEnum):
    PLAIN = "plain"
    COMPLEMENT = "complement"


@dataclass(frozen=True)
class GCounterexample:
    time: int
    node: int
    y: Vector


@dataclass(frozen=True)
class GCondition:
    holds: bool
    counterexample: GCounterexample | None = None
    programs: int = 0


@dataclass(frozen=True)
class Truncation:
    claim: Claim
    strategy: HedgingStrategy
    bound: Fraction
    disagreement: Fraction


@dataclass(frozen=True)
class DensityEntry:
    n: int
    claim: Claim
    certificate: PriceProcess
    bound: Fraction
    disagreement: Fraction
    g_condition: GCondition | None = None


@dataclass(frozen=True)
class DensitySequence:
    decomposition: SpecialDecomposition
    randomized: RandomizedMarket
    entries: tuple[DensityEntry, ...]
    reduced: bool = False
    nontrivial_lineality: bool = False
    null_projections: tuple[NullProjection, ...] = field(default_factory=tuple)


def _flat(claim: Claim | Sequence[Fraction]) -> Vector:
    return claim.flat() if isinstance(claim, Claim) else tuple(Fraction(v) for v in claim)


def _node_values(tree: FiltrationTree, assets: int, t: int, flat: Sequence[Fraction]) -> dict[int, Vector]:
    """Read an F_t-measurable flat claim back as one vector per time-t node."""
    values = {}
    for node in tree.nodes_at(t):
        position = tree.leaves_below(node)[0]
        values[node] = tuple(flat[position * assets : (position + 1) * assets])
    return values


def _lift_leg(tree: FiltrationTree, assets: int, leg: Mapping[int, Vector]) -> Vector:
    total = zeros(assets * tree.leaf_count)
    for node, vector in leg.items():
        if any(vector):
            total = add(total, lift_vector(tree, assets, node, vector))
    return total


def _combination(cone: LiftedCone, coefficients: Sequence[Fraction]) -> Vector:
    total = [ZERO] * cone.dimension
    for w, column in zip(coefficients, cone.columns, strict=False):
        if w:
            for c, v in column.items():
                total[c] += w * v
    return tuple(total)


def _stacked_rows(*cones: LiftedCone) -> tuple[dict[int, dict[int, Fraction]], list[int]]:
    """Coordinate rows over the generators of several cones laid side by side."""
    rows: dict[int, dict[int, Fraction]] = {}
    offsets = []
    offset = 0
    for cone in cones:
        offsets.append(offset)
        for c, row in coordinate_rows(cone.columns, offset).items():
            rows.setdefault(c, {}).update(row)
        offset += len(cone)
    return rows, offsets


# Efficiency


def _cone_meets_ordering(displaced: LiftedCone, ordering: LiftedCone) -> EfficiencyResult:
    """Whether displaced ∩ ordering stays inside lin(ordering)."""
    directions = lineality(ordering).complement().basis
    if not displaced.generators or not ordering.generators:
        return EfficiencyResult(True)
    n = len(displaced)
    rows, _ = _stacked_rows(displaced, ordering)
    for u in directions:
        for sign in (ONE, -ONE):
            lp = LinearProgram(n + len(ordering))
            for c, row in rows.items():
                lp.add_constraint(
                    {j: (v if j < n else -v) for j, v in row.items()}, Relation.EQ, ZERO
                )
            lp.add_constraint({j: ONE for j in range(n)}, Relation.LE, ONE)
            objective = {j: sign * dot(u, g) for j, g in enumerate(displaced.generators)}
            lp.set_objective({j: v for j, v in objective.items() if v})
            outcome = lp_solve(lp)
            if outcome.status is Status.OPTIMAL and outcome.value and outcome.value > 0:
                return EfficiencyResult(False, _combination(displaced, outcome.point or ()))
    return EfficiencyResult(True)


def _region_program(region: HedgeRegion, ordering: LiftedCone | None, theta: Vector) -> LinearProgram:
    cones = [region.first, region.rest] + ([ordering] if ordering is not None else [])
    nk, nb = len(region.first), len(region.rest)
    lp = LinearProgram(max(1, sum(len(c) for c in cones)))
    first_rows = coordinate_rows(region.first.columns)
    rest_rows = coordinate_rows(region.rest.columns, nk)
    for c in range(region.first.dimension):
        row = {**first_rows.get(c, {}), **rest_rows.get(c, {})}
        if row or region.target[c]:
            lp.add_constraint(row, Relation.EQ, region.target[c])
    if ordering is not None:
        ordering_rows = coordinate_rows(ordering.columns, nk + nb)
        for c in range(region.first.dimension):
            row = dict(first_rows.get(c, {}))
            row.update({j: -v for j, v in ordering_rows.get(c, {}).items()})
            if row or theta[c]:
                lp.add_constraint(row, Relation.EQ, theta[c])
    else:
        for c in range(region.first.dimension):
            row = first_rows.get(c, {})
            if row or theta[c]:
                lp.add_constraint(row, Relation.EQ, theta[c])
    return lp


def is_efficient(
    region: LiftedCone | HedgeRegion,
    theta: Sequence[Fraction],
    ordering: LiftedCone,
    *,
    proper: bool = False,
    tree: FiltrationTree | None = None,
    time: int | None = None,
) -> EfficiencyResult:
    """Decide cone(region - theta) ∩ ordering ⊆ lin(ordering).

    For a cone region, cone(A - theta) = A - R+ theta; ``proper`` uses the
    closed cone A - mF_t+ theta instead (needs ``tree`` and ``time``). A
    polyhedral hedge region has a closed tangent cone, so both modes agree.

    Raises:
        NotAttainableError: theta is not in the region.
    """
    theta = _flat(theta)
    if isinstance(region, LiftedCone):
        found = member(region, theta)
        if not found.is_member:
            raise NotAttainableError("θ is not in the region", found.functional)
        mode = Displacement.MEASURABLE if proper else Displacement.SCALAR_RAY
        displaced = displaced_cone(region, theta, mode=mode, tree=tree, time=time, label="θ", check=False)
        return _cone_meets_ordering(displaced, ordering)

    if not lp_solve(_region_program(region, None, theta)).is_feasible:
        raise NotAttainableError("θ is not in the hedge region")
    nk = len(region.first)
    for u in lineality(ordering).complement().basis:
        for sign in (ONE, -ONE):
            lp = _region_program(region, ordering, theta)
            objective = {j: sign * dot(u, g) for j, g in enumerate(region.first.generators)}
            lp.set_objective({j: v for j, v in objective.items() if v})
            outcome = lp_solve(lp)
            if outcome.status is Status.UNBOUNDED and outcome.ray is not None:
                return EfficiencyResult(False, _combination(region.first, outcome.ray[:nk]))
            if outcome.status is Status.OPTIMAL and outcome.value is not None:
                if outcome.value > sign * dot(u, theta):
                    x = _combination(region.first, (outcome.point or ())[:nk])
                    return EfficiencyResult(False, sub(x, theta))
    return EfficiencyResult(True)


# Maximality


def _leaf_weights(market: Market) -> dict[int, Fraction]:
    tree, d = market.tree, market.assets
    return {
        position * d + i: tree.prob(leaf)
        for position, leaf in enumerate(tree.leaves)
        for i in range(d)
    }


def is_maximal(market: Market, claim: Claim, *, proper: bool = True) -> MaximalityReport:
    """Classify X as not attainable, not maximal, maximal or properly maximal.

    Maximality is decided by the LP max E[sum δ] over X + δ in A, δ >= 0;
    proper maximality independently by a consistent process pricing X at 0.

    Raises:
        ArbitrageError: the market has an arbitrage.
    """
    check_claim(claim, market.tree, market.assets)
    cone = attainable_cone(market)
    if (witness := arbitrage_check(cone)) is not None:
        raise ArbitrageError("market has an arbitrage", witness)
    x = claim.flat()
    found = member(cone, x)
    if not found.is_member:
        logger.info("claim is not attainable")
        return MaximalityReport(Verdict.NOT_IN_A, maximal=False, functional=found.functional)

    n, dimension = len(cone), cone.dimension
    lp = LinearProgram(n + dimension)
    rows = coordinate_rows(cone.columns)
    for c in range(dimension):
        row = dict(rows.get(c, {}))
        row[n + c] = -ONE
        lp.add_constraint(row, Relation.EQ, x[c])
    lp.set_objective({n + c: w for c, w in _leaf_weights(market).items()}, Sense.MAX)
    outcome = lp_solve(lp)
    if outcome.status is not Status.OPTIMAL or outcome.value is None or outcome.point is None:
        raise InternalCheckError(f"improvement LP ended {outcome.status} in an arbitrage-free market")
    maximal = outcome.value == 0
    improvement = None if maximal else Claim.from_flat(outcome.point[n:], market.assets)

    properly: bool | None = None
    certificate = None
    pricing_certificate = None
    if proper:
        priced = find_consistent_process(market, price_zero=claim, positive=True)
        properly = priced.found
        certificate = priced.process
        pricing_certificate = priced.certificate
        if properly != maximal:
            raise InternalCheckError(
                f"maximal={maximal} but properly maximal={properly} on a finite tree"
            )

    if not maximal:
        verdict = Verdict.NOT_MAXIMAL
    elif properly:
        verdict = Verdict.PROPERLY_MAXIMAL
    else:
        verdict = Verdict.MAXIMAL
    logger.info(f"maximality verdict: {verdict}")
    return MaximalityReport(
        verdict,
        maximal=maximal,
        properly_maximal=properly,
        improvement=improvement,
        improvement_value=outcome.value,
        certificate=certificate,
        pricing_certificate=pricing_certificate,
    )


def max_uniform_improvement(market: Market, claim: Claim, asset: int) -> UniformImprovement:
    """Largest ε with X + ε e_asset on every leaf still attainable (asset is 0-based).

    Raises:
        NotAttainableError: X is not in A.
        ArbitrageError: ε is unbounded.
    """
    check_claim(claim, market.tree, market.assets)
    if not 0 <= asset < market.assets:
        raise ValidationError(f"asset index {asset} outside 0..{market.assets - 1}")
    cone = attainable_cone(market)
    x = claim.flat()
    n, d = len(cone), market.assets
    lp = LinearProgram(n + 1)
    rows = coordinate_rows(cone.columns)
    for c in range(cone.dimension):
        row = dict(rows.get(c, {}))
        if c % d == asset:
            row[n] = -ONE
        if row or x[c]:
            lp.add_constraint(row, Relation.EQ, x[c])
    lp.set_objective({n: ONE}, Sense.MAX)
    outcome = lp_solve(lp)
    if outcome.status is Status.INFEASIBLE:
        raise NotAttainableError("claim is not in A")
    if outcome.status is Status.UNBOUNDED:
        raise ArbitrageError("uniform improvement is unbounded")
    point = outcome.point or ()
    epsilon = point[n]
    shift = Claim.constant(tuple(epsilon if i == asset else ZERO for i in range(d)), market.tree.leaf_count)
    improved = claim.plus(shift)
    if _combination(cone, point[:n]) != improved.flat():
        raise InternalCheckError("uniform improvement strategy does not reproduce the claim")
    logger.info(f"maximal uniform improvement of asset {asset + 1}: {epsilon}")
    return UniformImprovement(epsilon, point[:n], improved)


def scalarized_maximal_claim(
    market: Market, weights: Sequence[Fraction] | None = None, floor: Fraction = ONE
) -> Claim:
    """Maximize a strictly positive functional over A ∩ {x >= -floor}; the maximizer is maximal.

    Raises:
        ArbitrageError: the program is unbounded.
    """
    cone = attainable_cone(market)
    if weights is None:
        weights = tuple(_leaf_weights(market)[c] for c in range(cone.dimension))
    if len(weights) != cone.dimension or any(w <= 0 for w in weights):
        raise ValidationError("scalarization weights must be strictly positive on every coordinate")
    if not cone.generators:
        return Claim.zero(market.assets, market.tree.leaf_count)
    lp = LinearProgram(len(cone))
    for row in coordinate_rows(cone.columns).values():
        lp.add_constraint(row, Relation.GE, -floor)
    objective = {j: dot(weights, g) for j, g in enumerate(cone.generators)}
    lp.set_objective({j: v for j, v in objective.items() if v}, Sense.MAX)
    outcome = lp_solve(lp)
    if outcome.status is Status.UNBOUNDED:
        raise ArbitrageError("scalarization is unbounded: the market has an arbitrage")
    return Claim.from_flat(_combination(cone, outcome.point or ()), market.assets)


# Special decompositions


def scalarization_functional(market: Market, t: int) -> ScalarizationFunctional:
    """A relative-interior point of the polar of A_{t+1,T}, from one common-slack LP."""
    tree, d = market.tree, market.assets
    rest = attainable_cone(market, t + 1)
    lineality_generators, _ = null_support(rest.columns)
    size = rest.dimension
    lp = LinearProgram(size + 1, bounds=[Bound(-ONE, ONE) for _ in range(size)] + [Bound(ZERO, ONE)])
    for j, column in enumerate(rest.columns):
        row = dict(column)
        if j not in lineality_generators:
            row[size] = ONE
        lp.add_constraint(row, Relation.LE, ZERO)
    lp.set_objective({size: ONE}, Sense.MAX)
    outcome = lp_solve(lp)
    if outcome.status is not Status.OPTIMAL or outcome.point is None:
        raise InternalCheckError(f"scalarization LP ended {outcome.status}")
    weights = outcome.point[:size]
    per_node = {}
    for node in tree.nodes_at(t):
        total = zeros(d)
        for position in tree.leaves_below(node):
            total = add(total, weights[position * d : (position + 1) * d])
        per_node[node] = total
    functional = ScalarizationFunctional(t, weights, per_node, outcome.point[size], lineality_generators)
    if not functional.check(rest):
        raise InternalCheckError(f"scalarization functional at t={t} fails its sign checks")
    return functional


def _efficient_leg(
    market: Market, t: int, remainder: Vector, functional: ScalarizationFunctional
) -> Vector:
    """argmax of the functional over K_t ∩ (remainder - A_{t+1,T})."""
    first = lift_cones(market, [t])
    rest = attainable_cone(market, t + 1)
    rows, _ = _stacked_rows(first, rest)
    lp = LinearProgram(max(1, len(first) + len(rest)))
    for c in range(first.dimension):
        row = rows.get(c, {})
        if row or remainder[c]:
            lp.add_constraint(row, Relation.EQ, remainder[c])
    objective = {j: functional.evaluate(k) for j, k in enumerate(first.generators)}
    lp.set_objective({j: v for j, v in objective.items() if v}, Sense.MAX)
    outcome = lp_solve(lp)
    if outcome.status is Status.INFEASIBLE:
        raise InternalCheckError(f"remainder at t={t} left the attainable cone")
    if outcome.status is Status.UNBOUNDED:
        raise DecompositionError(
            f"leg ξ_{t} is unbounded; the null strategies are not trivial (neat-reduce first)"
        )
    return _combination(first, (outcome.point or ())[: len(first)])


def special_decomposition(
    market: Market, theta: Claim, *, representatives: bool = False
) -> SpecialDecomposition:
    """Split θ in A into legs whose t-th leg is efficient against A_{t+1,T}.

    With ``representatives`` each leg is replaced by the support-maximal
    member of its class when lin(A_{t+1,T}) is nontrivial.

    Raises:
        NotAttainableError: θ is not in A.
        DecompositionError: a leg cannot be chosen (unbounded scalarization).
    """
    check_claim(theta, market.tree, market.assets)
    tree, d = market.tree, market.assets
    found = member(attainable_cone(market), theta.flat())
    if not found.is_member:
        raise NotAttainableError("θ is not in A", found.functional)

    remainder = theta.flat()
    legs: list[dict[int, Vector]] = []
    functionals = []
    classes = []
    for t in range(tree.horizon):
        functional = scalarization_functional(market, t)
        functionals.append(functional)
        leg = _node_values(tree, d, t, _efficient_leg(market, t, remainder, functional))
        if representatives:
            lin = lineality(attainable_cone(market, t + 1))
            if not lin.is_trivial:
                data = support_maximal_representative(market, t, leg, lin)
                classes.append(data)
                leg = dict(data.representative)
        legs.append(leg)
        remainder = sub(remainder, _lift_leg(tree, d, leg))
        logger.debug(f"leg {t} chosen; functional slack {functional.slack}")

    last = _node_values(tree, d, tree.horizon, remainder)
    if _lift_leg(tree, d, last) != remainder:
        raise InternalCheckError("final remainder is not F_T-measurable")
    for node, vector in last.items():
        if not member(node_cone(market, node), vector).is_member:
            raise DecompositionError(f"leg ξ_{tree.horizon} at node {node} is not in K_{tree.horizon}")
    legs.append(last)
    strategy = HedgingStrategy(tuple(legs))
    verified = verify_special_decomposition(market, strategy, theta)
    if not all(verified):
        raise InternalCheckError(f"special decomposition fails its verification: {verified}")
    logger.info(f"special decomposition with {len(legs)} legs verified")
    return SpecialDecomposition(strategy, tuple(functionals), tuple(classes), verified)


def verify_special_decomposition(
    market: Market, strategy: HedgingStrategy, theta: Claim | None = None
) -> tuple[bool, ...]:
    """Per t < T: z in A_{t+1,T} with θ_t - z in K_t forces z into lin(A_{t+1,T}).

    Decided by minimizing the scalarization functional over such z; the leg
    passes iff the minimum is 0.
    """
    tree, d = market.tree, market.assets
    validate_decomposition(market, strategy, theta if theta is not None else strategy.total(tree))
    results = []
    for t in range(tree.horizon):
        functional = scalarization_functional(market, t)
        first = lift_cones(market, [t])
        rest = attainable_cone(market, t + 1)
        leg = _lift_leg(tree, d, strategy.legs[t])
        rows, offsets = _stacked_rows(first, rest)
        lp = LinearProgram(max(1, len(first) + len(rest)))
        for c in range(first.dimension):
            row = rows.get(c, {})
            if row or leg[c]:
                lp.add_constraint(row, Relation.EQ, leg[c])
        objective = {
            offsets[1] + j: functional.evaluate(a) for j, a in enumerate(rest.generators)
        }
        lp.set_objective({j: v for j, v in objective.items() if v}, Sense.MIN)
        outcome = lp_solve(lp)
        passed = outcome.status is Status.OPTIMAL and outcome.value == 0
        logger.debug(f"special decomposition check at t={t}: {passed}")
        results.append(passed)
    return tuple(results)


def _local_lineality(tree: FiltrationTree, assets: int, node: int, lin: Subspace) -> Subspace:
    """{v in Q^d : v on the atom of ``node`` (zero elsewhere) lies in lin}."""
    if lin.is_trivial:
        return Subspace(assets)
    columns = [*lin.basis, *(neg(lift_vector(tree, assets, node, e)) for e in Subspace.whole(assets).basis)]
    matrix = [[col[c] for col in columns] for c in range(lin.dimension)]
    kernel = linalg.nullspace(matrix, len(columns))
    return Subspace.span((v[len(lin.basis) :] for v in kernel), assets)


def _support_maximal_coefficients(
    generators: Sequence[Vector], theta: Vector, local: Subspace, start: Vector
) -> tuple[Vector, Fraction]:
    """Coefficients α in [0,1] with maximal support and Σ α Π in R+ θ + local.

    Returns the combined coefficients and the θ-multiple γ they realize.
    """
    n, d = len(generators), len(theta)
    witnesses: list[tuple[Vector, Fraction]] = []
    if any(start):
        top = max(start)
        witnesses.append((tuple(a / top for a in start), ONE / top))
    support = {j for j, a in enumerate(start) if a > 0}
    basis = local.basis
    while objective := {j: ONE for j in range(n) if j not in support}:
        lp = LinearProgram(n + 1 + len(basis))
        for j in range(n):
            lp.set_bound(j, Bound(ZERO, ONE))
        for k in range(len(basis)):
            lp.set_bound(n + 1 + k, FREE)
        for i in range(d):
            row = {j: g[i] for j, g in enumerate(generators) if g[i]}
            if theta[i]:
                row[n] = -theta[i]
            for k, b in enumerate(basis):
                if b[i]:
                    row[n + 1 + k] = -b[i]
            lp.add_constraint(row, Relation.EQ, ZERO)
        lp.set_objective(objective, Sense.MAX)
        outcome = lp_solve(lp)
        if outcome.status is not Status.OPTIMAL or not outcome.value or outcome.point is None:
            break
        alpha = outcome.point[:n]
        support |= {j for j, a in enumerate(alpha) if a > 0}
        witnesses.append((alpha, outcome.point[n]))

    if not witnesses:
        return zeros(n), ZERO
    count = len(witnesses)
    weights = [Fraction(1, 2 ** (k + 1)) for k in range(count - 1)]
    weights.append(Fraction(1, 2 ** (count - 1)))
    combined = zeros(n)
    gamma = ZERO
    for w, (alpha, g) in zip(weights, witnesses, strict=True):
        combined = add(combined, scale(w, alpha))
        gamma += w * g
    return combined, gamma


def support_maximal_representative(
    market: Market, t: int, theta: Mapping[int, Vector], lin: Subspace | None = None
) -> EquivalenceData:
    """Member of [θ_t] using as many generators of K_t as possible, node by node.

    The representative ξ_t satisfies K_t - Σ_t = K_t - mF_t+ ξ_t, which is
    checked node by node with Σ_t(node) = K_t(node) ∩ (R+ θ_t + local lineality).

    Raises:
        DecompositionError: θ_t is not in K_t at some node.
    """
    tree, d = market.tree, market.assets
    if lin is None:
        lin = lineality(attainable_cone(market, t + 1))
    representative, coefficients, locals_, sigma = {}, {}, {}, {}
    for node in tree.nodes_at(t):
        vector = tuple(theta[node])
        cone = node_cone(market, node)
        found = member(cone, vector)
        if not found.is_member:
            raise DecompositionError(f"θ_{t} at node {node} is not in K_{t}")
        local = _local_lineality(tree, d, node, lin)
        locals_[node] = local
        start = found.coefficients or zeros(len(cone))
        if local.is_trivial:
            representative[node] = vector
            coefficients[node] = start
            sigma[node] = (vector,) if any(vector) else ()
            continue
        alpha, gamma = _support_maximal_coefficients(cone.generators, vector, local, start)
        combination = _combination(cone, alpha)
        xi = scale(ONE / gamma, combination) if any(vector) else combination
        if not local.contains(sub(xi, vector)):
            raise InternalCheckError(f"representative at node {node} left the class of θ_{t}")
        representative[node] = xi
        coefficients[node] = alpha
        span = LiftedCone(d, (vector, *local.basis, *(neg(b) for b in local.basis)))
        sigma[node] = intersect_cones(cone, span).generators
        left = cone.extended((neg(s) for s in sigma[node]), (GeneratorTag(label="-Σ") for _ in sigma[node]))
        right = cone.extended([neg(xi)], [GeneratorTag(label="-ξ")])
        if not cone_equal(left, right):
            raise InternalCheckError(f"K - Σ differs from K - R+ξ at node {node}")
    logger.debug(f"support-maximal representatives at t={t} computed")
    return EquivalenceData(t, lin, dict(theta), representative, coefficients, locals_, sigma)


def null_projection(
    market: Market,
    t: int,
    *,
    sigma: Mapping[int, Sequence[Vector]] | None = None,
    theta: Mapping[int, Vector] | None = None,
    attainable_lineality: Subspace | None = None,
) -> NullProjection:
    """First-component projection N_t of the null strategies of (K_t - Σ_t, A_{t+1,T}).

    Without ``sigma`` the displacement is mF_t+ θ_t. The vector-space property
    is asserted whenever it is guaranteed: with Σ_t, or when lin(A) = {0};
    in the latter case N_t must also be trivial.
    """
    if (sigma is None) == (theta is None):
        raise ValueError("pass exactly one of sigma and theta")
    tree, d = market.tree, market.assets
    displaced = sigma if sigma is not None else {n: (v,) for n, v in (theta or {}).items()}
    extra, tags = [], []
    for node, vectors in displaced.items():
        for v in vectors:
            if any(v):
                extra.append(lift_vector(tree, d, node, neg(v)))
                tags.append(GeneratorTag(label=f"-Σ node {node}"))
    first = lift_cones(market, [t]).extended(extra, tags)
    ns = null_strategies([first, attainable_cone(market, t + 1)])
    if attainable_lineality is None:
        attainable_lineality = lineality(attainable_cone(market))
    space = ns.components[0]
    if not ns.is_vector_space and (sigma is not None or attainable_lineality.is_trivial):
        raise InternalCheckError(f"null strategies at t={t} are not a vector space")
    if attainable_lineality.is_trivial and not space.is_trivial:
        raise InternalCheckError(f"null strategies at t={t} are not trivial although lin(A) = {{0}}")
    return NullProjection(t, space, space.complement(), ns.is_vector_space)


def check_G_condition(  # noqa: N802
    market: Market,
    strategy: HedgingStrategy,
    events: TruncationSets,
    *,
    variant: GVariant = GVariant.PLAIN,
    null_spaces: Mapping[int, Subspace] | None = None,
) -> GCondition:
    """For each t: no y != 0 in K_{t-1} - mF+ θ_{t-1} with -y 1(G_t^c) in A_{t,T}.

    With the complement variant y is also restricted to N_{t-1}^⊥. The
    question splits over time-(t-1) atoms; each atom costs 2d LPs.
    """
    tree, d = market.tree, market.assets
    events.validate(tree)
    if variant is GVariant.COMPLEMENT and null_spaces is None:
        raise ValueError("the complement variant needs the null spaces N_t")
    programs = 0
    for t in range(1, tree.horizon + 1):
        rest = attainable_cone(market, t)
        chosen = events.event(tree, t)
        outside = {
            p for node in tree.nodes_at(t) if node not in chosen for p in tree.leaves_below(node)
        }
        for atom in tree.nodes_at(t - 1):
            positions = tree.leaves_below(atom)
            theta = strategy.legs[t - 1][atom]
            moves = [g for g in market.cones.at(atom) if any(g)]
            if any(theta):
                moves.append(neg(theta))
            if not moves:
                continue
            local = restrict(rest, positions, d)
            nk = len(moves)
            lp = LinearProgram(nk + len(local))
            local_rows = coordinate_rows(local.columns, nk)
            for k, position in enumerate(positions):
                for i in range(d):
                    row = dict(local_rows.get(k * d + i, {}))
                    if position in outside:
                        row.update({j: g[i] for j, g in enumerate(moves) if g[i]})
                    if row:
                        lp.add_constraint(row, Relation.EQ, ZERO)
            if variant is GVariant.COMPLEMENT and null_spaces is not None:
                first = positions[0]
                for n in null_spaces[t - 1].basis:
                    normal = n[first * d : (first + 1) * d]
                    row = {j: v for j, g in enumerate(moves) if (v := dot(normal, g))}
                    if row:
                        lp.add_constraint(row, Relation.EQ, ZERO)
            lp.add_constraint({j: ONE for j in range(nk)}, Relation.LE, ONE)
            for c in range(d):
                for sign in (ONE, -ONE):
                    lp.set_objective({j: sign * g[c] for j, g in enumerate(moves) if g[c]}, Sense.MAX)
                    outcome = lp_solve(lp)
                    programs += 1
                    if outcome.status is Status.OPTIMAL and outcome.value and outcome.value > 0:
                        y = tuple(
                            sum((a * g[i] for a, g in zip(outcome.point or (), moves, strict=False)), ZERO)
                            for i in range(d)
                        )
                        logger.info(f"G-condition fails at t={t}, node {atom}")
                        return GCondition(False, GCounterexample(t, atom, y), programs)
    return GCondition(True, programs=programs)


def truncate_claim(tree: FiltrationTree, strategy: HedgingStrategy, events: TruncationSets) -> Truncation:
    """θ^G = θ_0 + θ_1 1(H_1) + ... + θ_T 1(H_T) with H_t = G_1 ∩ ... ∩ G_t.

    Raises:
        TruncationError: the events are not adapted.
    """
    events.validate(tree)
    legs = [dict(strategy.legs[0])]
    for t in range(1, len(strategy.legs)):
        survivors = events.survivors(tree, t)
        legs.append(
            {
                node: vector if node in survivors else zeros(len(vector))
                for node, vector in strategy.legs[t].items()
            }
        )
    truncated = HedgingStrategy(tuple(legs))
    claim = truncated.total(tree)
    original = strategy.total(tree)
    disagreement = sum(
        (
            tree.prob(leaf)
            for position, leaf in enumerate(tree.leaves)
            if claim.values[position] != original.values[position]
        ),
        ZERO,
    )
    bound = sum((events.complement_probability(tree, t) for t in range(1, tree.horizon + 1)), ZERO)
    if disagreement > bound:
        raise InternalCheckError("truncation disagrees on more mass than the events exclude")
    return Truncation(claim, truncated, bound, disagreement)


def density_sequence(
    market: Market, theta: Claim, branching: int, truncations: Sequence[int]
) -> DensitySequence:
    """Properly maximal claims on the randomized market converging to θ.

    Raises:
        NotMaximalError: θ is not maximal.
        GConditionError: the G-condition fails for some n < M.
    """
    report = is_maximal(market, theta, proper=False)
    if not report.maximal:
        raise NotMaximalError(f"θ is {report.verdict}", report.improvement)
    if not truncations:
        raise ValidationError("at least one truncation index is required")

    lifted = [lift_cones(market, [t]) for t in range(market.horizon + 1)]
    reduced = not null_strategies(lifted).is_trivial
    working = neat_reduce(market) if reduced else market
    nontrivial = not lineality(attainable_cone(working)).is_trivial
    decomposition = special_decomposition(working, theta, representatives=nontrivial)

    randomized = randomize_market(working, branching, truncations[0])
    original = randomized if not reduced else randomize_market(market, branching, truncations[0])
    product = randomized.market
    strategy = randomized.lift_strategy(decomposition.strategy)

    projections: list[NullProjection] = []
    null_spaces = None
    if nontrivial:
        product_lineality = lineality(attainable_cone(product))
        by_time = {data.time: data for data in decomposition.representatives}
        for t in range(product.horizon):
            if t in by_time:
                sigma = {
                    node: by_time[t].sigma[randomized.projection[node]]
                    for node in product.tree.nodes_at(t)
                }
                projection = null_projection(
                    product, t, sigma=sigma, attainable_lineality=product_lineality
                )
            else:
                projection = null_projection(
                    product, t, theta=strategy.legs[t], attainable_lineality=product_lineality
                )
            projections.append(projection)
        null_spaces = {p.time: p.space for p in projections}

    entries = []
    for n in truncations:
        events = randomized.truncation_sets(n)
        condition = None
        if n < branching:
            condition = check_G_condition(
                product,
                strategy,
                events,
                variant=GVariant.COMPLEMENT if nontrivial else GVariant.PLAIN,
                null_spaces=null_spaces,
            )
            if not condition.holds:
                raise GConditionError(
                    f"G-condition fails for n={n}, M={branching}", condition.counterexample
                )
        truncation = truncate_claim(product.tree, strategy, events)
        priced = find_consistent_process(
            original.market, price_zero=truncation.claim, positive=True
        )
        if priced.process is None:
            raise InternalCheckError(f"truncated claim for n={n} has no zero-pricing consistent process")
        entries.append(
            DensityEntry(n, truncation.claim, priced.process, truncation.bound, truncation.disagreement, condition)
        )
        logger.info(f"n={n}: certified, disagreement bound {truncation.bound}")

    ordered = sorted(entries, key=lambda e: e.n)
    if any(a.bound < b.bound for a, b in zip(ordered, ordered[1:], strict=False)):
        raise InternalCheckError("disagreement bounds increase with n")
    return DensitySequence(decomposition, randomized, tuple(entries), reduced, nontrivial, tuple(projections))
