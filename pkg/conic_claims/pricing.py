"""Consistent price processes and claim valuation.

A price process assigns Z(node) in Q^d to every node. The LPs here use one
variable per (node, asset) at index ``node * d + asset``; variables at nodes
whose cone contains every -e_k carry the bound Z >= 0, which that cone's
polar implies anyway.
"""

import logging
import random
from collections.abc import Mapping
from dataclasses import dataclass
from fractions import Fraction
from functools import cache

from . import settings
from .cone_engine import (
    LiftedCone,
    Subspace,
    attainable_cone,
    lineality,
    member,
    node_cone,
)
from .errors import (
    ArbitrageError,
    DecompositionError,
    DimensionError,
    InternalCheckError,
    ValidationError,
)
from .market_model import Claim, HedgingStrategy, Market, check_claim
from .rational_lp import (
    FREE,
    Bound,
    LinearProgram,
    LpOutcome,
    Relation,
    Sense,
    Status,
    lp_solve,
)
from .rationals import ONE, ZERO, Vector, add, dot, scale

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PriceProcess:
    values: Mapping[int, Vector]
    strict: bool = False
    slack: Fraction | None = None

    def at(self, node: int) -> Vector:
        return self.values[node]


@dataclass(frozen=True)
class PricingCertificate:
    """Multipliers over the pricing LP rows explaining why no process exists."""

    multipliers: tuple[Fraction, ...]
    labels: tuple[str, ...]
    reason: str

    def support(self) -> dict[str, Fraction]:
        return {label: y for label, y in zip(self.labels, self.multipliers, strict=True) if y}


@dataclass(frozen=True)
class PricingOutcome:
    process: PriceProcess | None = None
    certificate: PricingCertificate | None = None

    @property
    def found(self) -> bool:
        return self.process is not None


@dataclass(frozen=True)
class ValueProcess:
    values: Mapping[int, Fraction]

    def at(self, node: int) -> Fraction:
        return self.values[node]


@dataclass(frozen=True)
class Valuation:
    """Price of a claim under Z, its value process and, given a hedge, the per-period terms."""

    price: Fraction
    value: ValueProcess
    terms: tuple[Fraction, ...] | None = None
    hedge_values: Mapping[int, Fraction] | None = None
    identity_holds: bool | None = None

    @property
    def value_equals_hedge(self) -> bool | None:
        if self.hedge_values is None:
            return None
        return all(self.value.at(n) == v for n, v in self.hedge_values.items())


@dataclass(frozen=True)
class DualMembership:
    is_member: bool
    optimum: Fraction
    witness: PriceProcess | None = None


@cache
def _lineality_of(generators: tuple[Vector, ...], assets: int) -> Subspace:
    return lineality(LiftedCone(assets, generators))


def node_lineality(market: Market, node: int) -> Subspace:
    """lin(K_t(node)), shared between nodes with identical generator lists."""
    return _lineality_of(market.cones.at(node), market.assets)


def _variable(market: Market, node: int, asset: int) -> int:
    return node * market.assets + asset


def _process_program(
    market: Market, *, normalize: bool = True, slack: bool = False, positive: bool = False
) -> tuple[LinearProgram, list[str]]:
    """Martingale and polar-cone constraints on Z; optionally a common slack variable last.

    ``positive`` replaces the per-leaf normalization by Z_i(leaf) >= 1 for
    every asset, the scale-free form of a strictly positive Z.
    """
    tree, d = market.tree, market.assets
    size = len(tree.nodes) * d
    lp = LinearProgram(size + (1 if slack else 0))
    labels: list[str] = []
    for node in tree.nodes:
        disposal = market.cones.has_disposal(node.id)
        for i in range(d):
            lp.set_bound(_variable(market, node.id, i), Bound() if disposal else FREE)

    for node in tree.nodes:
        for i in range(d):
            children = tree.children[node.id]
            if not children:
                continue
            row = {_variable(market, node.id, i): node.prob}
            for c in children:
                row[_variable(market, c, i)] = -tree.prob(c)
            lp.add_constraint(row, Relation.EQ, ZERO)
            labels.append(f"martingale node {node.id} asset {i + 1}")

    for node in tree.nodes:
        disposal = market.cones.has_disposal(node.id)
        lin = node_lineality(market, node.id) if slack else None
        for index, g in enumerate(market.cones.at(node.id)):
            if not any(g):
                continue
            strict_row = lin is not None and not lin.contains(g)
            if disposal and not strict_row and all(v <= 0 for v in g):
                continue
            row = {_variable(market, node.id, i): v for i, v in enumerate(g) if v}
            if strict_row:
                row[size] = ONE
            lp.add_constraint(row, Relation.LE, ZERO)
            labels.append(f"polar node {node.id} generator {index}")

    if positive:
        for leaf in tree.leaves:
            for i in range(d):
                lp.add_constraint({_variable(market, leaf, i): ONE}, Relation.GE, ONE)
                labels.append(f"positive leaf {leaf} asset {i + 1}")
    elif normalize:
        for leaf in tree.leaves:
            lp.add_constraint(
                {_variable(market, leaf, i): ONE for i in range(d)}, Relation.GE, ONE
            )
            labels.append(f"nonzero leaf {leaf}")
    if slack:
        lp.set_bound(size, Bound(ZERO, ONE))
    return lp, labels


def _pairing_row(market: Market, claim: Claim) -> dict[int, Fraction]:
    """Coefficients of E[Z_T . X] in the process variables."""
    tree, d = market.tree, market.assets
    row: dict[int, Fraction] = {}
    for position, leaf in enumerate(tree.leaves):
        p = tree.prob(leaf)
        for i, v in enumerate(claim.values[position]):
            if v:
                row[_variable(market, leaf, i)] = p * v
    return row


def _process_from_point(market: Market, point: Vector) -> dict[int, Vector]:
    d = market.assets
    return {
        node.id: tuple(point[node.id * d : (node.id + 1) * d]) for node in market.tree.nodes
    }


def _certificate(lp: LinearProgram, outcome: LpOutcome, labels: list[str], reason: str) -> PricingCertificate:
    bound_labels = [row.label for row in lp.rows()[len(labels) :]]
    return PricingCertificate(tuple(outcome.certificate or ()), (*labels, *bound_labels), reason)


def terminal_pairing(market: Market, process: PriceProcess, claim: Claim) -> Fraction:
    """E[Z_T . X]."""
    tree = market.tree
    return sum(
        (
            tree.prob(leaf) * dot(process.at(leaf), claim.values[position])
            for position, leaf in enumerate(tree.leaves)
        ),
        ZERO,
    )


def check_price_process(market: Market, process: PriceProcess, *, strict: bool = False) -> Fraction | None:
    """Validate Z exactly and return its strict slack.

    The slack is the least -Z . g over generators outside the node lineality,
    or None when every generator is in the lineality.

    Raises:
        ValidationError: Z is not a consistent (or, with ``strict``, strictly
            consistent) price process.
    """
    tree, d = market.tree, market.assets
    if set(process.values) != {n.id for n in tree.nodes}:
        raise ValidationError("price process must give a vector at every node")
    for node in tree.nodes:
        z = process.at(node.id)
        if len(z) != d:
            raise DimensionError(f"Z at node {node.id} has length {len(z)}, expected {d}")
        if not any(z):
            raise ValidationError(f"Z vanishes at node {node.id}")
        if children := tree.children[node.id]:
            expected = scale(node.prob, z)
            carried = tuple(ZERO for _ in range(d))
            for c in children:
                carried = add(carried, scale(tree.prob(c), process.at(c)))
            if expected != carried:
                raise ValidationError(f"Z is not a martingale at node {node.id}")

    slack: Fraction | None = None
    for node in tree.nodes:
        z = process.at(node.id)
        lin = node_lineality(market, node.id) if strict else None
        for index, g in enumerate(market.cones.at(node.id)):
            value = dot(z, g)
            if value > 0:
                raise ValidationError(
                    f"Z at node {node.id} is positive on generator {index}"
                )
            if strict and lin is not None and not lin.contains(g):
                slack = -value if slack is None else min(slack, -value)
    if strict and slack is not None and slack <= 0:
        raise ValidationError("Z is not strictly consistent")
    return slack


def find_consistent_process(
    market: Market,
    *,
    strict: bool = False,
    price_zero: Claim | None = None,
    positive: bool = False,
) -> PricingOutcome:
    """Search for a (strictly) consistent price process, optionally pricing a claim at 0.

    With ``positive`` every leaf value must be strictly positive in each
    asset, which a zero-pricing process needs to certify proper maximality.

    Returns:
        A PricingOutcome holding either the self-checked process or the LP
        certificate showing none exists.
    """
    lp, labels = _process_program(market, slack=strict, positive=positive)
    if price_zero is not None:
        check_claim(price_zero, market.tree, market.assets, "price-zero claim")
        lp.add_constraint(_pairing_row(market, price_zero), Relation.EQ, ZERO)
        labels.append("price zero")
    if strict:
        lp.set_objective({lp.variables - 1: ONE}, Sense.MAX)

    outcome = lp_solve(lp)
    if outcome.status is Status.INFEASIBLE:
        logger.info("no consistent price process")
        return PricingOutcome(
            certificate=_certificate(lp, outcome, labels, "no consistent price process")
        )
    if strict and (outcome.value is None or outcome.value <= 0):
        logger.info("no strictly consistent price process")
        return PricingOutcome(
            certificate=_certificate(
                lp, outcome, labels, "optimal common slack is 0: no strictly consistent process"
            )
        )

    point = outcome.point or ()
    process = PriceProcess(_process_from_point(market, point), strict=strict)
    try:
        slack = check_price_process(market, process, strict=strict)
    except ValidationError as e:
        raise InternalCheckError(f"computed price process fails its check: {e}") from e
    if price_zero is not None and terminal_pairing(market, process, price_zero) != 0:
        raise InternalCheckError("computed price process does not price the claim at 0")
    logger.info(f"consistent price process found (strict={strict})")
    return PricingOutcome(PriceProcess(process.values, strict=strict, slack=slack))


def value_process(market: Market, process: PriceProcess, claim: Claim) -> ValueProcess:
    """V_t = E[Z_T . X | F_t], rolled back through the tree."""
    tree = market.tree
    values: dict[int, Fraction] = {
        leaf: dot(process.at(leaf), claim.values[position])
        for position, leaf in enumerate(tree.leaves)
    }
    for t in range(tree.horizon - 1, -1, -1):
        for node in tree.nodes_at(t):
            total = sum((tree.prob(c) * values[c] for c in tree.children[node]), ZERO)
            values[node] = total / tree.prob(node)
    return ValueProcess(values)


def validate_decomposition(market: Market, strategy: HedgingStrategy, claim: Claim) -> None:
    """Each leg lies in K_t node by node and the legs sum to the claim.

    Raises:
        DecompositionError: naming the first failing leg.
    """
    tree = market.tree
    if len(strategy.legs) != tree.horizon + 1:
        raise DecompositionError(
            f"decomposition has {len(strategy.legs)} legs, expected {tree.horizon + 1}"
        )
    for t, leg in enumerate(strategy.legs):
        for node in tree.nodes_at(t):
            if node not in leg:
                raise DecompositionError(f"leg ξ_{t} is undefined at node {node}")
            if len(leg[node]) != market.assets:
                raise DecompositionError(f"leg ξ_{t} at node {node} has the wrong length")
            if not member(node_cone(market, node), leg[node]).is_member:
                raise DecompositionError(f"leg ξ_{t} at node {node} is not in K_{t}")
    if strategy.total(tree) != claim:
        raise DecompositionError("legs do not sum to the claim")


def price_and_value(
    market: Market,
    process: PriceProcess,
    claim: Claim,
    decomposition: HedgingStrategy | None = None,
) -> Valuation:
    """Price E[Z_T . X], the value process and the per-period terms E[Z_s . ξ_s]."""
    check_claim(claim, market.tree, market.assets)
    tree = market.tree
    price = terminal_pairing(market, process, claim)
    value = value_process(market, process, claim)
    if decomposition is None:
        return Valuation(price, value)

    validate_decomposition(market, decomposition, claim)
    terms = tuple(
        sum(
            (
                tree.prob(node) * dot(process.at(node), decomposition.legs[t][node])
                for node in tree.nodes_at(t)
            ),
            ZERO,
        )
        for t in range(tree.horizon + 1)
    )
    hedge_values: dict[int, Fraction] = {}
    for t in range(tree.horizon + 1):
        for node, position in decomposition.partial_sum(tree, t).items():
            hedge_values[node] = dot(process.at(node), position)
    identity = sum(terms, ZERO) == price
    if not identity:
        raise InternalCheckError("E[Z_T . X] differs from the sum of per-period terms")
    return Valuation(price, value, terms, hedge_values, identity)


def _measure_program(market: Market, process: PriceProcess) -> LinearProgram:
    """Leaf weights q >= 0 summing to 1 under which Z is a martingale."""
    tree, d = market.tree, market.assets
    lp = LinearProgram(tree.leaf_count)
    lp.add_constraint({j: ONE for j in range(tree.leaf_count)}, Relation.EQ, ONE)
    for node in tree.nodes:
        children = tree.children[node.id]
        if not children:
            continue
        for i in range(d):
            row: dict[int, Fraction] = {}
            for position in tree.leaves_below(node.id):
                row[position] = row.get(position, ZERO) + process.at(node.id)[i]
            for c in children:
                for position in tree.leaves_below(c):
                    row[position] = row.get(position, ZERO) - process.at(c)[i]
            lp.add_constraint(row, Relation.EQ, ZERO)
    return lp


def sample_martingale_measures(
    market: Market, process: PriceProcess, count: int | None = None, seed: int = 0
) -> list[dict[int, Fraction]]:
    """Equivalent measures under which Z stays a martingale, keyed by leaf id.

    Each sample is the midpoint of P and a vertex of the measure polytope
    picked by a random objective, so every leaf keeps positive weight.
    """
    tree = market.tree
    count = settings.emm_samples() if count is None else count
    rng = random.Random(seed)  # noqa: S311
    prior = [tree.prob(leaf) for leaf in tree.leaves]
    measures = []
    for _ in range(count):
        lp = _measure_program(market, process)
        lp.set_objective([Fraction(rng.randint(-4, 4)) for _ in prior], Sense.MAX)
        outcome = lp_solve(lp)
        if outcome.status is not Status.OPTIMAL or outcome.point is None:
            raise InternalCheckError("measure polytope lost the reference measure")
        measures.append(
            {
                leaf: (p + q) / 2
                for leaf, p, q in zip(tree.leaves, prior, outcome.point, strict=True)
            }
        )
    logger.debug(f"sampled {len(measures)} martingale measures")
    return measures


def conditional_values(
    market: Market, process: PriceProcess, claim: Claim, measure: Mapping[int, Fraction]
) -> ValueProcess:
    """E_Q[Z_T . X | F_t] at every node under the leaf measure Q."""
    tree = market.tree
    values: dict[int, Fraction] = {}
    for node in tree.nodes:
        weight = ZERO
        total = ZERO
        for position in tree.leaves_below(node.id):
            leaf = tree.leaves[position]
            weight += measure[leaf]
            total += measure[leaf] * dot(process.at(leaf), claim.values[position])
        values[node.id] = total / weight
    return ValueProcess(values)


def reweighted_process(
    market: Market, process: PriceProcess, measure: Mapping[int, Fraction]
) -> PriceProcess:
    """Z_t * Q(node) / P(node) for a leaf measure Q under which Z is a martingale.

    The result is again a consistent price process under P, and its value
    process equals E_Q[Z_T . X | F_t] * Q(node) / P(node).
    """
    tree = market.tree
    values = {}
    for node in tree.nodes:
        mass = sum((measure[tree.leaves[p]] for p in tree.leaves_below(node.id)), ZERO)
        values[node.id] = scale(mass / node.prob, process.at(node.id))
    return PriceProcess(values)


def dual_membership(market: Market, claim: Claim) -> DualMembership:
    """Decide X in A through the price side: X in A iff E[Z_T . X] <= 0 for every consistent Z.

    Raises:
        ArbitrageError: if the market admits an arbitrage.
    """
    check_claim(claim, market.tree, market.assets)
    reference = find_consistent_process(market)
    if reference.process is None:
        raise ArbitrageError("market has an arbitrage; the dual test is meaningless")

    lp, _ = _process_program(market, normalize=False)
    for j in range(lp.variables):
        if lp.bounds[j].lower is None:
            lp.set_bound(j, Bound(-ONE, ONE))
    tree = market.tree
    mass = {}
    for leaf in tree.leaves:
        for i in range(market.assets):
            mass[_variable(market, leaf, i)] = tree.prob(leaf)
    lp.add_constraint(mass, Relation.LE, ONE)
    lp.set_objective(_pairing_row(market, claim), Sense.MAX)
    outcome = lp_solve(lp)
    if outcome.status is not Status.OPTIMAL or outcome.value is None or outcome.point is None:
        raise InternalCheckError(f"dual membership LP ended {outcome.status}")
    optimum = outcome.value
    is_member = optimum <= 0
    if member(attainable_cone(market), claim.flat()).is_member != is_member:
        raise InternalCheckError("primal and dual membership disagree")

    witness = None
    if not is_member:
        best = _process_from_point(market, outcome.point)
        base = reference.process
        p0 = terminal_pairing(market, base, claim)
        epsilon = ONE if p0 >= 0 else optimum / (2 * -p0)
        combined = PriceProcess(
            {n: add(best[n], scale(epsilon, base.at(n))) for n in best}
        )
        try:
            check_price_process(market, combined)
            witness = combined
        except ValidationError:
            witness = PriceProcess(best)
        logger.info(f"claim not attainable: a consistent process prices it at {optimum} > 0")
    return DualMembership(is_member, optimum, witness)

