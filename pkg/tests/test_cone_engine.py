import os
import random
from fractions import Fraction
from unittest import mock

import pytest

from conic_claims.cone_engine import (
    Displacement,
    LiftedCone,
    Subspace,
    arbitrage_check,
    attainable_cone,
    cone_equal,
    contains,
    displaced_cone,
    dump_cone,
    lift_cones,
    lift_vector,
    lineality,
    member,
    neat_reduce,
    node_cone,
    null_strategies,
    polar,
    primitive,
    with_polar,
)
from conic_claims.errors import DimensionError, PolarBudgetError
from conic_claims.market_model import (
    BidAskProcess,
    FiltrationTree,
    Market,
    Node,
    build_trading_cones,
    build_two_asset_family,
)
from conic_claims.rationals import ZERO, Vector, add, dot, scale, zeros
from tests.markets import hand_built_market, scenario

# Test constants
ONE = Fraction(1)
K = Fraction(10)
RANDOM_CONES = 100


def _swap_market() -> Market:
    """Asset 2 trades at 1 without spread at both dates on a single path."""
    tree = FiltrationTree.build([Node(0, 0, None, ONE), Node(1, 1, 0, ONE)], 1)
    swap = ((ONE, ONE), (ONE, ONE))
    bidask = BidAskProcess(2, {0: swap, 1: swap})
    return Market(tree, 2, build_trading_cones(tree, bidask), bidask)


def _random_element(cone: LiftedCone, rng: random.Random) -> Vector:
    x = zeros(cone.dimension)
    for g in cone.generators:
        x = add(x, scale(Fraction(rng.randint(0, 3), rng.randint(1, 2)), g))
    return x


class TestLifting:
    """Per-atom duplication of node generators."""

    def test_lift_vector_fills_the_atom(self):
        market = scenario("binomial_spread.json")

        lifted = lift_vector(market.tree, 2, 2, (ONE, Fraction(2)))

        assert lifted == (ZERO, ZERO, ZERO, ZERO, ONE, Fraction(2), ONE, Fraction(2))

    def test_attainable_cone_counts_every_node(self):
        market = scenario("binomial_spread.json")

        cone = attainable_cone(market)

        assert cone.dimension == 8
        assert len(cone) == 7 * 4
        assert len(attainable_cone(market, 2)) == 4 * 4

    def test_tags_record_provenance(self):
        market = scenario("binomial_spread.json")

        tag = lift_cones(market, [1]).tags[0]

        assert (tag.time, tag.node, tag.index) == (1, 1, 0)
        assert str(tag) == "t=1 node=1 g0 (e2-pi12*e1)"

    def test_generators_must_match_dimension(self):
        with pytest.raises(DimensionError):
            LiftedCone(2, ((ONE,),))


class TestMembership:
    """LP membership with separating functionals."""

    def test_theta_is_attainable(self):
        market = build_two_asset_family(K, 4)

        result = member(attainable_cone(market), market.claim("theta").flat())

        assert result.is_member
        assert all(c >= 0 for c in result.coefficients)

    def test_digital_is_separated(self):
        market = scenario("binomial_spread.json")
        cone = attainable_cone(market)
        x = market.claim("digital").flat()

        result = member(cone, x)

        assert not result
        assert dot(result.functional, x) > 0
        assert all(dot(result.functional, g) <= 0 for g in cone.generators)

    def test_empty_cone_holds_only_zero(self):
        cone = LiftedCone(2, ())

        assert member(cone, (ZERO, ZERO))
        assert not member(cone, (ONE, ZERO))

    def test_contains_and_equality(self):
        small = LiftedCone(2, ((ONE, ZERO),))
        large = LiftedCone(2, ((ONE, ZERO), (ZERO, ONE)))

        assert contains(large, small)
        assert not contains(small, large)
        assert cone_equal(large, LiftedCone(2, ((ZERO, ONE), (ONE, ONE), (ONE, ZERO))))


class TestPolar:
    """Double description polars of the family cones."""

    def test_time_zero_polar(self):
        market = build_two_asset_family(K, 2)

        assert polar(node_cone(market, 0)).generators == ((ONE, ONE), (K, ONE))

    def test_time_one_polar(self):
        market = build_two_asset_family(K, 2)

        assert polar(node_cone(market, 1)).generators == ((ONE, K), (Fraction(2), ONE))

    def test_polar_is_cached(self):
        market = build_two_asset_family(K, 2)

        cone = with_polar(node_cone(market, 0))

        assert cone.polar_generators == ((ONE, ONE), (K, ONE))

    @mock.patch.dict(os.environ, {"CONIC_CLAIMS_DD_BUDGET": "2"}, clear=True)
    def test_dimension_budget(self):
        market = build_two_asset_family(K, 2)

        with pytest.raises(PolarBudgetError, match="budget 2"):
            polar(attainable_cone(market))

    def test_primitive(self):
        assert primitive((Fraction(2, 3), Fraction(-4, 3))) == (ONE, Fraction(-2))


class TestLineality:
    """Lineality spaces and subspaces."""

    def test_frictionless_leaf(self):
        market = scenario("frictionless_pair.json")

        lin = lineality(node_cone(market, 1))

        assert lin.rank == 1
        assert lin.contains((Fraction(-2), ONE))

    def test_spread_leaves_no_lines(self):
        market = build_two_asset_family(K, 3)

        assert lineality(attainable_cone(market)).is_trivial

    def test_complement(self):
        lin = Subspace.span([(ONE, ONE, ZERO)], 3)

        complement = lin.complement()

        assert complement.rank == 2
        assert all(dot(b, (ONE, ONE, ZERO)) == 0 for b in complement.basis)


class TestArbitrage:
    """Nonnegative nonzero elements of A."""

    def test_arbitrage_witness(self):
        market = scenario("arbitrage.json")
        cone = attainable_cone(market)

        witness = arbitrage_check(cone)

        assert witness is not None
        assert all(v >= 0 for v in witness.claim)
        assert witness.claim[witness.coordinate] > 0
        assert member(cone, witness.claim)

    @pytest.mark.parametrize(
        "name", ["binomial_spread.json", "frictionless_pair.json", "two_asset_k10_n4.json"]
    )
    def test_no_arbitrage(self, name):
        assert arbitrage_check(attainable_cone(scenario(name))) is None


class TestDisplacement:
    """A - R+ xi and A - mF_t+ xi."""

    def test_scalar_ray_appends_one_generator(self):
        market = build_two_asset_family(K, 4)
        cone = attainable_cone(market)

        displaced = displaced_cone(
            cone, market.claim("theta").flat(), mode=Displacement.SCALAR_RAY
        )

        assert len(displaced) == len(cone) + 1

    def test_measurable_appends_one_generator_per_atom(self):
        market = build_two_asset_family(K, 4)
        cone = attainable_cone(market)

        displaced = displaced_cone(
            cone, market.claim("theta").flat(), tree=market.tree, time=1
        )

        assert len(displaced) == len(cone) + 4

    def test_measurable_needs_tree_and_time(self):
        market = build_two_asset_family(K, 2)

        with pytest.raises(ValueError, match="needs the tree and the time"):
            displaced_cone(attainable_cone(market), market.claim("theta").flat())


class TestNullStrategies:
    """Null strategies and neat reduction."""

    def test_spread_market_has_none(self):
        market = build_two_asset_family(K, 3)

        ns = null_strategies([lift_cones(market, [t]) for t in range(2)])

        assert ns.is_trivial
        assert ns.is_vector_space

    def test_swap_market_has_a_line(self):
        market = _swap_market()

        ns = null_strategies([lift_cones(market, [t]) for t in range(2)])

        assert not ns.is_trivial
        assert ns.is_vector_space
        assert [c.rank for c in ns.components] == [1, 1]

    def test_neat_reduction_cuts_the_line(self):
        market = _swap_market()

        reduced = neat_reduce(market)

        assert reduced.cones.at(0) == ((Fraction(-1), Fraction(-1)),)
        assert reduced.cones.at(1) == market.cones.at(1)
        assert cone_equal(attainable_cone(reduced), attainable_cone(market))

    def test_neat_reduction_leaves_trivial_markets_alone(self):
        market = build_two_asset_family(K, 2)

        assert neat_reduce(market) is market


def test_dump_cone_lists_generators_with_tags():
    market = build_two_asset_family(K, 1)

    dumped = dump_cone(lift_cones(market, [0]))

    assert dumped[0] == {"generator": ["-1/1", "1/1"], "tag": "t=0 node=0 g0 (e2-pi12*e1)"}


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(RANDOM_CONES))
def test_measurable_displacement_on_random_cones(seed):
    """At time 0 the displacement is a single ray; later it splits by atom."""
    rng = random.Random(seed)
    market = hand_built_market(seed)
    cone = attainable_cone(market)
    xi = _random_element(cone, rng)

    at_root = displaced_cone(cone, xi, tree=market.tree, time=0)
    by_atom = displaced_cone(cone, xi, tree=market.tree, time=1)
    ray = displaced_cone(cone, xi, mode=Displacement.SCALAR_RAY)

    assert cone_equal(at_root, ray)
    assert contains(by_atom, ray)
    d = market.assets
    x = _random_element(cone, rng)
    for leaf in market.tree.leaves:
        position = market.tree.leaf_position[leaf]
        block = xi[position * d : (position + 1) * d]
        weight = Fraction(rng.randint(0, 3))
        x = add(x, lift_vector(market.tree, d, leaf, scale(-weight, block)))
    assert member(by_atom, x)
