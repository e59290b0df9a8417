import random
from fractions import Fraction
from unittest import mock

import pytest

from conic_claims.cone_engine import LiftedCone, attainable_cone, member, node_cone
from conic_claims.errors import (
    ArbitrageError,
    GConditionError,
    NotAttainableError,
    NotMaximalError,
    ValidationError,
)
from conic_claims.market_model import (
    Claim,
    HedgingStrategy,
    TruncationSets,
    build_two_asset_family,
    randomize_market,
    tail_probability,
)
from conic_claims.maximality import (
    GCondition,
    GCounterexample,
    GVariant,
    HedgeRegion,
    Verdict,
    check_G_condition,
    density_sequence,
    is_efficient,
    is_maximal,
    max_uniform_improvement,
    null_projection,
    scalarization_functional,
    scalarized_maximal_claim,
    special_decomposition,
    support_maximal_representative,
    truncate_claim,
    verify_special_decomposition,
)
from conic_claims.pricing import terminal_pairing
from conic_claims.rationals import ZERO, add, neg, scale, zeros
from conic_claims.two_asset_family import trading_decomposition
from tests.markets import hand_built_market, random_market, scenario

# Test constants
ONE = Fraction(1)
K = Fraction(10)
BRANCHING = 4
TRUNCATIONS = [1, 2, 3, 4]
RANDOM_CONES = 100
DENSITY_MARKETS = 50


def _random_attainable(market, seed) -> Claim:
    rng = random.Random(seed)
    cone = attainable_cone(market)
    x = zeros(cone.dimension)
    for g in cone.generators:
        x = add(x, scale(Fraction(rng.randint(0, 2), rng.randint(1, 3)), g))
    return Claim.from_flat(x, market.assets)


def _expected_bound(horizon: int, n: int) -> Fraction:
    return horizon * tail_probability(n, BRANCHING)


class TestIsEfficient:
    """Efficiency against an ordering cone."""

    NONPOSITIVE = LiftedCone(2, ((-ONE, ZERO), (ZERO, -ONE)))
    ORTHANT = LiftedCone(2, ((ONE, ZERO), (ZERO, ONE)))

    def test_origin_of_the_nonpositive_cone(self):
        assert is_efficient(self.NONPOSITIVE, (ZERO, ZERO), self.ORTHANT).efficient

    def test_disposal_can_be_undone(self):
        result = is_efficient(self.NONPOSITIVE, (-ONE, ZERO), self.ORTHANT)

        assert not result.efficient
        assert result.witness == (ONE, ZERO)

    def test_theta_outside_the_region(self):
        with pytest.raises(NotAttainableError):
            is_efficient(self.NONPOSITIVE, (ONE, ZERO), self.ORTHANT)

    def test_first_leg_is_efficient_in_its_hedge_region(self):
        market = build_two_asset_family(K, 1)
        later = node_cone(market, 1)
        region = HedgeRegion(node_cone(market, 0), market.claim("theta").values[0], later)
        ordering = LiftedCone(2, tuple(neg(g) for g in later.generators))

        assert is_efficient(region, (-ONE, ONE), ordering).efficient


class TestIsMaximal:
    """Improvement LP and zero-pricing processes."""

    def test_truncated_theta_is_improvable(self):
        market = build_two_asset_family(K, 4)
        theta = market.claim("theta")

        report = is_maximal(market, theta)

        assert report.verdict is Verdict.NOT_MAXIMAL
        assert report.properly_maximal is False
        assert report.improvement_value > 0
        assert all(v >= 0 for v in report.improvement.flat())
        assert member(attainable_cone(market), theta.plus(report.improvement).flat())

    def test_first_leg_is_properly_maximal(self):
        market = build_two_asset_family(K, 4)
        claim = market.claim("e2_minus_e1")

        report = is_maximal(market, claim)

        assert report.verdict is Verdict.PROPERLY_MAXIMAL
        assert terminal_pairing(market, report.certificate, claim) == 0

    def test_buy_and_hold_is_properly_maximal(self):
        market = scenario("binomial_spread.json")

        report = is_maximal(market, market.claim("buy_and_hold"))

        assert report.verdict is Verdict.PROPERLY_MAXIMAL

    def test_without_proper_check(self):
        market = scenario("binomial_spread.json")

        report = is_maximal(market, market.claim("buy_and_hold"), proper=False)

        assert report.verdict is Verdict.MAXIMAL
        assert report.properly_maximal is None

    def test_unattainable_claim(self):
        market = scenario("binomial_spread.json")

        report = is_maximal(market, market.claim("digital"))

        assert report.verdict is Verdict.NOT_IN_A
        assert report.functional is not None

    def test_arbitrage_market(self):
        market = scenario("arbitrage.json")

        with pytest.raises(ArbitrageError):
            is_maximal(market, market.claim("zero"))


class TestUniformImprovement:
    """The largest uniform gain in one asset."""

    @pytest.mark.parametrize("outcomes", [2, 4, 8, 16])
    def test_gap_closes_like_one_over_two_n(self, outcomes):
        market = build_two_asset_family(K, outcomes)

        improvement = max_uniform_improvement(market, market.claim("theta"), asset=1)

        assert improvement.epsilon == Fraction(1, 2 * outcomes)
        assert member(attainable_cone(market), improvement.improved.flat())

    def test_maximal_claim_has_no_gain(self):
        market = build_two_asset_family(K, 4)

        improvement = max_uniform_improvement(market, market.claim("e2_minus_e1"), asset=1)

        assert improvement.epsilon == 0

    def test_claim_outside_a(self):
        market = scenario("binomial_spread.json")

        with pytest.raises(NotAttainableError):
            max_uniform_improvement(market, market.claim("digital"), asset=0)

    def test_asset_index(self):
        market = scenario("binomial_spread.json")

        with pytest.raises(ValidationError, match="outside 0..1"):
            max_uniform_improvement(market, market.claim("buy_and_hold"), asset=2)


class TestScalarization:
    """Strictly positive scalarizations and relative-interior functionals."""

    def test_scalarized_claim_is_properly_maximal(self):
        market = scenario("binomial_spread.json")

        claim = scalarized_maximal_claim(market)

        assert is_maximal(market, claim).verdict is Verdict.PROPERLY_MAXIMAL

    def test_weights_must_be_positive(self):
        market = scenario("binomial_spread.json")

        with pytest.raises(ValidationError, match="strictly positive"):
            scalarized_maximal_claim(market, weights=[ONE] * 7 + [ZERO])

    def test_functional_signs(self):
        market = build_two_asset_family(K, 4)

        functional = scalarization_functional(market, 0)

        assert functional.slack > 0
        assert not functional.lineality_generators
        assert functional.check(attainable_cone(market, 1))
        assert set(functional.per_node) == {0}

    def test_functional_vanishes_on_lines(self):
        market = scenario("frictionless_pair.json")

        functional = scalarization_functional(market, 0)

        assert functional.lineality_generators
        assert functional.check(attainable_cone(market, 1))


class TestSpecialDecomposition:
    """Lazy legs and their verification."""

    def test_family_theta(self):
        market = build_two_asset_family(K, 4)
        theta = market.claim("theta")

        decomposition = special_decomposition(market, theta)

        assert decomposition.verified == (True,)
        assert decomposition.strategy.total(market.tree) == theta

    def test_explicit_trading_decomposition_is_special(self):
        market = build_two_asset_family(K, 4)

        assert verify_special_decomposition(
            market, trading_decomposition(market), market.claim("theta")
        ) == (True,)

    def test_splitting_a_disposal_is_not_special(self):
        market = build_two_asset_family(K, 2)
        dispose = (Fraction(-1), ZERO)
        early = HedgingStrategy(({0: dispose}, {1: dispose, 2: dispose}))
        late = HedgingStrategy(({0: (ZERO, ZERO)}, {1: scale(2, dispose), 2: scale(2, dispose)}))

        assert verify_special_decomposition(market, early) == (False,)
        assert verify_special_decomposition(market, late) == (True,)

    def test_binomial_buy_and_hold(self):
        market = scenario("binomial_spread.json")
        claim = market.claim("buy_and_hold")

        decomposition = special_decomposition(market, claim)

        assert decomposition.verified == (True, True)
        assert len(decomposition.functionals) == 2

    def test_claim_outside_a(self):
        market = scenario("binomial_spread.json")

        with pytest.raises(NotAttainableError):
            special_decomposition(market, market.claim("digital"))

    def test_representatives_with_lines(self):
        market = scenario("frictionless_pair.json")
        claim = Claim(((Fraction(-2), ONE), (Fraction(2), -ONE)))

        decomposition = special_decomposition(market, claim, representatives=True)

        assert all(decomposition.verified)
        assert [data.time for data in decomposition.representatives] == [0]

    def test_support_maximal_representative_stays_in_class(self):
        market = scenario("frictionless_pair.json")

        data = support_maximal_representative(market, 0, {0: (ONE, -ONE)})

        assert not data.lineality.is_trivial
        assert member(attainable_cone(market), Claim.constant(data.representative[0], 2).flat())


class TestTruncation:
    """G-condition and truncated claims on randomized markets."""

    def test_null_projection_without_lines_is_trivial(self):
        market = build_two_asset_family(K, 2)
        strategy = trading_decomposition(market)

        projection = null_projection(market, 0, theta=strategy.legs[0])

        assert projection.is_trivial
        assert projection.complement.rank == market.tree.leaf_count * market.assets

    def test_null_projection_needs_one_displacement(self):
        market = build_two_asset_family(K, 2)

        with pytest.raises(ValueError, match="exactly one"):
            null_projection(market, 0)

    def test_g_condition_on_the_family(self):
        market = build_two_asset_family(K, 2)
        randomized = randomize_market(market, 3, 1)
        strategy = randomized.lift_strategy(trading_decomposition(market))

        condition = check_G_condition(
            randomized.market, strategy, randomized.truncation_sets(1), variant=GVariant.PLAIN
        )

        assert condition.holds
        assert condition.programs > 0

    def test_complement_variant_needs_null_spaces(self):
        market = build_two_asset_family(K, 2)

        with pytest.raises(ValueError, match="null spaces"):
            check_G_condition(
                market,
                trading_decomposition(market),
                TruncationSets.everything(market.tree),
                variant=GVariant.COMPLEMENT,
            )

    def test_truncation_switches_off_late_legs(self):
        market = build_two_asset_family(K, 2)
        strategy = trading_decomposition(market)
        events = TruncationSets.from_events(market.tree, {1: [0]})

        truncation = truncate_claim(market.tree, strategy, events)

        assert truncation.claim.values[0] == market.claim("theta").values[0]
        assert truncation.claim.values[1] == (Fraction(-1), ONE)
        assert truncation.disagreement == market.tree.prob(2)
        assert truncation.bound == market.tree.prob(2)

    def test_g_condition_fails_without_truncation(self):
        market = build_two_asset_family(K, 2)
        strategy = trading_decomposition(market)

        condition = check_G_condition(market, strategy, TruncationSets.everything(market.tree))

        assert not condition.holds
        assert condition.counterexample.time == 1
        assert condition.counterexample.node == 0
        assert any(condition.counterexample.y)
        moves = LiftedCone(2, (*node_cone(market, 0).generators, neg(strategy.legs[0][0])))
        assert member(moves, condition.counterexample.y).is_member

    def test_truncation_everywhere_keeps_the_claim(self):
        market = build_two_asset_family(K, 2)

        truncation = truncate_claim(
            market.tree, trading_decomposition(market), TruncationSets.everything(market.tree)
        )

        assert truncation.claim == market.claim("theta")
        assert truncation.disagreement == truncation.bound == ZERO

    def test_empty_first_event_keeps_the_first_leg(self):
        market = build_two_asset_family(K, 2)

        truncation = truncate_claim(
            market.tree, trading_decomposition(market), TruncationSets({1: frozenset()})
        )

        assert all(v == (Fraction(-1), ONE) for v in truncation.claim.values)
        assert truncation.disagreement == truncation.bound == ONE


class TestDensitySequence:
    """Properly maximal approximations of a maximal claim."""

    def test_family_first_leg(self):
        market = build_two_asset_family(K, 2)

        sequence = density_sequence(market, market.claim("e2_minus_e1"), 3, [1, 2, 3])

        assert [entry.bound for entry in sequence.entries] == [
            tail_probability(1, 3),
            tail_probability(2, 3),
            ZERO,
        ]
        assert all(e.disagreement <= e.bound for e in sequence.entries)
        assert sequence.entries[-1].claim == sequence.randomized.lift_claim(
            market.claim("e2_minus_e1")
        )
        assert not sequence.reduced

    def test_not_maximal(self):
        market = build_two_asset_family(K, 2)

        with pytest.raises(NotMaximalError):
            density_sequence(market, market.claim("theta"), 3, [1])

    @mock.patch("conic_claims.maximality.check_G_condition")
    def test_failing_g_condition_stops_the_sequence(self, mock_check):
        market = build_two_asset_family(K, 2)
        mock_check.return_value = GCondition(False, GCounterexample(1, 0, (ONE, ZERO)), 1)

        with pytest.raises(GConditionError, match="n=1, M=3"):
            density_sequence(market, market.claim("e2_minus_e1"), 3, [1])

    def test_needs_truncations(self):
        market = build_two_asset_family(K, 2)

        with pytest.raises(ValidationError, match="at least one"):
            density_sequence(market, market.claim("e2_minus_e1"), 3, [])

    @pytest.mark.slow
    @pytest.mark.parametrize(
        "claim",
        [
            Claim(((Fraction(-2), ONE), (Fraction(-2), ONE))),
            Claim(((Fraction(-2), ONE), (Fraction(2), -ONE))),
        ],
    )
    def test_frictionless_leaves(self, claim):
        market = scenario("frictionless_pair.json")

        sequence = density_sequence(market, claim, BRANCHING, TRUNCATIONS)

        assert sequence.nontrivial_lineality
        assert [e.bound for e in sequence.entries] == [_expected_bound(1, n) for n in TRUNCATIONS]
        assert sequence.null_projections


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(RANDOM_CONES))
def test_maximal_iff_properly_maximal_on_random_cones(seed):
    market = hand_built_market(seed)

    assert is_maximal(market, scalarized_maximal_claim(market)).verdict is Verdict.PROPERLY_MAXIMAL
    assert is_maximal(market, _random_attainable(market, seed)).verdict in (
        Verdict.NOT_MAXIMAL,
        Verdict.PROPERLY_MAXIMAL,
    )


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(DENSITY_MARKETS))
def test_density_sequence_on_random_markets(seed):
    market = random_market(
        seed, arbitrage_free=True, assets=2, horizon=1 + seed % 2, max_leaves=3
    )
    theta = scalarized_maximal_claim(market)

    sequence = density_sequence(market, theta, BRANCHING, TRUNCATIONS)

    bounds = [entry.bound for entry in sequence.entries]
    assert bounds == [_expected_bound(market.horizon, n) for n in TRUNCATIONS]
    assert bounds == sorted(bounds, reverse=True)
    assert bounds[-1] == 0
    for entry in sequence.entries:
        assert entry.disagreement <= entry.bound
        assert terminal_pairing(sequence.randomized.market, entry.certificate, entry.claim) == 0
        if entry.n < BRANCHING:
            assert entry.g_condition.holds
