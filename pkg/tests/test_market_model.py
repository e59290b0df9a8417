import json
import os
from fractions import Fraction
from unittest import mock

import pytest

from conic_claims.errors import (
    DimensionError,
    ProbabilityError,
    ScenarioSchemaError,
    SizeGuardError,
    TruncationError,
    ValidationError,
)
from conic_claims.market_model import (
    BidAskProcess,
    Claim,
    FiltrationTree,
    HedgingStrategy,
    Node,
    TruncationSets,
    build_trading_cones,
    build_two_asset_family,
    dump_scenario,
    load_scenario,
    net_out,
    netting_violation,
    randomize_market,
    tail_probability,
)
from tests.markets import SCENARIOS, scenario

# Test constants
ONE = Fraction(1)
HALF = Fraction(1, 2)
NETTING = (SCENARIOS / "netting_violation.json").read_text()
ONE_PERIOD = {
    "assets": 2,
    "horizon": 1,
    "nodes": [
        {"id": 0, "time": 0, "parent": None, "prob": "1/1"},
        {"id": 1, "time": 1, "parent": 0, "prob": "1/2"},
        {"id": 2, "time": 1, "parent": 0, "prob": "1/2"},
    ],
    "bidask": {
        "0": [["1", "2"], ["1", "1"]],
        "1": [["1", "2"], ["1/2", "1"]],
        "2": [["1", "2"], ["1/2", "1"]],
    },
    "claims": {"swap": {"1": ["-2", "1"], "2": ["-2", "1"]}},
}


def _document(**changes) -> str:
    return json.dumps({**ONE_PERIOD, **changes})


class TestFiltrationTree:
    """Structural checks on the scenario tree."""

    def test_leaves_are_ordered_by_id(self):
        market = scenario("binomial_spread.json")

        assert market.tree.leaves == (3, 4, 5, 6)
        assert market.tree.leaves_below(1) == (0, 1)
        assert market.tree.ancestor(6, 1) == 2

    def test_children_must_carry_the_parent_mass(self):
        nodes = [Node(0, 0, None, ONE), Node(1, 1, 0, HALF)]

        with pytest.raises(ProbabilityError, match="children of node 0 sum to 1/2"):
            FiltrationTree.build(nodes, 1)

    def test_ids_must_be_dense(self):
        nodes = [Node(0, 0, None, ONE), Node(2, 1, 0, ONE)]

        with pytest.raises(ValidationError, match="dense integers"):
            FiltrationTree.build(nodes, 1)

    def test_exactly_one_root(self):
        nodes = [Node(0, 0, None, ONE), Node(1, 0, None, ONE)]

        with pytest.raises(ValidationError, match="exactly one root"):
            FiltrationTree.build(nodes, 0)

    def test_inner_node_needs_children(self):
        nodes = [Node(0, 0, None, ONE)]

        with pytest.raises(ValidationError, match="has no children"):
            FiltrationTree.build(nodes, 1)


class TestNetting:
    """Bid-ask netting detection and chain-minima repair."""

    def test_violation_names_the_chain(self):
        with pytest.raises(ValidationError, match="netting violated for chain 1→2→3 at node 0"):
            load_scenario(NETTING, repair=False)

    def test_repair_replaces_rate_by_cheapest_chain(self):
        market = load_scenario(NETTING, repair=True)

        assert market.bidask.at(0)[0][2] == Fraction(4)
        assert netting_violation(market.bidask.at(0)) is None

    @mock.patch.dict(os.environ, {"CONIC_CLAIMS_REPAIR_NETTING": "true"}, clear=True)
    def test_repair_follows_the_environment(self):
        market = load_scenario(NETTING)

        assert market.bidask.at(0)[0][2] == Fraction(4)

    def test_net_out_keeps_a_netted_matrix(self):
        matrix = ((ONE, Fraction(2)), (HALF, ONE))

        assert net_out(matrix) == matrix

    def test_diagonal_must_be_one(self):
        tree = FiltrationTree.build([Node(0, 0, None, ONE)], 0)
        bidask = BidAskProcess(2, {0: ((Fraction(2), ONE), (ONE, ONE))})

        with pytest.raises(ValidationError, match="is required"):
            bidask.validate(tree)


class TestLoadScenario:
    """Parsing of scenario documents."""

    def test_one_period_market(self):
        market = load_scenario(_document())

        assert market.digest() == {"assets": 2, "horizon": 1, "nodes": 3, "leaves": 2}
        assert market.claim("swap") == Claim.constant((Fraction(-2), ONE), 2)

    def test_generators_follow_the_bidask_order(self):
        market = load_scenario(_document())

        assert market.cones.at(0) == (
            (Fraction(-2), ONE),
            (ONE, Fraction(-1)),
            (Fraction(-1), Fraction(0)),
            (Fraction(0), Fraction(-1)),
        )
        assert market.cones.has_disposal(0)

    def test_hand_built_generators(self):
        document = {
            **ONE_PERIOD,
            "generators": {"0": [["-1", "1"]], "1": [["1", "-2"]], "2": [["1", "-2"]]},
        }
        del document["bidask"]

        market = load_scenario(json.dumps(document))

        assert market.bidask is None
        assert market.cones.at(1) == ((ONE, Fraction(-2)),)
        assert not market.cones.has_disposal(1)

    def test_invalid_json(self):
        with pytest.raises(ScenarioSchemaError, match="not valid JSON"):
            load_scenario("{")

    def test_unknown_field(self):
        with pytest.raises(ScenarioSchemaError, match="unknown scenario fields"):
            load_scenario(_document(volatility="1/5"))

    def test_decimals_are_rejected(self):
        nodes = [dict(n) for n in ONE_PERIOD["nodes"]]
        nodes[1]["prob"] = "0.5"

        with pytest.raises(ScenarioSchemaError, match="node 1 prob"):
            load_scenario(_document(nodes=nodes))

    def test_missing_field(self):
        document = dict(ONE_PERIOD)
        del document["horizon"]

        with pytest.raises(ScenarioSchemaError, match="'horizon' is required"):
            load_scenario(json.dumps(document))

    def test_generators_must_be_lists(self):
        document = {**ONE_PERIOD, "generators": {"0": 5, "1": [["1", "-2"]], "2": [["1", "-2"]]}}
        del document["bidask"]

        with pytest.raises(ScenarioSchemaError, match="generators of node 0 must be a list"):
            load_scenario(json.dumps(document))

    def test_claims_must_be_a_map(self):
        with pytest.raises(ScenarioSchemaError, match="'claims' must map claim names"):
            load_scenario(_document(claims=[]))

    def test_claim_must_cover_every_leaf(self):
        with pytest.raises(ValidationError, match=r"not defined on leaves \[2\]"):
            load_scenario(_document(claims={"half": {"1": ["1", "0"]}}))

    def test_claim_on_inner_node(self):
        with pytest.raises(ValidationError, match="node 0 is not a leaf"):
            load_scenario(_document(claims={"bad": {"0": ["1", "0"]}}))

    def test_unknown_claim_name(self):
        market = load_scenario(_document())

        with pytest.raises(ValidationError, match="unknown claim 'missing'"):
            market.claim("missing")

    def test_zero_claim_is_always_defined(self):
        market = load_scenario(_document())

        assert market.claim("zero").is_zero()

    def test_dump_reloads_to_the_same_market(self):
        market = scenario("binomial_spread.json")

        again = load_scenario(dump_scenario(market))

        assert again.tree == market.tree
        assert again.claims == market.claims
        assert again.cones.generators == market.cones.generators


class TestClaims:
    """Claims and strategies in leaf order."""

    def test_flat_layout_is_position_major(self):
        claim = Claim(((ONE, Fraction(2)), (Fraction(3), Fraction(4))))

        assert claim.flat() == (ONE, Fraction(2), Fraction(3), Fraction(4))
        assert Claim.from_flat(claim.flat(), 2) == claim

    def test_from_flat_needs_whole_vectors(self):
        with pytest.raises(DimensionError):
            Claim.from_flat((ONE, ONE, ONE), 2)

    def test_restricted_keeps_positions(self):
        claim = Claim.constant((ONE, ONE), 3)

        assert claim.restricted([1]).values == (
            (Fraction(0), Fraction(0)),
            (ONE, ONE),
            (Fraction(0), Fraction(0)),
        )

    def test_strategy_total_and_partial_sums(self):
        market = scenario("binomial_spread.json")
        tree = market.tree
        legs = (
            {0: (ONE, Fraction(0))},
            {1: (Fraction(0), ONE), 2: (Fraction(0), Fraction(2))},
            {leaf: (Fraction(-1), Fraction(0)) for leaf in tree.leaves},
        )
        strategy = HedgingStrategy(legs)

        assert strategy.partial_sum(tree, 1) == {1: (ONE, ONE), 2: (ONE, Fraction(2))}
        assert strategy.total(tree).values == (
            (Fraction(0), ONE),
            (Fraction(0), ONE),
            (Fraction(0), Fraction(2)),
            (Fraction(0), Fraction(2)),
        )


class TestTwoAssetFamily:
    """The built-in family on Omega_N."""

    def test_probabilities_are_geometric(self):
        market = build_two_asset_family(Fraction(10), 4)

        assert [market.tree.prob(leaf) for leaf in market.tree.leaves] == [
            Fraction(8, 15),
            Fraction(4, 15),
            Fraction(2, 15),
            Fraction(1, 15),
        ]

    def test_theta_values(self):
        market = build_two_asset_family(Fraction(10), 2)

        assert market.claim("theta").values == (
            (Fraction(-1, 2), Fraction(0)),
            (Fraction(-3, 4), HALF),
        )

    def test_family_document(self):
        market = scenario("two_asset_k10_n4.json")

        assert market.digest()["leaves"] == 4
        assert market.bidask.at(0) == ((ONE, ONE), (Fraction(10), ONE))

    def test_at_least_one_outcome(self):
        with pytest.raises(ValidationError, match="N must be >= 1"):
            build_two_asset_family(Fraction(10), 0)


class TestRandomizedMarket:
    """Products with truncated geometric coordinates."""

    def test_tail_probability(self):
        assert tail_probability(2, 3) == Fraction(1, 7)
        assert tail_probability(2, 4) == Fraction(1, 5)
        assert tail_probability(4, 4) == 0

    def test_product_tree(self):
        market = scenario("binomial_spread.json")

        randomized = randomize_market(market, 3, 2)
        tree = randomized.market.tree

        assert tree.leaf_count == 4 * 3**2
        assert sum(tree.prob(leaf) for leaf in tree.leaves) == 1
        assert randomized.market.claim("digital").values[0] == (ONE, Fraction(0))

    def test_truncation_sets_select_small_draws(self):
        randomized = randomize_market(scenario("frictionless_pair.json"), 3, 1)
        tree = randomized.market.tree

        events = randomized.truncation_sets(1)

        assert events.complement_probability(tree, 1) == tail_probability(1, 3)
        assert all(randomized.coordinates[node] == (1,) for node in events.event(tree, 1))

    @mock.patch.dict(os.environ, {"CONIC_CLAIMS_NODE_BUDGET": "10"}, clear=True)
    def test_node_budget(self):
        with pytest.raises(SizeGuardError, match="budget is 10"):
            randomize_market(scenario("binomial_spread.json"), 4, 1)

    def test_truncation_index_in_range(self):
        with pytest.raises(ValidationError, match="must be in 1..3"):
            randomize_market(scenario("frictionless_pair.json"), 3, 4)


class TestTruncationSets:
    """Adapted truncation events."""

    def test_events_must_be_measurable(self):
        market = scenario("binomial_spread.json")

        with pytest.raises(TruncationError, match="splits the atom of node 1"):
            TruncationSets.from_events(market.tree, {1: [0]})

    def test_survivors_intersect_earlier_events(self):
        market = scenario("binomial_spread.json")
        events = TruncationSets.from_events(market.tree, {1: [0, 1], 2: [0, 2, 3]})

        assert events.survivors(market.tree, 2) == frozenset({3})

    def test_events_must_sit_at_their_time(self):
        market = scenario("binomial_spread.json")

        with pytest.raises(TruncationError, match="not at time 1"):
            TruncationSets({1: frozenset({3})}).validate(market.tree)


def test_trading_cones_from_bidask():
    tree = FiltrationTree.build([Node(0, 0, None, ONE)], 0)
    bidask = BidAskProcess(2, {0: ((ONE, Fraction(3)), (Fraction(1, 2), ONE))})

    cones = build_trading_cones(tree, bidask)

    assert cones.labels_at(0) == ("e2-pi12*e1", "e1-pi21*e2", "-e1", "-e2")
    assert cones.at(0)[0] == (Fraction(-3), ONE)
