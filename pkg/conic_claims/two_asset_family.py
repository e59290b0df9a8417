"""The two-asset, one-period family with a maximal but improper claim.

At time 0 asset 2 trades at 1 (buy) and 1/k (sell); at time 1 at k and 1/2.
On Omega = N the claim theta = (1 - 1/w) e2 - (1 - 1/(2w)) e1 is maximal but
not properly maximal. On the truncations Omega_N = {1..N} both properties
fail, by a uniform improvement of size 1/(2N) in asset 2; this module
measures that gap and replays the arbitrage chain x_n.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction

from . import linalg
from .cone_engine import (
    Displacement,
    LiftedCone,
    arbitrage_check,
    attainable_cone,
    displaced_cone,
    member,
)
from .errors import ArbitrageError, ValidationError
from .market_model import Claim, HedgingStrategy, Market, build_two_asset_family
from .maximality import (
    MaximalityReport,
    UniformImprovement,
    is_maximal,
    max_uniform_improvement,
    verify_special_decomposition,
)
from .pricing import PriceProcess, check_price_process, terminal_pairing
from .rational_lp import LinearProgram, Relation, Sense, Status, lp_solve
from .rationals import ONE, ZERO, Vector, add, scale, sub

logger = logging.getLogger(__name__)

FIRST_LEG = (Fraction(-1), ONE)  # e2 - e1
SELL_BACK = (ONE, Fraction(-2))  # e1 - 2 e2
STRICT_PRICE = (ONE, Fraction(3, 4))
ZERO_PRICE = (ONE, ONE)  # prices e2 - e1 at zero


@dataclass(frozen=True)
class FirstLegRange:
    """Range of (a0, b0) left feasible by a1, b1 >= 0."""

    a0: tuple[Fraction, Fraction]
    b0: tuple[Fraction, Fraction]

    @property
    def forced(self) -> tuple[Fraction, Fraction] | None:
        if self.a0[0] == self.a0[1] and self.b0[0] == self.b0[1]:
            return self.a0[0], self.b0[0]
        return None


@dataclass(frozen=True)
class ChainLink:
    n: int
    claim: Claim
    member: bool


@dataclass(frozen=True)
class FamilyReport:
    k: Fraction
    outcomes: int
    arbitrage_free: bool
    strict_slack: Fraction | None
    theta: MaximalityReport
    improvement: UniformImprovement
    oracle_epsilon: Fraction
    first_leg: MaximalityReport
    special: tuple[bool, ...]
    closure_member: bool
    chain: tuple[ChainLink, ...] = field(default_factory=tuple)
    limit_member: bool = False


def leg_coefficients(k: Fraction, a0: Fraction, b0: Fraction) -> tuple[Fraction, Fraction]:
    """(a1, b1) with theta_0 - xi_0 = a1 (e1 - 2 e2) + b1 (e2 - k e1).

    xi_0 = a0 (e2 - e1) + b0 (e1 - k e2) is a competing first leg.

    Raises:
        ValidationError: the two time-1 directions are parallel (k = 1/2).
    """
    k = Fraction(k)
    xi0 = add(scale(Fraction(a0), FIRST_LEG), scale(Fraction(b0), (ONE, -k)))
    solution = linalg.solve([SELL_BACK, (-k, ONE)], sub(FIRST_LEG, xi0))
    if solution is None:
        raise ValidationError(f"time-1 trading directions are parallel for k={k}")
    a1, b1 = solution
    return a1, b1


def closed_form_coefficients(k: Fraction, a0: Fraction, b0: Fraction) -> tuple[Fraction, Fraction]:
    """The same pair written out explicitly."""
    k, a0, b0 = Fraction(k), Fraction(a0), Fraction(b0)
    b1 = (1 - a0 + (2 - k) * b0) / (2 * k - 1)
    a1 = (k - 1) * (-1 + a0 - (k + 1) * b0) / (2 * k - 1)
    return a1, b1


def forced_first_leg(k: Fraction) -> FirstLegRange:
    """Extremes of a0 and b0 over {a0, b0 >= 0 : a1 >= 0, b1 >= 0}.

    The constraints are read off ``leg_coefficients`` as affine maps, so the
    linear solve itself drives the LP.
    """
    origin = leg_coefficients(k, ZERO, ZERO)
    along_a = sub(leg_coefficients(k, ONE, ZERO), origin)
    along_b = sub(leg_coefficients(k, ZERO, ONE), origin)
    lp = LinearProgram(2)
    for i in range(2):
        lp.add_constraint({0: along_a[i], 1: along_b[i]}, Relation.GE, -origin[i])
    ranges = []
    for j in range(2):
        extremes = []
        for sense in (Sense.MIN, Sense.MAX):
            lp.set_objective({j: ONE}, sense)
            outcome = lp_solve(lp)
            if outcome.status is not Status.OPTIMAL or outcome.value is None:
                raise ValidationError(f"first-leg LP ended {outcome.status} for k={k}")
            extremes.append(outcome.value)
        ranges.append((extremes[0], extremes[1]))
    return FirstLegRange(ranges[0], ranges[1])


def trading_decomposition(market: Market) -> HedgingStrategy:
    """xi_0 = e2 - e1, xi_1(w) = (1/(2w)) (e1 - 2 e2): the strategy attaining theta."""
    tree = market.tree
    return HedgingStrategy(
        (
            {tree.root: FIRST_LEG},
            {leaf: scale(Fraction(1, 2 * leaf), SELL_BACK) for leaf in tree.leaves},
        )
    )


def explicit_improvement(outcomes: int) -> tuple[Fraction, dict[int, Fraction]]:
    """a = 1 - 1/(2N) and B(w) = 1/(2w) - 1/(2N), improving theta by (0, 1/(2N))."""
    a = 1 - Fraction(1, 2 * outcomes)
    return a, {w: Fraction(1, 2 * w) - Fraction(1, 2 * outcomes) for w in range(1, outcomes + 1)}


def _improved_claim(outcomes: int) -> Claim:
    a, b = explicit_improvement(outcomes)
    return Claim(
        tuple(
            add(scale(a, FIRST_LEG), scale(b[w], SELL_BACK)) for w in range(1, outcomes + 1)
        )
    )


def arbitrage_chain(market: Market, n: int) -> ChainLink:
    """x_n = (e2 - e1/2) 1(w <= n), tested against A - mF_0+ theta."""
    outcomes = market.tree.leaf_count
    if not 1 <= n <= outcomes:
        raise ValidationError(f"chain index must be in 1..{outcomes}, got {n}")
    direction = (Fraction(-1, 2), ONE)
    zero = (ZERO, ZERO)
    claim = Claim(tuple(direction if w <= n else zero for w in range(1, outcomes + 1)))
    cone = _theta_displaced(market)
    return ChainLink(n, claim, member(cone, claim.flat()).is_member)


def _theta_displaced(market: Market) -> LiftedCone:
    theta = market.claim("theta")
    return displaced_cone(
        attainable_cone(market),
        theta.flat(),
        mode=Displacement.MEASURABLE,
        tree=market.tree,
        time=0,
        label="θ",
        check=False,
    )


def closure_representation(market: Market) -> tuple[Claim, bool]:
    """psi = -xi_1 = xi_0 - theta and whether it lies in A - R+ theta."""
    strategy = trading_decomposition(market)
    psi = Claim(tuple(scale(-ONE, strategy.legs[1][leaf]) for leaf in market.tree.leaves))
    return psi, member(_theta_displaced(market), psi.flat()).is_member


def _constant_process(market: Market, vector: Vector) -> PriceProcess:
    return PriceProcess({n.id: vector for n in market.tree.nodes})


def analyze(k: Fraction, outcomes: int) -> FamilyReport:
    """Everything the family shows on Omega_N, each item checked exactly.

    Raises:
        ArbitrageError: the chosen k leaves an arbitrage.
    """
    market = build_two_asset_family(Fraction(k), outcomes)
    if arbitrage_check(attainable_cone(market)) is not None:
        raise ArbitrageError(f"the family has an arbitrage for k={k}")
    strict_slack = check_price_process(market, _constant_process(market, STRICT_PRICE), strict=True)

    theta = market.claim("theta")
    theta_report = is_maximal(market, theta)
    improvement = max_uniform_improvement(market, theta, asset=1)
    oracle = _improved_claim(outcomes).minus(theta)
    oracle_epsilon = oracle.values[0][1]
    if not member(attainable_cone(market), _improved_claim(outcomes).flat()).is_member:
        raise ValidationError("explicit improvement strategy is not attainable")

    first = market.claim("e2_minus_e1")
    first_report = is_maximal(market, first)
    check_price_process(market, _constant_process(market, ZERO_PRICE))
    if terminal_pairing(market, _constant_process(market, ZERO_PRICE), first) != 0:
        raise ValidationError("Z = (1, 1) does not price e2 - e1 at zero")

    special = verify_special_decomposition(market, trading_decomposition(market), theta)
    _, closure_member = closure_representation(market)
    chain = tuple(arbitrage_chain(market, n) for n in range(2, outcomes + 1))
    limit = Claim.constant((Fraction(1, 2), ZERO), outcomes)
    limit_member = member(_theta_displaced(market), limit.flat()).is_member
    logger.info(
        f"k={k}, N={outcomes}: ε*={improvement.epsilon}, oracle {oracle_epsilon}, "
        f"special={special}"
    )
    return FamilyReport(
        Fraction(k),
        outcomes,
        arbitrage_free=True,
        strict_slack=strict_slack,
        theta=theta_report,
        improvement=improvement,
        oracle_epsilon=oracle_epsilon,
        first_leg=first_report,
        special=special,
        closure_member=closure_member,
        chain=chain,
        limit_member=limit_member,
    )
