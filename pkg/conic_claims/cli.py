import argparse
import json
import logging
import os
import sys
import time
from collections.abc import Callable, Mapping, Sequence
from fractions import Fraction
from pathlib import Path
from typing import Any

from . import __version__, settings
from .cone_engine import arbitrage_check, attainable_cone, dump_cone, lift_cones
from .errors import (
    ArbitrageError,
    ConicClaimsError,
    DecompositionError,
    DimensionError,
    GConditionError,
    InternalCheckError,
    NeatReductionError,
    NotAttainableError,
    NotMaximalError,
    ScenarioSchemaError,
    SizeGuardError,
    ValidationError,
)
from .market_model import (
    Claim,
    HedgingStrategy,
    Market,
    build_two_asset_family,
    dump_scenario,
    load_scenario,
    parse_claim,
)
from .maximality import (
    Verdict,
    density_sequence,
    is_maximal,
    special_decomposition,
    verify_special_decomposition,
)
from .pricing import (
    PriceProcess,
    PricingCertificate,
    check_price_process,
    conditional_values,
    find_consistent_process,
    price_and_value,
    reweighted_process,
    sample_martingale_measures,
)
from .rationals import format_rational, format_vector, parse_rational, parse_vector
from .two_asset_family import analyze

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1  # the input does not describe a valid market or request
EXIT_NEGATIVE = 2  # a negative verdict, reported with its certificate
EXIT_INTERNAL = 3  # a self-check failed

INVALID_INPUT = (ScenarioSchemaError, ValidationError, DimensionError, SizeGuardError)
NEGATIVE_VERDICTS = (
    ArbitrageError,
    NotAttainableError,
    NotMaximalError,
    GConditionError,
    NeatReductionError,
    DecompositionError,
)

type Report = dict[str, Any]


def _claim_document(market: Market, claim: Claim) -> dict[str, list[str]]:
    return {
        str(leaf): format_vector(claim.values[position])
        for position, leaf in enumerate(market.tree.leaves)
    }


def _process_document(process: PriceProcess) -> dict[str, list[str]]:
    return {str(node): format_vector(v) for node, v in sorted(process.values.items())}


def _strategy_document(strategy: HedgingStrategy) -> list[dict[str, list[str]]]:
    return [{str(node): format_vector(v) for node, v in sorted(leg.items())} for leg in strategy.legs]


def _certificate_document(certificate: PricingCertificate | None) -> dict[str, Any] | None:
    if certificate is None:
        return None
    return {
        "reason": certificate.reason,
        "multipliers": {label: format_rational(y) for label, y in certificate.support().items()},
    }


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise ValidationError(f"cannot read '{path}': {e.strerror}") from e


def _json(text: str, what: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioSchemaError(f"{what} is not valid JSON: {e}") from e


def _resolve_claim(market: Market, reference: str) -> Claim:
    """A claim name from the scenario, or an inline ``{leaf: vector}`` literal."""
    if reference.lstrip().startswith("{"):
        return parse_claim(_json(reference, "inline claim"), market.tree, market.assets, "inline")
    return market.claim(reference)


def _load_process(market: Market, path: str) -> PriceProcess:
    document = _json(_read(path), f"price process '{path}'")
    if not isinstance(document, Mapping):
        raise ScenarioSchemaError("a price process maps node ids to vectors")
    return PriceProcess(
        {int(node): parse_vector(v, market.assets) for node, v in document.items()}
    )


def _load_strategy(market: Market, path: str) -> HedgingStrategy:
    document = _json(_read(path), f"decomposition '{path}'")
    if not isinstance(document, list):
        raise ScenarioSchemaError("a decomposition is a list of per-time {node: vector} maps")
    legs = []
    for t, leg in enumerate(document):
        if not isinstance(leg, Mapping):
            raise ScenarioSchemaError(f"decomposition leg {t} is not a {{node: vector}} map")
        legs.append({int(node): parse_vector(v, market.assets) for node, v in leg.items()})
    return HedgingStrategy(tuple(legs))


def _market(args: argparse.Namespace) -> Market:
    return load_scenario(_read(args.scenario), repair=args.repair_netting or None)


def _with_cones(report: Report, market: Market, args: argparse.Namespace) -> Report:
    if args.dump_cones:
        report["cones"] = {
            f"K_{t}": dump_cone(lift_cones(market, [t])) for t in range(market.horizon + 1)
        }
    return report


def cmd_validate(args: argparse.Namespace) -> tuple[int, Report]:
    market = _market(args)
    return EXIT_OK, _with_cones(
        {"market": market.digest(), "claims": sorted(market.claims), "valid": True}, market, args
    )


def cmd_arbitrage(args: argparse.Namespace) -> tuple[int, Report]:
    market = _market(args)
    witness = arbitrage_check(attainable_cone(market))
    report: Report = {"market": market.digest(), "arbitrage": witness is not None}
    if witness is None:
        return EXIT_OK, _with_cones(report, market, args)
    position, asset = witness.position(market.assets)
    report["witness"] = {
        "claim": _claim_document(market, Claim.from_flat(witness.claim, market.assets)),
        "leaf": market.tree.leaves[position],
        "asset": asset + 1,
    }
    return EXIT_NEGATIVE, _with_cones(report, market, args)


def cmd_cpp(args: argparse.Namespace) -> tuple[int, Report]:
    market = _market(args)
    price_zero = _resolve_claim(market, args.price_zero) if args.price_zero else None
    outcome = find_consistent_process(market, strict=args.strict, price_zero=price_zero)
    report: Report = {"market": market.digest(), "strict": args.strict, "found": outcome.found}
    if outcome.process is not None:
        report["process"] = _process_document(outcome.process)
        if outcome.process.slack is not None:
            report["slack"] = format_rational(outcome.process.slack)
        return EXIT_OK, _with_cones(report, market, args)
    report["certificate"] = _certificate_document(outcome.certificate)
    return EXIT_NEGATIVE, _with_cones(report, market, args)


def cmd_price(args: argparse.Namespace) -> tuple[int, Report]:
    market = _market(args)
    claim = _resolve_claim(market, args.claim)
    process = _load_process(market, args.process)
    check_price_process(market, process)
    decomposition = _load_strategy(market, args.decomposition) if args.decomposition else None
    valuation = price_and_value(market, process, claim, decomposition)
    report: Report = {
        "market": market.digest(),
        "price": format_rational(valuation.price),
        "value": {str(n): format_rational(v) for n, v in sorted(valuation.value.values.items())},
    }
    if valuation.terms is not None:
        report["terms"] = [format_rational(v) for v in valuation.terms]
        report["identity"] = valuation.identity_holds
        report["value_equals_hedge"] = valuation.value_equals_hedge
    if args.samples:
        agree = 0
        for measure in sample_martingale_measures(market, process, args.samples, args.seed):
            reweighted = price_and_value(market, reweighted_process(market, process, measure), claim)
            direct = conditional_values(market, process, claim, measure)
            tree = market.tree
            if all(
                direct.at(n.id) * sum(measure[tree.leaves[p]] for p in tree.leaves_below(n.id))
                == reweighted.value.at(n.id) * n.prob
                for n in tree.nodes
            ):
                agree += 1
        report["measures"] = {"sampled": args.samples, "agree": agree}
        if agree != args.samples:
            raise InternalCheckError("reweighted value processes disagree with direct expectations")
    return EXIT_OK, report


def cmd_maximal(args: argparse.Namespace) -> tuple[int, Report]:
    market = _market(args)
    claim = _resolve_claim(market, args.claim)
    result = is_maximal(market, claim, proper=args.proper)
    report: Report = {"market": market.digest(), "verdict": str(result.verdict)}
    if result.improvement is not None:
        report["improvement"] = _claim_document(market, result.improvement)
        report["expected_improvement"] = format_rational(result.improvement_value or 0)
    if result.functional is not None:
        report["functional"] = format_vector(result.functional)
    if result.certificate is not None:
        report["certificate"] = _process_document(result.certificate)
    code = EXIT_OK if result.verdict in (Verdict.MAXIMAL, Verdict.PROPERLY_MAXIMAL) else EXIT_NEGATIVE
    return code, _with_cones(report, market, args)


def cmd_decompose(args: argparse.Namespace) -> tuple[int, Report]:
    market = _market(args)
    claim = _resolve_claim(market, args.claim)
    if args.verify_only:
        strategy = _load_strategy(market, args.verify_only)
        verified = verify_special_decomposition(market, strategy, claim)
        report: Report = {
            "market": market.digest(),
            "decomposition": _strategy_document(strategy),
            "special": list(verified),
        }
        return (EXIT_OK if all(verified) else EXIT_NEGATIVE), report
    decomposition = special_decomposition(market, claim, representatives=True)
    report = {
        "market": market.digest(),
        "decomposition": _strategy_document(decomposition.strategy),
        "special": list(decomposition.verified),
        "functionals": [
            {
                "time": f.time,
                "slack": format_rational(f.slack),
                "per_node": {str(n): format_vector(v) for n, v in sorted(f.per_node.items())},
            }
            for f in decomposition.functionals
        ],
    }
    return EXIT_OK, _with_cones(report, market, args)


def cmd_approximate(args: argparse.Namespace) -> tuple[int, Report]:
    market = _market(args)
    claim = _resolve_claim(market, args.claim)
    try:
        truncations = [int(n) for n in args.n.split(",") if n.strip()]
    except ValueError as e:
        raise ValidationError(f"--n expects comma-separated integers, got '{args.n}'") from e
    sequence = density_sequence(market, claim, args.M, truncations)
    product = sequence.randomized.market
    report: Report = {
        "market": market.digest(),
        "randomized": product.digest(),
        "reduced": sequence.reduced,
        "nontrivial_lineality": sequence.nontrivial_lineality,
        "decomposition": _strategy_document(sequence.decomposition.strategy),
        "entries": [
            {
                "n": entry.n,
                "bound": format_rational(entry.bound),
                "disagreement": format_rational(entry.disagreement),
                "g_condition": None if entry.g_condition is None else entry.g_condition.holds,
                "claim": _claim_document(product, entry.claim),
                "certificate": _process_document(entry.certificate),
            }
            for entry in sequence.entries
        ],
    }
    return EXIT_OK, report


def cmd_example3(args: argparse.Namespace) -> tuple[int, Report]:
    k = parse_rational(args.k)
    if args.emit_scenario:
        print(dump_scenario(build_two_asset_family(k, args.N)))
        return EXIT_OK, {}
    result = analyze(k, args.N)
    report: Report = {
        "k": format_rational(result.k),
        "N": result.outcomes,
        "arbitrage_free": result.arbitrage_free,
        "strict_process": format_vector((1, Fraction(3, 4))),
        "strict_slack": None if result.strict_slack is None else format_rational(result.strict_slack),
        "theta": str(result.theta.verdict),
        "epsilon": format_rational(result.improvement.epsilon),
        "oracle_epsilon": format_rational(result.oracle_epsilon),
        "first_leg": str(result.first_leg.verdict),
        "special": list(result.special),
        "psi_in_displaced_cone": result.closure_member,
        "chain": {str(link.n): link.member for link in result.chain},
        "limit_in_displaced_cone": result.limit_member,
    }
    return EXIT_OK, report


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--dump-cones", action="store_true", help="list lifted cone generators")
    common.add_argument("--repair-netting", action="store_true", help="net out bid-ask chains")
    common.add_argument("--dd-budget", type=int, help="max dimension for double description")
    common.add_argument("--timing", action="store_true", help="report elapsed seconds")
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(
        prog="conic-claims",
        description="Exact analysis of markets with proportional transaction costs.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable[..., tuple[int, Report]], help_text: str, *, scenario: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        if scenario:
            sub.add_argument("scenario")
        sub.set_defaults(handler=handler)
        return sub

    add("validate", cmd_validate, "check a scenario document")
    add("arbitrage", cmd_arbitrage, "search for an arbitrage")
    cpp = add("cpp", cmd_cpp, "find a consistent price process")
    cpp.add_argument("--strict", action="store_true")
    cpp.add_argument("--price-zero", metavar="CLAIM")
    price = add("price", cmd_price, "price a claim under a given process")
    price.add_argument("--claim", required=True)
    price.add_argument("--process", required=True, metavar="FILE")
    price.add_argument("--decomposition", metavar="FILE")
    price.add_argument("--samples", type=int, default=0, help="martingale measures to cross-check")
    maximal = add("maximal", cmd_maximal, "classify a claim")
    maximal.add_argument("--claim", required=True)
    maximal.add_argument("--proper", action="store_true")
    decompose = add("decompose", cmd_decompose, "special decomposition of a claim")
    decompose.add_argument("--claim", required=True)
    decompose.add_argument("--verify-only", metavar="FILE")
    approximate = add("approximate", cmd_approximate, "properly maximal approximations")
    approximate.add_argument("--claim", required=True)
    approximate.add_argument("--M", type=int, required=True)
    approximate.add_argument("--n", required=True, help="comma-separated truncation indices")
    example = add("example3", cmd_example3, "the two-asset family", scenario=False)
    example.add_argument("--k", default="10")
    example.add_argument("--N", type=int, default=4)
    example.add_argument("--emit-scenario", action="store_true")
    return parser


def render(report: Report, output_format: str) -> str:
    if output_format == "json":
        return json.dumps(report, indent=2)
    lines = []
    for key, value in report.items():
        if isinstance(value, dict | list):
            nested = json.dumps(value, indent=2).replace("\n", "\n  ")
            lines.append(f"{key}:\n  {nested}")
        else:
            lines.append(f"{key}: {value}")
    return "\n".join(lines)


def run_command(argv: Sequence[str]) -> int:
    args = _parser().parse_args(argv)
    previous_budget = os.environ.get("CONIC_CLAIMS_DD_BUDGET")
    if args.dd_budget is not None:
        os.environ["CONIC_CLAIMS_DD_BUDGET"] = str(args.dd_budget)

    started = time.perf_counter()
    try:
        code, report = _handle(args)
    finally:
        if previous_budget is None:
            os.environ.pop("CONIC_CLAIMS_DD_BUDGET", None)
        else:
            os.environ["CONIC_CLAIMS_DD_BUDGET"] = previous_budget

    if not report:
        return code
    report = {"command": args.command, "version": __version__, **report, "exit": code}
    if args.timing:
        report["seconds"] = round(time.perf_counter() - started, 3)
    print(render(report, args.format))
    return code


def _handle(args: argparse.Namespace) -> tuple[int, Report]:
    try:
        return args.handler(args)
    except INVALID_INPUT as e:
        return EXIT_INVALID, {"error": type(e).__name__, "message": str(e)}
    except NEGATIVE_VERDICTS as e:
        return EXIT_NEGATIVE, {"error": type(e).__name__, "message": str(e)}
    except InternalCheckError as e:
        logger.exception("internal check failed")
        return EXIT_INTERNAL, {"error": type(e).__name__, "message": str(e)}
    except (ConicClaimsError, ValueError) as e:
        return EXIT_INVALID, {"error": type(e).__name__, "message": str(e)}


def main() -> int:
    logging.basicConfig(level=settings.log_level())
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
