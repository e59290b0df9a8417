import logging
import os

# Defaults
DD_BUDGET = 24  # ambient dimension above which double description is refused
NODE_BUDGET = 4096  # leaves of a randomized product tree
EMM_SAMPLES = 10
LOG_LEVEL = "INFO"


def _env_flag(name: str, *, default: bool = False) -> bool:
    """Read a boolean switch; "true", "1" and "yes" (any case) enable it."""
    return os.getenv(name, str(default)).lower() in (
        "true",
        "1",
        "yes",
    )


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError as e:
        raise ValueError(f"{name} must be an integer, got '{raw}'") from e
    if value < 1:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def dd_budget() -> int:
    return _env_int("CONIC_CLAIMS_DD_BUDGET", DD_BUDGET)


def node_budget() -> int:
    return _env_int("CONIC_CLAIMS_NODE_BUDGET", NODE_BUDGET)


def emm_samples() -> int:
    return _env_int("CONIC_CLAIMS_EMM_SAMPLES", EMM_SAMPLES)


def lp_debug() -> bool:
    """Dump simplex tableaus at DEBUG level while solving."""
    return _env_flag("CONIC_CLAIMS_LP_DEBUG")


def repair_netting() -> bool:
    """Repair netting violations by chain-minima instead of rejecting the input."""
    return _env_flag("CONIC_CLAIMS_REPAIR_NETTING")


def log_level() -> int:
    name = os.getenv("CONIC_CLAIMS_LOG_LEVEL", LOG_LEVEL).upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ValueError(f"CONIC_CLAIMS_LOG_LEVEL is not a logging level: '{name}'")
    return level
