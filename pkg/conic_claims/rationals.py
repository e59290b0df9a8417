import re
from collections.abc import Iterable, Sequence
from fractions import Fraction

type Vector = tuple[Fraction, ...]

ZERO = Fraction(0)
ONE = Fraction(1)

# "p/q", "p" or "-p/q"; no decimals, no exponents
_RATIONAL = re.compile(r"^\s*([+-]?\d+)(?:\s*/\s*(\d+))?\s*$")


def parse_rational(value: str | int | Fraction) -> Fraction:
    """Parse a rational written as "p/q" (or an integer) exactly.

    Decimal strings are rejected.

    Raises:
        ValueError: if the text is not of the form "p/q" or the denominator is 0.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError(f"not a rational: {value!r}")
    if isinstance(value, int):
        return Fraction(value)
    if not isinstance(value, str) or not (match := _RATIONAL.match(value)):
        raise ValueError(f"not a rational of the form 'p/q': {value!r}")
    numerator, denominator = match.groups()
    if denominator is not None and int(denominator) == 0:
        raise ValueError(f"zero denominator in {value!r}")
    return Fraction(int(numerator), int(denominator or 1))


def format_rational(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


def parse_vector(values: Sequence[str | int | Fraction], dimension: int) -> Vector:
    if len(values) != dimension:
        raise ValueError(f"expected a vector of length {dimension}, got {len(values)}")
    return tuple(parse_rational(v) for v in values)


def format_vector(vector: Iterable[Fraction]) -> list[str]:
    return [format_rational(v) for v in vector]


def zeros(dimension: int) -> Vector:
    return (ZERO,) * dimension


def unit(dimension: int, index: int, scale: Fraction = ONE) -> Vector:
    return tuple(scale if i == index else ZERO for i in range(dimension))


def dot(u: Sequence[Fraction], v: Sequence[Fraction]) -> Fraction:
    return sum((a * b for a, b in zip(u, v, strict=True) if a and b), ZERO)


def add(u: Sequence[Fraction], v: Sequence[Fraction]) -> Vector:
    return tuple(a + b for a, b in zip(u, v, strict=True))


def sub(u: Sequence[Fraction], v: Sequence[Fraction]) -> Vector:
    return tuple(a - b for a, b in zip(u, v, strict=True))


def scale(c: Fraction, v: Sequence[Fraction]) -> Vector:
    return tuple(c * a for a in v)


def neg(v: Sequence[Fraction]) -> Vector:
    return tuple(-a for a in v)


def is_zero(v: Iterable[Fraction]) -> bool:
    return not any(v)


def norm1(v: Iterable[Fraction]) -> Fraction:
    return sum((abs(a) for a in v), ZERO)


def linear_combination(
    coefficients: Sequence[Fraction], vectors: Sequence[Sequence[Fraction]], dimension: int
) -> Vector:
    """Return sum(c_i * v_i) exactly; zero coefficients are skipped."""
    total = [ZERO] * dimension
    for c, v in zip(coefficients, vectors, strict=True):
        if not c:
            continue
        for i, a in enumerate(v):
            if a:
                total[i] += c * a
    return tuple(total)
