"""Exact linear algebra over the rationals, backed by sympy matrices."""

from collections.abc import Sequence
from fractions import Fraction

import sympy

from .rationals import Vector


def _to_sympy(value: Fraction) -> sympy.Rational:
    return sympy.Rational(value.numerator, value.denominator)


def _to_fraction(value: sympy.Expr) -> Fraction:
    rational = sympy.Rational(value)
    return Fraction(int(rational.p), int(rational.q))


def to_matrix(rows: Sequence[Sequence[Fraction]], columns: int) -> sympy.Matrix:
    if not rows:
        return sympy.zeros(0, columns)
    return sympy.Matrix([[_to_sympy(v) for v in row] for row in rows])


def _column_to_vector(column: sympy.Matrix) -> Vector:
    return tuple(_to_fraction(v) for v in column)


def rank(vectors: Sequence[Sequence[Fraction]], dimension: int) -> int:
    if not vectors:
        return 0
    return to_matrix(vectors, dimension).rank()


def row_basis(vectors: Sequence[Sequence[Fraction]], dimension: int) -> list[Vector]:
    """Canonical basis of span(vectors): the nonzero rows of the reduced echelon form."""
    if not vectors:
        return []
    reduced, pivots = to_matrix(vectors, dimension).rref()
    return [_column_to_vector(reduced.row(i)) for i in range(len(pivots))]


def nullspace(rows: Sequence[Sequence[Fraction]], columns: int) -> list[Vector]:
    """Basis of {x : row . x = 0 for every row}."""
    if not rows:
        return [tuple(Fraction(int(i == j)) for j in range(columns)) for i in range(columns)]
    return [_column_to_vector(v) for v in to_matrix(rows, columns).nullspace()]


def orthogonal_complement(basis: Sequence[Sequence[Fraction]], dimension: int) -> list[Vector]:
    return nullspace(basis, dimension)


def in_span(vector: Sequence[Fraction], basis: Sequence[Sequence[Fraction]], dimension: int) -> bool:
    if not any(vector):
        return True
    return rank([*basis, vector], dimension) == rank(basis, dimension)


def solve(
    columns: Sequence[Sequence[Fraction]], target: Sequence[Fraction]
) -> Vector | None:
    """Solve sum_j c_j * columns[j] = target exactly.

    Returns the unique solution, or None when the system is singular or
    inconsistent.
    """
    size = len(target)
    matrix = to_matrix(columns, size).T
    rhs = sympy.Matrix([_to_sympy(v) for v in target])
    try:
        solution, parameters = matrix.gauss_jordan_solve(rhs)
    except ValueError:
        return None
    if parameters.shape[0]:
        return None
    return _column_to_vector(solution)
