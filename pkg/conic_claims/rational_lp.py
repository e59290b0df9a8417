"""Exact rational simplex with self-validating certificates.

Two-phase primal simplex on a sparse tableau of ``Fraction`` rows with Bland's
rule (lowest index enters, ties in the ratio test leave by lowest basic
index). Every outcome carries a certificate that ``verify_outcome`` checks by
re-multiplication:

* optimal: multipliers ``y`` over ``LinearProgram.rows()`` with
  ``sum(y_r * a_r) == c`` and ``sum(y_r * b_r) == value``. For a maximization
  ``<=`` rows carry ``y >= 0`` and ``>=`` rows ``y <= 0``; signs flip for a
  minimization.
* infeasible: a Farkas vector ``y`` over ``rows()`` with ``>=`` rows
  ``y >= 0``, ``<=`` rows ``y <= 0``, ``sum(y_r * a_r) == 0`` and
  ``sum(y_r * b_r) > 0``.
* unbounded: a ray that is a feasible direction and strictly improves the
  objective.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from fractions import Fraction

from . import settings
from .errors import DimensionError
from .rationals import ZERO, Vector

logger = logging.getLogger(__name__)


class Relation(StrEnum):
    LE = "<="
    EQ = "="
    GE = ">="


class Sense(StrEnum):
    MAX = "max"
    MIN = "min"


class Status(StrEnum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    FEASIBLE = "feasible"


type Coefficients = Mapping[int, Fraction]


@dataclass(frozen=True)
class Row:
    coefficients: Coefficients
    relation: Relation
    rhs: Fraction
    label: str = ""


@dataclass(frozen=True)
class Bound:
    lower: Fraction | None = ZERO
    upper: Fraction | None = None


FREE = Bound(lower=None, upper=None)


@dataclass
class LinearProgram:
    """A linear program over ``variables`` rational unknowns.

    Constraint rows are stored sparsely. Variables default to ``x >= 0``.
    """

    variables: int
    constraints: list[Row] = field(default_factory=list)
    objective: Coefficients | None = None
    sense: Sense = Sense.MAX
    bounds: list[Bound] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.variables < 1:
            raise DimensionError("a linear program needs at least one variable")
        if not self.bounds:
            self.bounds = [Bound() for _ in range(self.variables)]

    def add_constraint(
        self,
        coefficients: Coefficients | Sequence[Fraction],
        relation: Relation,
        rhs: Fraction,
        label: str = "",
    ) -> int:
        row = Row(self._sparse(coefficients), relation, Fraction(rhs), label)
        self.constraints.append(row)
        return len(self.constraints) - 1

    def set_objective(
        self, coefficients: Coefficients | Sequence[Fraction], sense: Sense = Sense.MAX
    ) -> None:
        self.objective = self._sparse(coefficients)
        self.sense = sense

    def set_bound(self, index: int, bound: Bound) -> None:
        self._check_index(index)
        self.bounds[index] = bound

    def rows(self) -> list[Row]:
        """Constraints followed by one row per finite variable bound."""
        rows = list(self.constraints)
        for j, bound in enumerate(self.bounds):
            if bound.lower is not None:
                rows.append(Row({j: Fraction(1)}, Relation.GE, bound.lower, f"x{j}>=lb"))
            if bound.upper is not None:
                rows.append(Row({j: Fraction(1)}, Relation.LE, bound.upper, f"x{j}<=ub"))
        return rows

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.variables:
            raise DimensionError(
                f"variable index {index} outside 0..{self.variables - 1}"
            )

    def _sparse(self, coefficients: Coefficients | Sequence[Fraction]) -> dict[int, Fraction]:
        if isinstance(coefficients, Mapping):
            items = coefficients.items()
        else:
            if len(coefficients) != self.variables:
                raise DimensionError(
                    f"row of length {len(coefficients)} for {self.variables} variables"
                )
            items = enumerate(coefficients)
        sparse = {}
        for j, value in items:
            self._check_index(j)
            if value:
                sparse[j] = Fraction(value)
        return sparse


@dataclass(frozen=True)
class LpOutcome:
    status: Status
    point: Vector | None = None
    value: Fraction | None = None
    certificate: Vector | None = None
    ray: Vector | None = None

    @property
    def is_feasible(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.FEASIBLE, Status.UNBOUNDED)


def _evaluate(coefficients: Coefficients, point: Sequence[Fraction]) -> Fraction:
    return sum((v * point[j] for j, v in coefficients.items()), ZERO)


def _holds(relation: Relation, lhs: Fraction, rhs: Fraction) -> bool:
    if relation is Relation.LE:
        return lhs <= rhs
    if relation is Relation.GE:
        return lhs >= rhs
    return lhs == rhs


@dataclass
class _StandardForm:
    """``M w = beta, w >= 0`` built from a LinearProgram.

    Column layout: structural ``w``, then one slack per inequality row, then
    one artificial per row. ``x = shift + T w`` where each original variable
    maps to one column (shifted by its lower bound, or reflected from its
    upper bound) or to a pair of columns when free.
    """

    lp: LinearProgram
    shift: list[Fraction] = field(default_factory=list)
    columns_of: list[list[tuple[int, int]]] = field(default_factory=list)
    structural: int = 0
    explicit: list[Row] = field(default_factory=list)
    signs: list[int] = field(default_factory=list)
    rows: list[dict[int, Fraction]] = field(default_factory=list)
    rhs: list[Fraction] = field(default_factory=list)
    slack_columns: int = 0

    @classmethod
    def build(cls, lp: LinearProgram) -> "_StandardForm":
        form = cls(lp)
        column = 0
        for j, bound in enumerate(lp.bounds):
            if bound.lower is not None:
                form.shift.append(bound.lower)
                form.columns_of.append([(column, 1)])
                column += 1
                if bound.upper is not None:
                    form.explicit.append(
                        Row({j: Fraction(1)}, Relation.LE, bound.upper, f"x{j}<=ub")
                    )
            elif bound.upper is not None:
                form.shift.append(bound.upper)
                form.columns_of.append([(column, -1)])
                column += 1
            else:
                form.shift.append(ZERO)
                form.columns_of.append([(column, 1), (column + 1, -1)])
                column += 2
        form.structural = column
        form.explicit = list(lp.constraints) + form.explicit

        slack = form.structural
        for row in form.explicit:
            coefficients: dict[int, Fraction] = {}
            for j, value in row.coefficients.items():
                for col, sign in form.columns_of[j]:
                    coefficients[col] = coefficients.get(col, ZERO) + sign * value
            rhs = row.rhs - _evaluate(row.coefficients, form.shift)
            if row.relation is Relation.LE:
                coefficients[slack] = Fraction(1)
                slack += 1
            elif row.relation is Relation.GE:
                coefficients[slack] = Fraction(-1)
                slack += 1
            sign = -1 if rhs < 0 else 1
            form.signs.append(sign)
            form.rows.append({c: sign * v for c, v in coefficients.items() if v})
            form.rhs.append(sign * rhs)
        form.slack_columns = slack - form.structural
        return form

    @property
    def first_artificial(self) -> int:
        return self.structural + self.slack_columns

    def to_original(self, w: dict[int, Fraction]) -> Vector:
        return tuple(
            self.shift[j] + sum((sign * w.get(col, ZERO) for col, sign in cols), ZERO)
            for j, cols in enumerate(self.columns_of)
        )

    def direction_to_original(self, w: dict[int, Fraction]) -> Vector:
        return tuple(
            sum((sign * w.get(col, ZERO) for col, sign in cols), ZERO)
            for cols in self.columns_of
        )

    def structural_costs(self, objective: Coefficients) -> dict[int, Fraction]:
        costs: dict[int, Fraction] = {}
        for j, value in objective.items():
            for col, sign in self.columns_of[j]:
                costs[col] = costs.get(col, ZERO) + sign * value
        return {c: v for c, v in costs.items() if v}

    def certificate(self, multipliers: Sequence[Fraction], target: Coefficients) -> Vector:
        """Lift standard-row multipliers to multipliers over ``lp.rows()``.

        ``multipliers`` are already sign-corrected to the un-flipped explicit
        rows. Bound-row multipliers are chosen so that the combination of all
        rows equals ``target`` (the objective, or zero for Farkas vectors).
        """
        lp = self.lp
        combined = [ZERO] * lp.variables
        for g, row in zip(multipliers, self.explicit, strict=True):
            if g:
                for j, value in row.coefficients.items():
                    combined[j] += g * value
        constraint_count = len(lp.constraints)
        upper_rows = iter(multipliers[constraint_count:])
        certificate = list(multipliers[:constraint_count])
        for j, bound in enumerate(lp.bounds):
            residual = target.get(j, ZERO) - combined[j]
            if bound.lower is not None:
                certificate.append(residual)
                if bound.upper is not None:
                    certificate.append(next(upper_rows))
            elif bound.upper is not None:
                certificate.append(residual)
        return tuple(certificate)


class _Tableau:
    def __init__(self, form: _StandardForm) -> None:
        self.form = form
        first_artificial = form.first_artificial
        self.rows = [dict(row) for row in form.rows]
        for r, row in enumerate(self.rows):
            row[first_artificial + r] = Fraction(1)
        self.rhs = list(form.rhs)
        self.basis = [first_artificial + r for r in range(len(self.rows))]
        self.objective: dict[int, Fraction] = {}
        self.objective_value = ZERO
        self.banned: set[int] = set()
        self.pivots = 0

    def artificial(self, r: int) -> int:
        return self.form.first_artificial + r

    def pivot(self, r: int, j: int) -> None:
        pivot_row = self.rows[r]
        a = pivot_row[j]
        if a != 1:
            pivot_row = {k: v / a for k, v in pivot_row.items()}
            self.rows[r] = pivot_row
            self.rhs[r] /= a
        pivot_rhs = self.rhs[r]
        for i, row in enumerate(self.rows):
            if i != r and (f := row.get(j)):
                self._eliminate(row, pivot_row, f)
                self.rhs[i] -= f * pivot_rhs
        if f := self.objective.get(j):
            self._eliminate(self.objective, pivot_row, f)
            self.objective_value -= f * pivot_rhs
        self.basis[r] = j
        self.pivots += 1

    @staticmethod
    def _eliminate(row: dict[int, Fraction], pivot_row: dict[int, Fraction], f: Fraction) -> None:
        for k, v in pivot_row.items():
            value = row.get(k, ZERO) - f * v
            if value:
                row[k] = value
            else:
                row.pop(k, None)

    def set_costs(self, costs: dict[int, Fraction]) -> None:
        """Install reduced costs ``z_j - c_j`` for maximizing ``costs . w``."""
        objective = {k: -v for k, v in costs.items()}
        value = ZERO
        for r, basic in enumerate(self.basis):
            if c := costs.get(basic):
                self._eliminate(objective, self.rows[r], -c)
                value += c * self.rhs[r]
        self.objective = {k: v for k, v in objective.items() if v}
        self.objective_value = value

    def entering(self) -> int | None:
        candidates = [
            j for j, v in self.objective.items() if v < 0 and j not in self.banned
        ]
        return min(candidates) if candidates else None

    def leaving(self, j: int) -> int | None:
        best: int | None = None
        best_ratio = ZERO
        for r, row in enumerate(self.rows):
            a = row.get(j)
            if a is None or a <= 0:
                continue
            ratio = self.rhs[r] / a
            if (
                best is None
                or ratio < best_ratio
                or (ratio == best_ratio and self.basis[r] < self.basis[best])
            ):
                best, best_ratio = r, ratio
        return best

    def run(self) -> int | None:
        """Pivot to optimality; return an unbounded entering column, if any."""
        debug = settings.lp_debug()
        while (j := self.entering()) is not None:
            r = self.leaving(j)
            if r is None:
                return j
            self.pivot(r, j)
            if debug:
                logger.debug(self.dump())
        return None

    def values(self) -> dict[int, Fraction]:
        return {basic: self.rhs[r] for r, basic in enumerate(self.basis) if self.rhs[r]}

    def duals(self, artificial_cost: Fraction) -> list[Fraction]:
        return [
            self.objective.get(self.artificial(r), ZERO) + artificial_cost
            for r in range(len(self.rows))
        ]

    def drive_out_artificials(self) -> None:
        first_artificial = self.form.first_artificial
        for r, basic in enumerate(self.basis):
            if basic < first_artificial:
                continue
            columns = [k for k in self.rows[r] if k < first_artificial]
            if columns:
                self.pivot(r, min(columns))

    def dump(self) -> str:
        lines = [f"tableau after {self.pivots} pivots, basis {self.basis}"]
        for r, row in enumerate(self.rows):
            cells = " ".join(f"{k}:{v}" for k, v in sorted(row.items()))
            lines.append(f"  r{r} [{cells}] | {self.rhs[r]}")
        cells = " ".join(f"{k}:{v}" for k, v in sorted(self.objective.items()))
        lines.append(f"  z [{cells}] | {self.objective_value}")
        return "\n".join(lines)


def lp_solve(lp: LinearProgram) -> LpOutcome:
    """Solve ``lp`` exactly and attach a certificate for the verdict."""
    form = _StandardForm.build(lp)
    tableau = _Tableau(form)
    first_artificial = form.first_artificial

    # Phase one: maximize minus the sum of artificials.
    tableau.set_costs(
        {tableau.artificial(r): Fraction(-1) for r in range(len(tableau.rows))}
    )
    tableau.run()
    if tableau.objective_value < 0:
        duals = tableau.duals(Fraction(-1))
        farkas = [-y * s for y, s in zip(duals, form.signs, strict=True)]
        certificate = form.certificate(farkas, {})
        logger.debug(f"infeasible after {tableau.pivots} pivots")
        return LpOutcome(Status.INFEASIBLE, certificate=certificate)

    tableau.drive_out_artificials()
    tableau.banned = set(range(first_artificial, first_artificial + len(tableau.rows)))

    if lp.objective is None:
        point = form.to_original(tableau.values())
        return LpOutcome(Status.FEASIBLE, point=point)

    maximize = lp.sense is Sense.MAX
    objective = dict(lp.objective) if maximize else {j: -v for j, v in lp.objective.items()}
    tableau.set_costs(form.structural_costs(objective))
    unbounded_column = tableau.run()
    point = form.to_original(tableau.values())

    if unbounded_column is not None:
        direction = {unbounded_column: Fraction(1)}
        for r, basic in enumerate(tableau.basis):
            if a := tableau.rows[r].get(unbounded_column):
                direction[basic] = direction.get(basic, ZERO) - a
        ray = form.direction_to_original(direction)
        logger.debug(f"unbounded after {tableau.pivots} pivots")
        return LpOutcome(Status.UNBOUNDED, point=point, ray=ray)

    duals = tableau.duals(ZERO)
    multipliers = [y * s for y, s in zip(duals, form.signs, strict=True)]
    certificate = form.certificate(multipliers, objective)
    value = _evaluate(lp.objective, point)
    if not maximize:
        certificate = tuple(-y for y in certificate)
    logger.debug(f"optimal value {value} after {tableau.pivots} pivots")
    return LpOutcome(Status.OPTIMAL, point=point, value=value, certificate=certificate)


def _combination(rows: Sequence[Row], multipliers: Sequence[Fraction], size: int) -> list[Fraction]:
    combined = [ZERO] * size
    for y, row in zip(multipliers, rows, strict=True):
        if y:
            for j, value in row.coefficients.items():
                combined[j] += y * value
    return combined


def _signs_ok(rows: Sequence[Row], multipliers: Sequence[Fraction], *, le_nonnegative: bool) -> bool:
    for y, row in zip(multipliers, rows, strict=True):
        if row.relation is Relation.LE and (y < 0 if le_nonnegative else y > 0):
            return False
        if row.relation is Relation.GE and (y > 0 if le_nonnegative else y < 0):
            return False
    return True


def verify_outcome(lp: LinearProgram, outcome: LpOutcome) -> bool:
    """Re-check ``outcome`` against ``lp`` by exact re-multiplication."""
    rows = lp.rows()
    if outcome.point is not None:
        if len(outcome.point) != lp.variables:
            return False
        for row in rows:
            if not _holds(row.relation, _evaluate(row.coefficients, outcome.point), row.rhs):
                return False

    if outcome.status is Status.FEASIBLE:
        return outcome.point is not None

    if outcome.status is Status.INFEASIBLE:
        y = outcome.certificate
        if y is None or len(y) != len(rows):
            return False
        if not _signs_ok(rows, [-v for v in y], le_nonnegative=True):
            return False
        if any(_combination(rows, y, lp.variables)):
            return False
        return sum((v * row.rhs for v, row in zip(y, rows, strict=True)), ZERO) > 0

    objective = lp.objective or {}
    maximize = lp.sense is Sense.MAX

    if outcome.status is Status.UNBOUNDED:
        r = outcome.ray
        if r is None or outcome.point is None:
            return False
        for row in rows:
            if not _holds(row.relation, _evaluate(row.coefficients, r), ZERO):
                return False
        gain = _evaluate(objective, r)
        return gain > 0 if maximize else gain < 0

    y = outcome.certificate
    if y is None or outcome.point is None or outcome.value is None or len(y) != len(rows):
        return False
    if not _signs_ok(rows, y, le_nonnegative=maximize):
        return False
    combined = _combination(rows, y, lp.variables)
    if any(combined[j] != objective.get(j, ZERO) for j in range(lp.variables)):
        return False
    if _evaluate(objective, outcome.point) != outcome.value:
        return False
    return sum((v * row.rhs for v, row in zip(y, rows, strict=True)), ZERO) == outcome.value
