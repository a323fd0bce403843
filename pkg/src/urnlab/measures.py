"""Counting measures, finite measures, and test functions on the color space.

Colors are plain Python values: an ``int`` is a tag in a finite color set,
a ``float`` is a point of the unit interval, and a tuple of the two is a
point of a product space. Sampled continuum colors are compared by exact
64-bit equality; distinct draws are almost surely distinct, so merging by
equality is only ever triggered by explicit copying.

Exactness discipline: atomic measures and tag-table functions keep whatever
numeric type they were built with (``int``, ``Fraction``, ``float``), so a
kernel declared with rational weights yields rational integrals end to end.
Density measures live on [0,1] and integrate exactly only against
piecewise-polynomial functions (or a declared integral).
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple, Union

Color = Union[int, float, tuple]


class MeasureError(Exception):
    """Base class for measure-layer errors."""


class EmptyMeasureError(MeasureError):
    """Raised when an operation needs a non-zero measure."""


class UnsupportedPairError(MeasureError):
    """Raised when no exact integration path exists for (measure, function)."""


# ---------------------------------------------------------------------------
# Color spaces
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FiniteColors:
    """Tags 0 .. d-1."""

    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("finite color space needs d >= 1")

    def contains(self, c: Color) -> bool:
        return isinstance(c, int) and not isinstance(c, bool) and 0 <= c < self.d


@dataclass(frozen=True)
class UnitInterval:
    """Points of [0, 1], stored as 64-bit floats."""

    def contains(self, c: Color) -> bool:
        return isinstance(c, float) and 0.0 <= c <= 1.0


@dataclass(frozen=True)
class ProductSpace:
    left: object
    right: object

    def contains(self, c: Color) -> bool:
        return (
            isinstance(c, tuple)
            and len(c) == 2
            and self.left.contains(c[0])
            and self.right.contains(c[1])
        )


ColorSpace = Union[FiniteColors, UnitInterval, ProductSpace]


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------
class TestFunction:
    """A bounded measurable function on the color space.

    Subclasses carry enough structure for exact integration where possible;
    ``mu_integral`` is an optional declared value of the integral against the
    intensity measure the function is meant to be used with, serving as the
    escape hatch for functions with no structural integration path.
    """

    sup_bound: float
    mu_integral: Optional[float]
    name: str

    def __call__(self, c: Color):
        raise NotImplementedError


class ConstantFunction(TestFunction):
    """f == value on any color space."""

    def __init__(self, value, name: Optional[str] = None):
        self.value = value
        self.sup_bound = abs(float(value))
        self.mu_integral = None
        self.name = name if name is not None else f"const({value})"

    def __call__(self, c: Color):
        return self.value

    def __repr__(self):
        return f"ConstantFunction({self.value!r})"


ONE = ConstantFunction(1, name="1")


class TagFunction(TestFunction):
    """f given by a value table over tags 0 .. d-1.

    Values keep their numeric type, so rational tables stay rational through
    integration against rational atomic measures.
    """

    def __init__(self, values: Sequence, name: Optional[str] = None):
        if len(values) < 1:
            raise ValueError("empty tag table")
        self.values = tuple(values)
        self.sup_bound = max(abs(float(v)) for v in self.values)
        self.mu_integral = None
        self.name = name if name is not None else f"table{self.values}"

    def __call__(self, c: Color):
        return self.values[c]

    @staticmethod
    def indicator(tag: int, d: int, name: Optional[str] = None) -> "TagFunction":
        vals = [0] * d
        vals[tag] = 1
        return TagFunction(vals, name=name or f"1_tag{tag}")

    def __repr__(self):
        return f"TagFunction({list(self.values)!r})"


class PiecewisePolynomial(TestFunction):
    """Piecewise polynomial on [0,1] with exact Lebesgue integration.

    ``breaks`` is an ascending grid 0 = b0 < ... < bm = 1 and ``coeffs[i]``
    holds ascending-power coefficients on [b_i, b_{i+1}). The value at 1.0 is
    taken from the last piece. Indicators, step functions and polynomials are
    all special cases, and the family is closed under products and linear
    combinations, which keeps sigma^2 and covariance constants exact.
    """

    def __init__(self, breaks: Sequence[float], coeffs: Sequence[Sequence[float]],
                 name: Optional[str] = None):
        breaks = [float(b) for b in breaks]
        if len(breaks) < 2 or breaks[0] != 0.0 or breaks[-1] != 1.0:
            raise ValueError("breaks must run from 0.0 to 1.0")
        if any(b1 <= b0 for b0, b1 in zip(breaks, breaks[1:])):
            raise ValueError("breaks must be strictly increasing")
        if len(coeffs) != len(breaks) - 1:
            raise ValueError("need one coefficient vector per piece")
        self.breaks = tuple(breaks)
        self.coeffs = tuple(tuple(float(c) for c in piece) or (0.0,) for piece in coeffs)
        self.sup_bound = self._sup_estimate()
        self.mu_integral = None
        self.name = name if name is not None else "pp"

    def _sup_estimate(self) -> float:
        # crude but valid bound: sum of |coefficients| per piece
        return max(sum(abs(c) for c in piece) for piece in self.coeffs)

    def __call__(self, s: float) -> float:
        i = bisect_right(self.breaks, s) - 1
        if i < 0:
            i = 0
        elif i >= len(self.coeffs):
            i = len(self.coeffs) - 1
        acc = 0.0
        for c in reversed(self.coeffs[i]):
            acc = acc * s + c
        return acc

    def lebesgue_integral(self) -> float:
        """Exact integral of f over [0,1]."""
        total = 0.0
        for (b0, b1), piece in zip(zip(self.breaks, self.breaks[1:]), self.coeffs):
            for k, c in enumerate(piece):
                total += c * (b1 ** (k + 1) - b0 ** (k + 1)) / (k + 1)
        return total

    @staticmethod
    def indicator(lo: float, hi: float, name: Optional[str] = None) -> "PiecewisePolynomial":
        """Indicator of [lo, hi) within [0,1] (right-closed when hi == 1)."""
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("need 0 <= lo < hi <= 1")
        breaks, vals = [0.0], []
        if lo > 0.0:
            breaks.append(lo)
            vals.append((0.0,))
        vals.append((1.0,))
        if hi < 1.0:
            breaks.append(hi)
            vals.append((0.0,))
        breaks.append(1.0)
        return PiecewisePolynomial(breaks, vals, name=name or f"ind[{lo},{hi})")

    @staticmethod
    def polynomial(coeffs: Sequence[float], name: Optional[str] = None) -> "PiecewisePolynomial":
        return PiecewisePolynomial([0.0, 1.0], [tuple(coeffs)],
                                   name=name or f"poly{tuple(coeffs)}")

    @staticmethod
    def constant(value: float) -> "PiecewisePolynomial":
        return PiecewisePolynomial([0.0, 1.0], [(float(value),)], name=f"const({value})")

    def __repr__(self):
        return f"PiecewisePolynomial(breaks={self.breaks}, coeffs={self.coeffs})"


class FuncTestFunction(TestFunction):
    """Generic callable with a declared sup bound and optional exact integral."""

    def __init__(self, fn: Callable[[Color], float], sup_bound: float,
                 mu_integral: Optional[float] = None, name: str = "f"):
        self.fn = fn
        self.sup_bound = float(sup_bound)
        self.mu_integral = mu_integral
        self.name = name

    def __call__(self, c: Color):
        return self.fn(c)


def _merge_breaks(a: Sequence[float], b: Sequence[float]) -> list:
    out = sorted(set(a) | set(b))
    return out


def _poly_mul(p: Sequence[float], q: Sequence[float]) -> Tuple[float, ...]:
    out = [0.0] * (len(p) + len(q) - 1)
    for i, pi in enumerate(p):
        if pi == 0.0:
            continue
        for j, qj in enumerate(q):
            out[i + j] += pi * qj
    return tuple(out)


def _pp_pieces_on(f: PiecewisePolynomial, breaks: Sequence[float]) -> list:
    """Coefficient vectors of f on each interval of a refined grid."""
    pieces = []
    for b0 in breaks[:-1]:
        i = bisect_right(f.breaks, b0) - 1
        i = min(max(i, 0), len(f.coeffs) - 1)
        pieces.append(f.coeffs[i])
    return pieces


def product(f: TestFunction, g: TestFunction) -> TestFunction:
    """Pointwise product, keeping exact structure when both sides allow it."""
    if isinstance(f, ConstantFunction):
        return scale(g, f.value)
    if isinstance(g, ConstantFunction):
        return scale(f, g.value)
    if isinstance(f, TagFunction) and isinstance(g, TagFunction):
        if len(f.values) != len(g.values):
            raise UnsupportedPairError("tag tables of different sizes")
        return TagFunction([a * b for a, b in zip(f.values, g.values)],
                           name=f"({f.name})*({g.name})")
    if isinstance(f, PiecewisePolynomial) and isinstance(g, PiecewisePolynomial):
        breaks = _merge_breaks(f.breaks, g.breaks)
        fp = _pp_pieces_on(f, breaks)
        gp = _pp_pieces_on(g, breaks)
        return PiecewisePolynomial(breaks, [_poly_mul(a, b) for a, b in zip(fp, gp)],
                                   name=f"({f.name})*({g.name})")
    raise UnsupportedPairError(
        f"no exact product for {type(f).__name__} * {type(g).__name__}")


def scale(f: TestFunction, alpha) -> TestFunction:
    if alpha == 0:
        return ConstantFunction(0)
    if isinstance(f, ConstantFunction):
        return ConstantFunction(alpha * f.value)
    if isinstance(f, TagFunction):
        return TagFunction([alpha * v for v in f.values], name=f"{alpha}*({f.name})")
    if isinstance(f, PiecewisePolynomial):
        a = float(alpha)
        return PiecewisePolynomial(f.breaks, [tuple(a * c for c in piece) for piece in f.coeffs],
                                   name=f"{alpha}*({f.name})")
    a = alpha
    mi = None if f.mu_integral is None else a * f.mu_integral
    return FuncTestFunction(lambda c, _f=f, _a=a: _a * _f(c), abs(float(a)) * f.sup_bound,
                            mu_integral=mi, name=f"{alpha}*({f.name})")


def linear_combination(alpha, f: TestFunction, beta, g: TestFunction) -> TestFunction:
    """alpha*f + beta*g, structured whenever the operands allow it."""
    if isinstance(f, ConstantFunction) and isinstance(g, ConstantFunction):
        return ConstantFunction(alpha * f.value + beta * g.value)
    if isinstance(f, TagFunction) and isinstance(g, TagFunction) \
            and len(f.values) == len(g.values):
        return TagFunction([alpha * a + beta * b for a, b in zip(f.values, g.values)])
    if isinstance(f, TagFunction) and isinstance(g, ConstantFunction):
        return TagFunction([alpha * a + beta * g.value for a in f.values])
    if isinstance(f, ConstantFunction) and isinstance(g, TagFunction):
        return TagFunction([alpha * f.value + beta * b for b in g.values])
    fp = _as_pp(f)
    gp = _as_pp(g)
    if fp is not None and gp is not None:
        breaks = _merge_breaks(fp.breaks, gp.breaks)
        a, b = float(alpha), float(beta)
        pieces = []
        for pa, pb in zip(_pp_pieces_on(fp, breaks), _pp_pieces_on(gp, breaks)):
            n = max(len(pa), len(pb))
            pieces.append(tuple(a * (pa[k] if k < len(pa) else 0.0)
                                + b * (pb[k] if k < len(pb) else 0.0) for k in range(n)))
        return PiecewisePolynomial(breaks, pieces)
    af, bf = alpha, beta
    mi = None
    if f.mu_integral is not None and g.mu_integral is not None:
        mi = af * f.mu_integral + bf * g.mu_integral
    return FuncTestFunction(lambda c: af * f(c) + bf * g(c),
                            abs(float(af)) * f.sup_bound + abs(float(bf)) * g.sup_bound,
                            mu_integral=mi,
                            name=f"{alpha}*({f.name})+{beta}*({g.name})")


def _as_pp(f: TestFunction) -> Optional[PiecewisePolynomial]:
    if isinstance(f, PiecewisePolynomial):
        return f
    if isinstance(f, ConstantFunction):
        return PiecewisePolynomial.constant(float(f.value))
    return None


def centered(f: TestFunction, c) -> TestFunction:
    """f - c*1."""
    return linear_combination(1, f, -1, ConstantFunction(c))


# ---------------------------------------------------------------------------
# Counting measures
# ---------------------------------------------------------------------------
class CountingMeasure:
    """Atoms with positive integer multiplicities; the urn state."""

    __slots__ = ("_atoms", "total")

    def __init__(self, pairs: Iterable[Tuple[Color, int]] = ()):
        self._atoms: dict = {}
        self.total = 0
        for color, mult in pairs:
            self.add(color, mult)

    def add(self, color: Color, k: int = 1) -> None:
        if k == 0:
            return
        m = self._atoms.get(color, 0) + k
        if m < 0:
            raise ValueError(f"multiplicity of {color!r} would drop below 0")
        if m == 0:
            del self._atoms[color]
        else:
            self._atoms[color] = m
        self.total += k

    def multiplicity(self, color: Color) -> int:
        return self._atoms.get(color, 0)

    def atoms(self) -> Iterator[Tuple[Color, int]]:
        return iter(self._atoms.items())

    def __len__(self) -> int:
        return len(self._atoms)

    def copy(self) -> "CountingMeasure":
        out = CountingMeasure()
        out._atoms = dict(self._atoms)
        out.total = self.total
        return out

    def as_sorted_tuple(self) -> tuple:
        """Canonical hashable form (used for exact path deduplication)."""
        return tuple(sorted(self._atoms.items()))

    def __eq__(self, other) -> bool:
        return isinstance(other, CountingMeasure) and self._atoms == other._atoms

    def __hash__(self):
        return hash(self.as_sorted_tuple())

    def __repr__(self):
        return f"CountingMeasure({sorted(self._atoms.items())!r})"


def integrate(nu: CountingMeasure, f: TestFunction):
    """nu(f): sum of multiplicity * f(color) over atoms."""
    total = 0
    for color, mult in nu.atoms():
        total = total + mult * f(color)
    return total


def normalize(nu: CountingMeasure) -> list:
    """Probability weights over atoms, as (color, weight) pairs."""
    if nu.total <= 0:
        raise EmptyMeasureError("cannot normalize an empty counting measure")
    t = nu.total
    return [(color, mult / t) for color, mult in nu.atoms()]


# ---------------------------------------------------------------------------
# Finite measures
# ---------------------------------------------------------------------------
class FiniteMeasure:
    total_mass = None

    def normalized(self) -> "FiniteMeasure":
        raise NotImplementedError


class AtomicMeasure(FiniteMeasure):
    """Finite measure supported on finitely many colors.

    Weights keep their numeric type (Fraction weights give exact integrals).
    """

    def __init__(self, pairs: Sequence[Tuple[Color, object]]):
        pairs = [(c, w) for c, w in pairs]
        if any(w < 0 for _, w in pairs):
            raise ValueError("atomic weights must be >= 0")
        self.pairs = tuple((c, w) for c, w in pairs if w != 0)
        self.total_mass = sum(w for _, w in self.pairs)
        if self.total_mass <= 0:
            raise EmptyMeasureError("finite measure must have positive mass")

    def integrate(self, f: TestFunction):
        return sum(w * f(c) for c, w in self.pairs)

    def normalized(self) -> "AtomicMeasure":
        t = self.total_mass
        if isinstance(t, Fraction) or all(isinstance(w, (int, Fraction)) for _, w in self.pairs):
            return AtomicMeasure([(c, Fraction(w) / Fraction(t)) for c, w in self.pairs])
        return AtomicMeasure([(c, w / t) for c, w in self.pairs])

    def __repr__(self):
        return f"AtomicMeasure({list(self.pairs)!r})"


class DensityMeasure(FiniteMeasure):
    """Measure on [0,1] with a piecewise-polynomial density."""

    def __init__(self, density: PiecewisePolynomial):
        self.density = density
        self.total_mass = density.lebesgue_integral()
        if self.total_mass <= 0:
            raise EmptyMeasureError("finite measure must have positive mass")

    @staticmethod
    def lebesgue(scale: float = 1.0) -> "DensityMeasure":
        return DensityMeasure(PiecewisePolynomial.constant(scale))

    def integrate_pp(self, f: PiecewisePolynomial) -> float:
        return product(self.density, f).lebesgue_integral()

    def normalized(self) -> "DensityMeasure":
        return DensityMeasure(
            PiecewisePolynomial(self.density.breaks,
                                [tuple(c / self.total_mass for c in piece)
                                 for piece in self.density.coeffs]))

    def __repr__(self):
        return f"DensityMeasure({self.density!r})"


def measure_integrate(mu: FiniteMeasure, f: TestFunction):
    """Exact mu(f); raises UnsupportedPairError when no exact path exists.

    There is deliberately no quadrature fallback here: every constant that
    feeds an acceptance bound must be exact.
    """
    if isinstance(mu, AtomicMeasure):
        return mu.integrate(f)
    if isinstance(f, ConstantFunction):
        return f.value * mu.total_mass
    if isinstance(mu, DensityMeasure) and isinstance(f, PiecewisePolynomial):
        return mu.integrate_pp(f)
    if f.mu_integral is not None:
        return f.mu_integral
    raise UnsupportedPairError(
        f"no exact integral of {type(f).__name__} against {type(mu).__name__}")
