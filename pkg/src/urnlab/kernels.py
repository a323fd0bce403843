"""Replacement kernels: sampling of (copies, innovation) given a color.

A kernel bundles the sampler with declared analytic metadata (the constant
mean number of copies, the modulation function, the innovation intensity
measure) plus optional exact second-moment hooks that the spectral layer and
the bracket trackers consume. Metadata is declared, not inferred: the model
assumptions are hypotheses, so ``validate_assumptions`` spot-checks them
statistically instead of trusting samples to reveal them.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .measures import (
    AtomicMeasure,
    Color,
    ColorSpace,
    ConstantFunction,
    DensityMeasure,
    FiniteColors,
    FiniteMeasure,
    PiecewisePolynomial,
    TagFunction,
    TestFunction,
    UnitInterval,
    measure_integrate,
    product,
)


class KernelError(Exception):
    pass


class ColorSpaceMismatch(KernelError):
    pass


class FactorizationError(KernelError):
    """Declared innovation intensities are not proportional across colors."""


@dataclass(frozen=True)
class Replacement:
    """One draw: the number of copies and the innovation atoms."""

    copies: int
    innovation: Tuple[Color, ...]

    def __post_init__(self):
        if self.copies < -1:
            raise ValueError("copies must be >= -1")
        if self.copies + len(self.innovation) < 0:
            raise ValueError("a replacement may not empty the urn")

    @property
    def added_balls(self) -> int:
        return self.copies + len(self.innovation)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(x)  # exact binary value
    raise TypeError(f"cannot interpret {x!r} as an exact probability")


class ReplacementKernel:
    """Base class; concrete kernels fill in the metadata attributes.

    Attributes
    ----------
    space : ColorSpace
    lambda2 : number
        The constant mean number of copies.
    modulation : TestFunction
        The function scaling the innovation intensity per color.
    intensity : FiniteMeasure
        The common innovation intensity measure.
    alpha_moment : float or None
        Declared moment order > 2 for the added-ball count, when known.
    """

    space: ColorSpace
    lambda2 = None
    modulation: TestFunction = None
    intensity: FiniteMeasure = None
    alpha_moment: Optional[float] = None
    closed_form_sigma: Optional[Callable[[TestFunction], float]] = None
    closed_form_cov: Optional[Callable[[TestFunction, TestFunction], float]] = None

    def sample(self, s: Color, rng: np.random.Generator) -> Replacement:
        raise NotImplementedError

    # -- exact second-moment hooks (None = unavailable) ----------------------
    def q_value(self, s: Color, f: TestFunction):
        """E_s((f(s) C + xi(f))^2), the per-color bracket density term."""
        return None

    def copies_sq_bar(self):
        """Integral of E_s(C^2) against the normalized intensity."""
        return None

    def xi_cross_bar(self, f: TestFunction, g: TestFunction):
        """Integral of E_s(xi(f) xi(g)) against the normalized intensity."""
        return None

    def fast_spec(self):
        """Arrays for the compiled hot loop, or None if only the generic
        engine can run this kernel."""
        return None


def sample_replacement(kernel: ReplacementKernel, s: Color,
                       rng: np.random.Generator) -> Replacement:
    """Draw from P_s, after checking s lies in the kernel's color space."""
    if not kernel.space.contains(s):
        raise ColorSpaceMismatch(f"{s!r} is not a color of {kernel.space!r}")
    return kernel.sample(s, rng)


# ---------------------------------------------------------------------------
# Built-in: the copy-or-innovate kernel on [0,1]
# ---------------------------------------------------------------------------
class SimonKernel(ReplacementKernel):
    """With probability p return one copy, otherwise one uniform new color.

    The pair is (C, xi) with C Bernoulli(p) and xi = (1-C) * delta_V for V
    uniform on [0,1]; the law does not depend on the sampled color. Each draw
    consumes exactly two uniforms (the coin, then the location) so that the
    stream layout does not depend on the outcome.
    """

    def __init__(self, p: float):
        pf = float(p)
        if not 0.0 < pf < 1.0:
            raise ValueError("p must lie strictly between 0 and 1")
        self.p = pf
        self.p_exact = p if isinstance(p, Fraction) else pf
        self.space = UnitInterval()
        self.lambda2 = self.p_exact
        self.modulation = ConstantFunction(1, name="a")
        self.intensity = DensityMeasure.lebesgue(1.0 - pf)
        self.alpha_moment = 4.0  # one ball is added every step, all moments finite

    def sample(self, s: Color, rng: np.random.Generator) -> Replacement:
        u = rng.random()
        v = rng.random()
        if u < self.p:
            return Replacement(1, ())
        return Replacement(0, (v,))

    def _sq_integral(self, f: TestFunction) -> Optional[float]:
        try:
            ff = product(f, f)
        except Exception:
            return None
        if isinstance(ff, PiecewisePolynomial):
            return ff.lebesgue_integral()
        if isinstance(ff, ConstantFunction):
            return float(ff.value)
        return None

    def closed_form_sigma(self, f: TestFunction) -> Optional[float]:
        return self._sq_integral(f)

    def closed_form_cov(self, f: TestFunction, g: TestFunction) -> Optional[float]:
        try:
            fg = product(f, g)
        except Exception:
            return None
        if isinstance(fg, PiecewisePolynomial):
            return fg.lebesgue_integral()
        if isinstance(fg, ConstantFunction):
            return float(fg.value)
        return None

    def q_value(self, s: Color, f: TestFunction):
        i2 = self._sq_integral(f)
        if i2 is None:
            return None
        fs = f(s)
        return self.p * fs * fs + (1.0 - self.p) * i2

    def copies_sq_bar(self):
        return self.p_exact

    def xi_cross_bar(self, f: TestFunction, g: TestFunction):
        val = self.closed_form_cov(f, g)
        if val is None:
            return None
        return (1.0 - self.p) * val

    def fast_spec(self):
        from .engine.fastpath import SimonFastSpec

        return SimonFastSpec(p=self.p)


def builtin_simon(p) -> SimonKernel:
    return SimonKernel(p)


# ---------------------------------------------------------------------------
# Built-in: finite color spaces with rational outcome tables
# ---------------------------------------------------------------------------
class TableKernel(ReplacementKernel):
    """Finite kernel given by per-color outcome tables with exact probabilities.

    ``rows[s]`` lists outcomes ``(prob, copies, innovation_tags)``; the
    probabilities are held as Fractions so that the metadata, the q-tables and
    the exact-enumeration oracle all stay rational. Raises unless the declared
    laws satisfy the constant-mean-copies and intensity-factorization
    assumptions exactly.
    """

    def __init__(self, rows: Sequence[Sequence[Tuple[object, int, Sequence[int]]]],
                 alpha_moment: Optional[float] = 4.0):
        d = len(rows)
        if d < 1:
            raise ValueError("need at least one color")
        self.d = d
        self.space = FiniteColors(d)
        self.rows: Tuple[Tuple[Tuple[Fraction, int, Tuple[int, ...]], ...], ...] = tuple(
            tuple((_as_fraction(p), int(c), tuple(int(t) for t in inn))
                  for p, c, inn in row)
            for row in rows
        )
        for s, row in enumerate(self.rows):
            if sum(p for p, _, _ in row) != 1:
                raise ValueError(f"outcome probabilities for color {s} do not sum to 1")
            for p, c, inn in row:
                if p < 0:
                    raise ValueError("negative probability")
                Replacement(c, inn)  # validates the non-emptying constraint
                for t in inn:
                    if not 0 <= t < d:
                        raise ValueError(f"innovation tag {t} outside 0..{d-1}")

        means = [sum(p * c for p, c, _ in row) for row in self.rows]
        if any(m != means[0] for m in means):
            raise KernelError("mean number of copies varies with the color")
        self.lambda2 = means[0]

        intensities = []
        for row in self.rows:
            vec = [Fraction(0)] * d
            for p, _, inn in row:
                for t in inn:
                    vec[t] += p
            intensities.append(vec)
        base = intensities[0]
        if all(v == 0 for v in base):
            raise FactorizationError("kernel has no innovation at all")
        a_vals = []
        for s, vec in enumerate(intensities):
            ratio = None
            for j in range(d):
                if base[j] == 0:
                    if vec[j] != 0:
                        raise FactorizationError(
                            "innovation intensities are not proportional across colors")
                    continue
                r = Fraction(vec[j]) / base[j]
                if ratio is None:
                    ratio = r
                elif r != ratio:
                    raise FactorizationError(
                        "innovation intensities are not proportional across colors")
            if ratio is None or ratio <= 0:
                raise FactorizationError(
                    f"innovation intensity at color {s} is zero; the modulation "
                    "function must be positive")
            a_vals.append(ratio)
        self.modulation = TagFunction(a_vals, name="a")
        self.intensity = AtomicMeasure([(j, base[j]) for j in range(d) if base[j] != 0])
        self.alpha_moment = alpha_moment

        # float cumulative tables for sampling (one uniform per draw)
        self._cum = []
        for row in self.rows:
            acc, cum = 0.0, []
            for p, _, _ in row:
                acc += float(p)
                cum.append(acc)
            cum[-1] = 1.0 + 1e-12  # guard the top against rounding
            self._cum.append(cum)

    def sample(self, s: Color, rng: np.random.Generator) -> Replacement:
        u = rng.random()
        row = self.rows[s]
        cum = self._cum[s]
        i = bisect_right(cum, u)
        if i >= len(row):
            i = len(row) - 1
        _, c, inn = row[i]
        return Replacement(c, inn)

    def q_value(self, s: Color, f: TestFunction):
        fs = f(s)
        total = 0
        for p, c, inn in self.rows[s]:
            jump = fs * c + sum(f(t) for t in inn)
            total = total + p * jump * jump
        return total

    def copies_sq_bar(self):
        mu_bar = self.intensity.normalized()
        return sum(w * sum(p * c * c for p, c, _ in self.rows[s])
                   for s, w in mu_bar.pairs)

    def xi_cross_bar(self, f: TestFunction, g: TestFunction):
        mu_bar = self.intensity.normalized()
        total = 0
        for s, w in mu_bar.pairs:
            e = 0
            for p, _, inn in self.rows[s]:
                xf = sum(f(t) for t in inn)
                xg = sum(g(t) for t in inn)
                e = e + p * xf * xg
            total = total + w * e
        return total

    def fast_spec(self):
        from .engine.fastpath import TableFastSpec

        return TableFastSpec.from_kernel(self)


def builtin_finite(d: int,
                   copy_law: Sequence[Tuple[object, int]],
                   innovation_law: Sequence[Sequence[Tuple[object, Sequence[int]]]],
                   alpha_moment: Optional[float] = 4.0) -> TableKernel:
    """Finite kernel with copies independent of the innovation.

    ``copy_law`` is a single distribution [(prob, k)] shared by every color;
    ``innovation_law[s]`` lists [(prob, tags)] per color. The joint law is the
    product, so correlated pairs need a raw TableKernel instead.
    """
    if len(innovation_law) != d:
        raise ValueError("innovation_law must list one table per color")
    rows = []
    for s in range(d):
        row = []
        for pc, k in copy_law:
            for pi, tags in innovation_law[s]:
                row.append((_as_fraction(pc) * _as_fraction(pi), k, tuple(tags)))
        rows.append(row)
    return TableKernel(rows, alpha_moment=alpha_moment)


# ---------------------------------------------------------------------------
# Custom kernels backed by a plain callable (generic engine path only)
# ---------------------------------------------------------------------------
class CallableKernel(ReplacementKernel):
    def __init__(self, space: ColorSpace, sampler: Callable[[Color, np.random.Generator], Replacement],
                 lambda2, modulation: TestFunction, intensity: FiniteMeasure,
                 alpha_moment: Optional[float] = None,
                 q_value_fn: Optional[Callable] = None,
                 copies_sq_bar_value=None,
                 xi_cross_bar_fn: Optional[Callable] = None):
        self.space = space
        self._sampler = sampler
        self.lambda2 = lambda2
        self.modulation = modulation
        self.intensity = intensity
        self.alpha_moment = alpha_moment
        self._q_value_fn = q_value_fn
        self._copies_sq_bar = copies_sq_bar_value
        self._xi_cross_bar_fn = xi_cross_bar_fn

    def sample(self, s: Color, rng: np.random.Generator) -> Replacement:
        return self._sampler(s, rng)

    def q_value(self, s, f):
        return None if self._q_value_fn is None else self._q_value_fn(s, f)

    def copies_sq_bar(self):
        return self._copies_sq_bar

    def xi_cross_bar(self, f, g):
        return None if self._xi_cross_bar_fn is None else self._xi_cross_bar_fn(f, g)


# ---------------------------------------------------------------------------
# Assumption validation
# ---------------------------------------------------------------------------
@dataclass
class ValidationEntry:
    assumption: str
    status: str  # "pass" | "fail" | "indeterminate"
    statistic: float
    tolerance: float
    sample_size: int
    detail: str = ""


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)

    def entry(self, assumption: str) -> ValidationEntry:
        for e in self.entries:
            if e.assumption == assumption:
                return e
        raise KeyError(assumption)

    @property
    def all_pass(self) -> bool:
        return all(e.status != "fail" for e in self.entries)

    @property
    def has_indeterminate(self) -> bool:
        return any(e.status == "indeterminate" for e in self.entries)

    def to_dict(self) -> dict:
        return {"entries": [e.__dict__ for e in self.entries],
                "all_pass": self.all_pass}


def default_probe_family(space: ColorSpace) -> list:
    """Probe functions spanning enough of the space to detect factorization
    violations at grid resolution: dyadic indicators on [0,1], singletons on
    finite spaces."""
    if isinstance(space, FiniteColors):
        return [TagFunction.indicator(j, space.d) for j in range(space.d)]
    if isinstance(space, UnitInterval):
        k = 8
        return [PiecewisePolynomial.indicator(i / k, (i + 1) / k) for i in range(k)]
    raise KernelError("no default probe family for this color space; pass one")


def validate_assumptions(kernel: ReplacementKernel, n_samples: int,
                         s_grid: Sequence[Color], tol: float,
                         seed: int = 0,
                         probes: Optional[Sequence[TestFunction]] = None) -> ValidationReport:
    """Monte Carlo spot checks of the standing model assumptions.

    ``tol`` is the allowed deviation in standard-error units for the mean
    checks. Boundedness and moment assumptions are statements over the whole
    color space, so they are only recorded, never proven: their entries come
    back "indeterminate". Failures are report entries, not exceptions.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples per grid point")
    probes = list(probes) if probes is not None else default_probe_family(kernel.space)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    report = ValidationReport()

    lam2 = float(kernel.lambda2)
    worst_mean_z = 0.0
    worst_int_z = 0.0
    non_empty_ok = True
    max_sq = 0.0
    max_alpha = 0.0
    mu = kernel.intensity
    mu_probe = [float(measure_integrate(mu, f)) for f in probes]

    for s in s_grid:
        if not kernel.space.contains(s):
            raise ColorSpaceMismatch(f"grid color {s!r} outside the kernel's space")
        a_s = float(kernel.modulation(s))
        copies = np.empty(n_samples)
        totals = np.empty(n_samples)
        xi_vals = np.zeros((len(probes), n_samples))
        for i in range(n_samples):
            rep = kernel.sample(s, rng)
            copies[i] = rep.copies
            totals[i] = rep.added_balls
            if rep.copies + len(rep.innovation) < 0:
                non_empty_ok = False
            for j, f in enumerate(probes):
                xi_vals[j, i] = sum(float(f(v)) for v in rep.innovation)

        se = copies.std(ddof=1) / math.sqrt(n_samples)
        dev = abs(copies.mean() - lam2)
        z = dev / se if se > 0 else (0.0 if dev == 0 else math.inf)
        worst_mean_z = max(worst_mean_z, z)

        for j in range(len(probes)):
            target = a_s * mu_probe[j]
            se = xi_vals[j].std(ddof=1) / math.sqrt(n_samples)
            dev = abs(xi_vals[j].mean() - target)
            z = dev / se if se > 0 else (0.0 if dev == 0 else math.inf)
            worst_int_z = max(worst_int_z, z)

        max_sq = max(max_sq, float((totals ** 2).mean()))
        if kernel.alpha_moment is not None:
            max_alpha = max(max_alpha, float((np.abs(totals) ** kernel.alpha_moment).mean()))

    report.entries.append(ValidationEntry(
        "eq2-constant-mean-copies",
        "pass" if worst_mean_z <= tol else "fail",
        worst_mean_z, tol, n_samples,
        f"max |mean(C) - lambda2| over the grid, in SE units"))
    report.entries.append(ValidationEntry(
        "eq3-intensity-factorization",
        "pass" if worst_int_z <= tol else "fail",
        worst_int_z, tol, n_samples,
        f"max |mean(xi(f)) - a(s) mu(f)| over grid x {len(probes)} probes, in SE units"))
    report.entries.append(ValidationEntry(
        "eq1-non-emptying",
        "pass" if non_empty_ok else "fail",
        0.0 if non_empty_ok else 1.0, 0.0, n_samples,
        "every draw satisfied C + xi(1) >= 0"))
    report.entries.append(ValidationEntry(
        "eq4-second-moment", "indeterminate", max_sq, math.inf, n_samples,
        "largest sampled mean of (C + xi(1))^2; finiteness is not provable from draws"))
    if kernel.alpha_moment is not None:
        report.entries.append(ValidationEntry(
            "eq14-alpha-moment", "indeterminate", max_alpha, math.inf, n_samples,
            f"sampled moment of order alpha={kernel.alpha_moment}"))
    return report
