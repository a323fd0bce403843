"""Mean replacement operator, its two eigenvalues, and the limit covariances.

Everything here is a pure function of declared kernel metadata. Exact routes
are preferred throughout: rational metadata flows through unchanged, so the
identities lambda1 = lambda2 + mu(a) and R a = lambda1 a hold exactly for the
built-in kernels. A shared-sample Monte Carlo covariance form is provided as
the fallback for kernels without exact hooks; sharing one sample across all
function pairs keeps the estimated Gram matrices positive semidefinite by
construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np

from .kernels import ReplacementKernel
from .measures import (
    ConstantFunction,
    FiniteMeasure,
    FuncTestFunction,
    ONE,
    TestFunction,
    linear_combination,
    measure_integrate,
    product,
)


class SpectralError(Exception):
    pass


class InexactIntegralError(SpectralError):
    """mu(f) has no exact integration path for this f."""


class NoClosedFormError(SpectralError):
    """The kernel exposes no exact route; use CovarianceForm.monte_carlo."""


@dataclass(frozen=True)
class SpectralConstants:
    """lambda1 = lambda2 + mu(a), rho = lambda2 / lambda1."""

    lambda1: object
    lambda2: object
    rho: object
    mu_a: object
    mu_bar: FiniteMeasure

    def __post_init__(self):
        if not self.mu_a > 0:
            raise SpectralError("mu(a) must be positive")
        if not self.lambda1 > 0:
            raise SpectralError("lambda1 must be positive")
        gap = self.lambda1 - self.lambda2 - self.mu_a
        if abs(float(gap)) > 1e-12 * max(1.0, abs(float(self.lambda1))):
            raise SpectralError("lambda1 != lambda2 + mu(a)")
        if not float(self.rho) < 1:
            raise SpectralError("rho must be < 1")


def spectral_constants(kernel: ReplacementKernel) -> SpectralConstants:
    cached = getattr(kernel, "_spectral_cache", None)
    if cached is not None:
        return cached
    mu = kernel.intensity
    mu_a = measure_integrate(mu, kernel.modulation)
    lam2 = kernel.lambda2
    lam1 = lam2 + mu_a
    if isinstance(lam1, Fraction) or isinstance(lam2, Fraction):
        rho = Fraction(lam2) / Fraction(lam1)
    else:
        rho = lam2 / lam1
    consts = SpectralConstants(lambda1=lam1, lambda2=lam2, rho=rho,
                               mu_a=mu_a, mu_bar=mu.normalized())
    kernel._spectral_cache = consts  # kernels are immutable after construction
    return consts


def apply_R(kernel: ReplacementKernel, f: TestFunction) -> TestFunction:
    """s -> lambda2 f(s) + a(s) mu(f), the averaged replacement of f."""
    try:
        mu_f = measure_integrate(kernel.intensity, f)
    except Exception as exc:
        raise InexactIntegralError(f"mu({f.name}) has no exact value") from exc
    out = linear_combination(kernel.lambda2, f, mu_f, kernel.modulation)
    if out.mu_integral is None and isinstance(out, FuncTestFunction):
        # mu(Rf) = lambda1 mu(f) exactly, so the result always carries it
        consts = spectral_constants(kernel)
        out.mu_integral = consts.lambda1 * mu_f
    return out


def _mu_bar_of(kernel: ReplacementKernel, f: TestFunction):
    return measure_integrate(kernel.intensity.normalized(), f)


def sigma_sq(kernel: ReplacementKernel, f: TestFunction):
    """The limit variance constant; exact routes only.

    Prefers a kernel-declared closed form, then the exact second-moment
    hooks. Raises NoClosedFormError when neither applies; the Monte Carlo
    fallback lives on CovarianceForm.monte_carlo.
    """
    if kernel.closed_form_sigma is not None:
        val = kernel.closed_form_sigma(f)
        if val is not None:
            return val
    c2 = kernel.copies_sq_bar()
    cross = kernel.xi_cross_bar(f, f)
    if c2 is None or cross is None:
        raise NoClosedFormError("kernel exposes no exact second-moment route")
    return _mu_bar_of(kernel, product(f, f)) * c2 + cross


def limit_covariance(kernel: ReplacementKernel, f: TestFunction, g: TestFunction):
    """K(f,g) = int E_s(mubar(fg) C^2 + xi(f) xi(g)) mubar(ds)."""
    if kernel.closed_form_cov is not None:
        val = kernel.closed_form_cov(f, g)
        if val is not None:
            return val
    c2 = kernel.copies_sq_bar()
    cross = kernel.xi_cross_bar(f, g)
    if c2 is None or cross is None:
        raise NoClosedFormError("kernel exposes no exact second-moment route")
    return _mu_bar_of(kernel, product(f, g)) * c2 + cross


def bridge_covariance(kernel: ReplacementKernel, f: TestFunction, g: TestFunction):
    """Covariance of the translation-invariant bridge field.

    Expands Cov(G(f) - mubar(f) G(1), G(g) - mubar(g) G(1)) bilinearly.
    """
    mf = _mu_bar_of(kernel, f)
    mg = _mu_bar_of(kernel, g)
    return (limit_covariance(kernel, f, g)
            - mg * limit_covariance(kernel, f, ONE)
            - mf * limit_covariance(kernel, ONE, g)
            + mf * mg * limit_covariance(kernel, ONE, ONE))


# ---------------------------------------------------------------------------
# Covariance forms (closed-form or shared-sample Monte Carlo)
# ---------------------------------------------------------------------------
class CovarianceForm:
    """Evaluates K(f,g), either exactly or from one shared Monte Carlo sample.

    The Monte Carlo variant draws s ~ mubar then (C, xi) ~ P_s once and reuses
    the triples for every (f,g) pair, which keeps any estimated Gram matrix
    positive semidefinite.
    """

    def __init__(self, kernel: ReplacementKernel, source: str,
                 samples: Optional[list] = None):
        self.kernel = kernel
        self.source = source
        self._samples = samples

    @staticmethod
    def closed_form(kernel: ReplacementKernel) -> "CovarianceForm":
        return CovarianceForm(kernel, "closed-form")

    @staticmethod
    def monte_carlo(kernel: ReplacementKernel, n_samples: int, seed: int) -> "CovarianceForm":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        mu_bar = kernel.intensity.normalized()
        colors = _sample_from_measure(mu_bar, n_samples, rng)
        mubar_sq = None  # computed per pair; C^2 and xi kept per draw
        samples = []
        for s in colors:
            rep = kernel.sample(s, rng)
            samples.append((s, rep.copies, rep.innovation))
        return CovarianceForm(kernel, f"monte-carlo(n={n_samples}, seed={seed})", samples)

    def cov(self, f: TestFunction, g: TestFunction):
        """K(f,g); for the Monte Carlo source returns (estimate, se)."""
        if self._samples is None:
            return limit_covariance(self.kernel, f, g)
        mubar_fg = float(_mu_bar_of(self.kernel, product(f, g)))
        vals = np.array([
            mubar_fg * c * c
            + sum(float(f(v)) for v in inn) * sum(float(g(v)) for v in inn)
            for _, c, inn in self._samples
        ])
        n = len(vals)
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))

    def sigma_sq(self, f: TestFunction):
        return self.cov(f, f)

    def gram(self, fs: Sequence[TestFunction]) -> np.ndarray:
        n = len(fs)
        out = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                v = self.cov(fs[i], fs[j])
                if isinstance(v, tuple):
                    v = v[0]
                out[i, j] = out[j, i] = float(v)
        return out


def _sample_from_measure(mu_bar: FiniteMeasure, n: int, rng: np.random.Generator) -> list:
    from .measures import AtomicMeasure, DensityMeasure

    if isinstance(mu_bar, AtomicMeasure):
        colors = [c for c, _ in mu_bar.pairs]
        probs = np.array([float(w) for _, w in mu_bar.pairs])
        probs /= probs.sum()
        idx = rng.choice(len(colors), size=n, p=probs)
        return [colors[i] for i in idx]
    if isinstance(mu_bar, DensityMeasure):
        # inverse-CDF sampling through the piecewise-polynomial density
        return [_density_inverse_cdf(mu_bar, rng.random()) for _ in range(n)]
    raise SpectralError("cannot sample from this measure")


def _density_inverse_cdf(mu_bar, u: float) -> float:
    dens = mu_bar.density
    # piece masses
    masses = []
    for (b0, b1), piece in zip(zip(dens.breaks, dens.breaks[1:]), dens.coeffs):
        m = sum(c * (b1 ** (k + 1) - b0 ** (k + 1)) / (k + 1) for k, c in enumerate(piece))
        masses.append(m)
    total = sum(masses)
    target = u * total
    for (b0, b1), piece, m in zip(zip(dens.breaks, dens.breaks[1:]), dens.coeffs, masses):
        if target > m:
            target -= m
            continue
        lo, hi = b0, b1
        for _ in range(60):  # bisection on the in-piece CDF
            mid = 0.5 * (lo + hi)
            cdf = sum(c * (mid ** (k + 1) - b0 ** (k + 1)) / (k + 1)
                      for k, c in enumerate(piece))
            if cdf < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)
    return dens.breaks[-1]
