"""Replica orchestration and statistical verification of the limit theorems.

A campaign runs many independent replicas of one configuration and reduces
them, in replica order, into per-horizon arrays. The verification layer then
checks the regime-appropriate predictions: the law of large numbers band,
Gaussian-bridge fluctuations (subcritical and critical, with the documented
wider tolerance in the critical case because the log-corrected scaling
converges slowly at desk scale), almost-sure convergence diagnostics in the
supercritical case, and the covariance structure of the functional limit.

Every statistical test has a calibration self-check on synthetic data with
known ground truth; ``analyze_campaign`` runs those first and refuses to
report if the machinery itself is broken.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sstats

from .engine import CheckpointGrid, UrnEngine
from .kernels import ReplacementKernel
from .measures import (
    AtomicMeasure,
    CountingMeasure,
    TestFunction,
    measure_integrate,
)
from .spectral import SpectralConstants, bridge_covariance, sigma_sq, spectral_constants


class MonteCarloError(Exception):
    pass


class InsufficientReplicasError(MonteCarloError):
    pass


# ---------------------------------------------------------------------------
# Campaign definition and execution
# ---------------------------------------------------------------------------
@dataclass
class Campaign:
    kernel: ReplacementKernel
    initial_urn: CountingMeasure
    observables: Dict[str, TestFunction]
    horizons: List[int]
    replicas: int
    base_seed: int
    time_grid: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.replicas < 2:
            raise MonteCarloError("need at least two replicas")
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise MonteCarloError("horizons must be strictly increasing")
        if not self.horizons and not self.time_grid:
            raise MonteCarloError("campaign needs horizons or a time grid")

    @property
    def constants(self) -> SpectralConstants:
        return spectral_constants(self.kernel)

    @property
    def regime(self) -> str:
        return classify_regime(self.constants)


@dataclass
class CampaignResult:
    campaign: Campaign
    constants: SpectralConstants
    # ubar[name][h, r]: normalized observable at horizons[h] for replica r
    ubar: Dict[str, np.ndarray]
    totals: np.ndarray  # [h, r]
    # x_scaled[name][i, r]: raw X_{t_i}(f) at time grid entries
    x_at_time: Dict[str, np.ndarray]
    totals_at_time: np.ndarray
    mubar_f: Dict[str, float]

    def deviations(self, name: str) -> np.ndarray:
        return self.ubar[name] - self.mubar_f[name]


def run_campaign_rows(campaign: Campaign,
                      threads: Optional[int] = None):
    """Run all replicas and return their raw checkpoint rows, in replica
    order regardless of completion order. Returns (rows_by_replica, columns)."""
    grid = CheckpointGrid(steps=campaign.horizons, times=campaign.time_grid)
    by_time = campaign.time_grid and (
        not campaign.horizons or max(campaign.time_grid) > max(campaign.horizons))

    def work(r):
        eng = UrnEngine(campaign.kernel, campaign.initial_urn,
                        observables=campaign.observables,
                        base_seed=campaign.base_seed, replica=r)
        if by_time:
            traj = eng.run(time=max(campaign.time_grid), grid=grid)
        else:
            traj = eng.run(steps=max(campaign.horizons), grid=grid)
        return traj

    R = campaign.replicas
    nthreads = threads or min(os.cpu_count() or 1, R)
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as ex:
            trajs = list(ex.map(work, range(R)))
    else:
        trajs = [work(r) for r in range(R)]
    cols = trajs[0].columns
    return {r: trajs[r]._rows for r in range(R)}, cols


def reduce_rows(campaign: Campaign, rows_by_replica: Dict[int, list],
                cols: Sequence[str]) -> CampaignResult:
    """Assemble per-horizon and per-time arrays from raw checkpoint rows.

    Works both on engine trajectories and on rows read back from CSV (which
    drop the phi column); lookups go through the column-name list.
    """
    cols = list(cols)
    consts = campaign.constants
    names = list(campaign.observables)
    mubar_f = {name: float(measure_integrate(consts.mu_bar, f))
               for name, f in campaign.observables.items()}
    R = campaign.replicas
    H = len(campaign.horizons)
    T = len(campaign.time_grid)
    ubar = {n: np.empty((H, R)) for n in names}
    totals = np.empty((H, R))
    x_at_time = {n: np.empty((T, R)) for n in names}
    totals_at_time = np.empty((T, R))
    it, in_, itot = cols.index("t"), cols.index("n"), cols.index("total")
    iobs = {name: cols.index(f"obs_{name}") for name in names}

    for r in range(R):
        rows = rows_by_replica[r]
        by_step = {}
        by_t = {}
        for row in rows:
            by_step[int(row[in_])] = row
            by_t[row[it]] = row
        for h_i, h in enumerate(campaign.horizons):
            row = by_step.get(h)
            if row is None:
                raise MonteCarloError(
                    f"replica {r} has no checkpoint at step {h}")
            totals[h_i, r] = row[itot]
            for name in names:
                ubar[name][h_i, r] = row[iobs[name]] / row[itot]
        for t_i, tt in enumerate(campaign.time_grid):
            row = by_t.get(tt)
            if row is None:
                raise MonteCarloError(
                    f"replica {r} has no checkpoint at time {tt}")
            totals_at_time[t_i, r] = row[itot]
            for name in names:
                x_at_time[name][t_i, r] = row[iobs[name]]
    return CampaignResult(campaign=campaign, constants=consts, ubar=ubar,
                          totals=totals, x_at_time=x_at_time,
                          totals_at_time=totals_at_time, mubar_f=mubar_f)


def run_campaign(campaign: Campaign, threads: Optional[int] = None) -> CampaignResult:
    """Run all replicas (thread pool) and reduce in replica-index order."""
    rows, cols = run_campaign_rows(campaign, threads=threads)
    return reduce_rows(campaign, rows, cols)


# ---------------------------------------------------------------------------
# Regime classification and rescaling
# ---------------------------------------------------------------------------
def classify_regime(constants: SpectralConstants) -> str:
    rho = constants.rho
    if isinstance(rho, Fraction):
        if rho == Fraction(1, 2):
            return "critical"
        return "supercritical" if rho > Fraction(1, 2) else "subcritical"
    r = float(rho)
    if abs(r - 0.5) < 1e-12:
        return "critical"
    return "supercritical" if r > 0.5 else "subcritical"


def rescale(regime: str, constants: SpectralConstants, n: int,
            ubar_f: float, mubar_f: float) -> float:
    """The regime-appropriate rescaled deviation of the empirical mean."""
    if n < 2:
        raise MonteCarloError("need n >= 2")
    dev = ubar_f - mubar_f
    lam1 = float(constants.lambda1)
    rho = float(constants.rho)
    if regime == "subcritical":
        return lam1 * math.sqrt((1.0 - 2.0 * rho) * n) * dev
    if regime == "critical":
        return lam1 * math.sqrt(n / math.log(n)) * dev
    if regime == "supercritical":
        return n ** (1.0 - rho) * dev
    raise MonteCarloError(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# Test outcomes
# ---------------------------------------------------------------------------
@dataclass
class TestOutcome:
    name: str
    observed: float
    predicted: float
    error: float  # standard error or p-value, per error_kind
    error_kind: str  # "se" | "p-value" | "abs"
    tolerance: float
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def line(self) -> str:
        flag = "pass" if self.passed else "FAIL"
        return (f"[{flag}] {self.name}: observed={self.observed:.6g} "
                f"predicted={self.predicted:.6g} ({self.error_kind}={self.error:.3g}, "
                f"tol={self.tolerance:.3g}) {self.detail}")


def lln_check(result: CampaignResult, name: str, band: float = 0.05) -> TestOutcome:
    """Largest-horizon empirical means must sit inside the band around the
    normalized innovation intensity, for every replica."""
    devs = np.abs(result.deviations(name)[-1])
    worst = float(devs.max())
    return TestOutcome(
        name=f"lln[{name}]", observed=worst, predicted=0.0,
        error=float(devs.mean()), error_kind="abs", tolerance=band,
        passed=worst < band,
        detail=f"max |Ubar_n(f) - mubar(f)| over {devs.size} replicas at the last horizon")


def gaussian_bridge_test(samples: np.ndarray, predicted_var: float,
                         label: str = "f", rel_tol: float = 0.10,
                         min_replicas: int = 500,
                         ks_alpha: float = 0.01) -> List[TestOutcome]:
    """Variance match plus Kolmogorov-Smirnov normality at the predicted
    variance (never the sample variance, so variance errors stay visible)."""
    samples = np.asarray(samples, float)
    R = samples.size
    if R < min_replicas:
        raise InsufficientReplicasError(f"need >= {min_replicas} replicas, got {R}")
    s2 = float(samples.var(ddof=1))
    se_var = s2 * math.sqrt(2.0 / (R - 1))
    tol = max(rel_tol * predicted_var, 4.0 * se_var)
    var_out = TestOutcome(
        name=f"bridge-variance[{label}]", observed=s2, predicted=predicted_var,
        error=se_var, error_kind="se", tolerance=tol,
        passed=abs(s2 - predicted_var) <= tol,
        detail=f"{R} replicas, band max({rel_tol:.0%}, 4 SE)")
    ks = sstats.kstest(samples, "norm", args=(0.0, math.sqrt(predicted_var)))
    ks_out = TestOutcome(
        name=f"bridge-ks[{label}]", observed=float(ks.statistic), predicted=0.0,
        error=float(ks.pvalue), error_kind="p-value", tolerance=ks_alpha,
        passed=float(ks.pvalue) > ks_alpha,
        detail=f"KS against N(0, {predicted_var:.6g})")
    return [var_out, ks_out]


def joint_covariance_test(samples_f: np.ndarray, samples_g: np.ndarray,
                          predicted_cov: float, label: str = "f,g",
                          rel_tol: float = 0.15) -> TestOutcome:
    """Sample covariance of two rescaled statistics against the bridge value."""
    sf = np.asarray(samples_f, float)
    sg = np.asarray(samples_g, float)
    R = sf.size
    cov = float(np.cov(sf, sg, ddof=1)[0, 1])
    se = math.sqrt((sf.var(ddof=1) * sg.var(ddof=1) + cov * cov) / (R - 1))
    tol = max(rel_tol * abs(predicted_cov), 4.0 * se)
    return TestOutcome(
        name=f"bridge-covariance[{label}]", observed=cov, predicted=predicted_cov,
        error=se, error_kind="se", tolerance=tol,
        passed=abs(cov - predicted_cov) <= tol,
        detail=f"{R} replicas, band max({rel_tol:.0%}, 4 SE)")


def supercritical_convergence_diag(stats_by_horizon: np.ndarray,
                                   horizons: Sequence[int],
                                   label: str = "f",
                                   degenerate: bool = False,
                                   corr_threshold: float = 0.9,
                                   control_band: float = 0.1,
                                   degenerate_band: float = 0.05,
                                   shuffle_seed: int = 123) -> List[TestOutcome]:
    """Almost-sure convergence diagnostics: cross-horizon correlation, a
    shuffled-pairing independence control, and shrinking increments. Tests
    convergence only; the limit law is not asserted."""
    arr = np.asarray(stats_by_horizon, float)
    H, R = arr.shape
    if H < 3:
        raise MonteCarloError("need at least three horizons")
    if R < 500:
        raise InsufficientReplicasError("need >= 500 replicas")
    out = []
    if degenerate:
        med = float(np.median(np.abs(arr[-1])))
        out.append(TestOutcome(
            name=f"supercritical-degenerate[{label}]", observed=med, predicted=0.0,
            error=med, error_kind="abs", tolerance=degenerate_band,
            passed=med < degenerate_band,
            detail=f"median |stat| at n={horizons[-1]}"))
        return out
    corr = float(np.corrcoef(arr[0], arr[-1])[0, 1])
    out.append(TestOutcome(
        name=f"supercritical-correlation[{label}]", observed=corr, predicted=1.0,
        error=1.0 - corr, error_kind="abs", tolerance=1.0 - corr_threshold,
        passed=corr > corr_threshold,
        detail=f"Pearson between n={horizons[0]} and n={horizons[-1]}"))
    perm = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(shuffle_seed))).permutation(R)
    ctrl = float(np.corrcoef(arr[0], arr[-1][perm])[0, 1])
    out.append(TestOutcome(
        name=f"supercritical-shuffle-control[{label}]", observed=ctrl, predicted=0.0,
        error=abs(ctrl), error_kind="abs", tolerance=control_band,
        passed=abs(ctrl) <= control_band,
        detail="independence control with shuffled pairing"))
    meds = [float(np.median(np.abs(arr[k + 1] - arr[k]))) for k in range(H - 1)]
    decreasing = all(b <= a for a, b in zip(meds, meds[1:]))
    out.append(TestOutcome(
        name=f"supercritical-increments[{label}]", observed=meds[-1],
        predicted=0.0, error=meds[0], error_kind="abs", tolerance=meds[0],
        passed=decreasing,
        detail=f"median |stat increment| per horizon pair: {meds}"))
    return out


def functional_t2_test(x_at_time: np.ndarray, time_factors: Sequence[float],
                       n_ref: int, constants: SpectralConstants,
                       sig2: float, label: str = "f",
                       rel_tol: float = 0.15) -> List[TestOutcome]:
    """Covariance structure of the subcritical functional limit.

    ``x_at_time[i, r]`` holds the centered raw observable at time
    time_factors[i] * n_ref; the predictions are
    sigma^2/(1-2 rho) (s t)^rho min(s,t)^{1-2 rho} for the scaled process
    X_{tn}(f)/sqrt(n).
    """
    rho = float(constants.rho)
    if rho >= 0.5:
        raise MonteCarloError("functional covariance test needs the subcritical regime")
    scaled = np.asarray(x_at_time, float) / math.sqrt(n_ref)
    T, R = scaled.shape
    out = []
    for i in range(T):
        for j in range(i, T):
            s, tt = time_factors[i], time_factors[j]
            pred = sig2 / (1.0 - 2.0 * rho) * (s * tt) ** rho \
                * min(s, tt) ** (1.0 - 2.0 * rho)
            cov = float(np.cov(scaled[i], scaled[j], ddof=1)[0, 1])
            se = math.sqrt((scaled[i].var(ddof=1) * scaled[j].var(ddof=1)
                            + cov * cov) / (R - 1))
            tol = max(rel_tol * abs(pred), 4.0 * se)
            out.append(TestOutcome(
                name=f"functional-cov[{label}]({s},{tt})", observed=cov,
                predicted=pred, error=se, error_kind="se", tolerance=tol,
                passed=abs(cov - pred) <= tol,
                detail=f"Cov(X_sn(f), X_tn(f))/n across {R} replicas"))
    return out


# ---------------------------------------------------------------------------
# Calibration self-tests
# ---------------------------------------------------------------------------
def calibration_selftest(seed: int = 7) -> List[TestOutcome]:
    """Each statistical test must pass on synthetic ground truth and fail on a
    deliberately wrong prediction before it is applied to simulations."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    v = 0.37
    z = rng.normal(0.0, math.sqrt(v), size=4000)
    good = gaussian_bridge_test(z, v, label="calib")
    bad = gaussian_bridge_test(z, 2.0 * v, label="calib-wrong")
    cov_pair = rng.multivariate_normal([0, 0], [[1.0, -0.4], [-0.4, 1.0]], size=4000)
    good_cov = joint_covariance_test(cov_pair[:, 0], cov_pair[:, 1], -0.4,
                                     label="calib")
    ok = (all(o.passed for o in good)
          and not all(o.passed for o in bad)
          and good_cov.passed)
    return [TestOutcome(
        name="calibration-selftest", observed=float(ok), predicted=1.0,
        error=0.0, error_kind="abs", tolerance=0.0, passed=ok,
        detail="bridge test detects correct/incorrect variance; covariance test recovers ground truth")]


# ---------------------------------------------------------------------------
# Campaign analysis dispatch
# ---------------------------------------------------------------------------
def _is_degenerate(kernel: ReplacementKernel, f: TestFunction) -> bool:
    """mu(|f|) == 0, checkable exactly for atomic intensities."""
    mu = kernel.intensity
    if isinstance(mu, AtomicMeasure):
        return all(f(c) == 0 for c, _ in mu.pairs)
    return False


def analyze_campaign(result: CampaignResult,
                     tolerances: Optional[dict] = None,
                     time_factors: Optional[Sequence[float]] = None,
                     n_ref: Optional[int] = None,
                     tests: Optional[Sequence[str]] = None) -> List[TestOutcome]:
    """Run the regime-appropriate test battery on a campaign result.

    ``tests`` optionally restricts the battery to a subset of
    {"lln", "bridge", "joint", "functional", "supercritical"}.
    """
    tol = {"lln_band": 0.05, "variance_rel": 0.10, "variance_rel_critical": 0.15,
           "covariance_rel": 0.15, "functional_rel": 0.15}
    tol.update(tolerances or {})
    selected = set(tests) if tests else {"lln", "bridge", "joint",
                                         "functional", "supercritical"}
    camp = result.campaign
    consts = result.constants
    regime = camp.regime
    outcomes = calibration_selftest()
    if not outcomes[0].passed:
        return outcomes
    names = list(camp.observables)
    if "lln" in selected:
        for name in names:
            outcomes.append(lln_check(result, name, band=tol["lln_band"]))

    if regime in ("subcritical", "critical"):
        rel = tol["variance_rel"] if regime == "subcritical" \
            else tol["variance_rel_critical"]
        n_last = camp.horizons[-1]
        rescaled = {}
        for name in names:
            rescaled[name] = np.array([
                rescale(regime, consts, n_last, result.ubar[name][-1][r],
                        result.mubar_f[name]) for r in range(camp.replicas)])
            if "bridge" in selected:
                pred = float(bridge_covariance(camp.kernel, camp.observables[name],
                                               camp.observables[name]))
                outcomes.extend(gaussian_bridge_test(rescaled[name], pred,
                                                     label=name, rel_tol=rel))
        if "joint" in selected:
            for i in range(len(names)):
                for j in range(i + 1, len(names)):
                    f, g = names[i], names[j]
                    pred = float(bridge_covariance(camp.kernel, camp.observables[f],
                                                   camp.observables[g]))
                    outcomes.append(joint_covariance_test(
                        rescaled[f], rescaled[g], pred, label=f"{f},{g}",
                        rel_tol=tol["covariance_rel"]))
        if "functional" in selected and camp.time_grid \
                and regime == "subcritical" and time_factors and n_ref:
            for name in names:
                sig2 = float(sigma_sq(camp.kernel, _centered_fn(camp, name)))
                xc = result.x_at_time[name] - result.mubar_f[name] \
                    * result.totals_at_time
                outcomes.extend(functional_t2_test(
                    xc, time_factors, n_ref, consts, sig2, label=name,
                    rel_tol=tol["functional_rel"]))
    elif regime == "supercritical" and "supercritical" in selected:
        if len(camp.horizons) >= 3:
            for name in names:
                arr = np.stack([
                    np.array([rescale(regime, consts, h, result.ubar[name][h_i][r],
                                      result.mubar_f[name])
                              for r in range(camp.replicas)])
                    for h_i, h in enumerate(camp.horizons)])
                outcomes.extend(supercritical_convergence_diag(
                    arr, camp.horizons, label=name,
                    degenerate=_is_degenerate(camp.kernel, camp.observables[name])))
    return outcomes


def analyze_campaign_from_rows(campaign: Campaign, rows_by_replica: Dict[int, list],
                               cols: Sequence[str],
                               tolerances: Optional[dict] = None,
                               tests: Optional[Sequence[str]] = None) -> List[TestOutcome]:
    """Analysis entry point for rows read back from simulation outputs."""
    result = reduce_rows(campaign, rows_by_replica, cols)
    time_factors = None
    n_ref = None
    if campaign.time_grid and campaign.horizons:
        n_ref = max(campaign.horizons)
        time_factors = [tt / n_ref for tt in campaign.time_grid]
    return analyze_campaign(result, tolerances=tolerances,
                            time_factors=time_factors, n_ref=n_ref, tests=tests)


def _centered_fn(camp: Campaign, name: str) -> TestFunction:
    from .measures import centered

    consts = camp.constants
    f = camp.observables[name]
    c = float(measure_integrate(consts.mu_bar, f))
    return centered(f, c)
