"""Exact ground truth on tiny instances by exhaustive path enumeration.

Everything in here runs in rational arithmetic: outcome probabilities come
from the finite kernel's Fraction tables, sampling probabilities are
multiplicity/total, and observable values are converted to Fractions (every
float converts exactly). States reached at the same depth are merged, which
keeps the tree small for small color sets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Tuple

import numpy as np

from .engine import CheckpointGrid, UrnEngine
from .kernels import TableKernel
from .measures import CountingMeasure, TagFunction, TestFunction
from .spectral import apply_R


class OracleError(Exception):
    pass


class BudgetExceededError(OracleError):
    """The enumeration would expand more nodes than the budget allows."""


def _f_values(kernel: TableKernel, f: TestFunction) -> Tuple[Fraction, ...]:
    return tuple(Fraction(f(s)) for s in range(kernel.d))


def _urn_key(urn: CountingMeasure) -> tuple:
    return urn.as_sorted_tuple()


@dataclass(frozen=True)
class ExactMoments:
    mean: Fraction          # E[U_n(f)]
    mean_normalized: Fraction  # E[U_n(f)/U_n(1)]
    variance: Fraction      # Var[U_n(f)]
    n_states: int


def exact_moments(kernel: TableKernel, u0: CountingMeasure, n: int,
                  f: TestFunction, node_budget: int = 10 ** 6,
                  depth_cap: int = 8) -> ExactMoments:
    """Exact first/second moments of U_n(f) by depth-first-free enumeration.

    States with identical urns at the same depth are merged. ``depth_cap``
    guards against runaway requests; raise it explicitly for bigger runs.
    """
    if not isinstance(kernel, TableKernel):
        raise OracleError("exact enumeration needs a finite kernel with rational tables")
    if n > depth_cap:
        raise OracleError(f"depth {n} above the cap {depth_cap}; pass depth_cap=")
    if u0.total < 1:
        raise OracleError("initial urn is empty")

    states: Dict[tuple, Fraction] = {_urn_key(u0): Fraction(1)}
    expanded = 0
    for _ in range(n):
        nxt: Dict[tuple, Fraction] = {}
        for key, prob in states.items():
            total = sum(m for _, m in key)
            expanded += 1
            if expanded > node_budget:
                raise BudgetExceededError(f"node budget {node_budget} exceeded")
            for color, mult in key:
                p_color = Fraction(mult, total)
                for p_out, c, inn in kernel.rows[color]:
                    if p_out == 0:
                        continue
                    urn = CountingMeasure(key)
                    urn.add(color, c)
                    for v in inn:
                        urn.add(v, 1)
                    k2 = _urn_key(urn)
                    w = prob * p_color * p_out
                    nxt[k2] = nxt.get(k2, Fraction(0)) + w
        states = nxt
        assert sum(states.values()) == 1

    fv = _f_values(kernel, f)
    mean = Fraction(0)
    mean_norm = Fraction(0)
    second = Fraction(0)
    for key, prob in states.items():
        uf = sum(Fraction(m) * fv[c] for c, m in key)
        u1 = sum(m for _, m in key)
        mean += prob * uf
        mean_norm += prob * Fraction(uf, u1)
        second += prob * uf * uf
    return ExactMoments(mean=mean, mean_normalized=mean_norm,
                        variance=second - mean * mean, n_states=len(states))


def generator_identity_check(kernel: TableKernel, urn: CountingMeasure,
                             f: TestFunction) -> Fraction:
    """Residual of the one-step mean identity, exactly.

    Compares the directly enumerated conditional mean increment of U(f)
    against the normalized-urn integral of the averaged replacement of f;
    the two must agree exactly, so the returned Fraction must be 0.
    """
    if not isinstance(kernel, TableKernel):
        raise OracleError("identity check needs a finite kernel")
    fv = _f_values(kernel, f)
    total = urn.total

    direct = Fraction(0)
    for color, mult in urn.atoms():
        inner = Fraction(0)
        for p_out, c, inn in kernel.rows[color]:
            jump = c * fv[color] + sum(fv[v] for v in inn)
            inner += p_out * jump
        direct += Fraction(mult, total) * inner

    rf = apply_R(kernel, TagFunction(fv))
    via_r = sum(Fraction(mult, total) * Fraction(rf(color))
                for color, mult in urn.atoms())
    return direct - via_r


@dataclass
class OracleComparison:
    n: int
    exact: Fraction
    mc_mean: float
    se: float
    replicas: int
    passed: bool

    def describe(self) -> str:
        ex = float(self.exact)
        return (f"n={self.n}: exact E[Ubar_n(f)] = {self.exact} = {ex:.6f}, "
                f"MC = {self.mc_mean:.6f} +- {self.se:.2e} "
                f"({self.replicas} replicas) -> {'pass' if self.passed else 'FAIL'}")


def oracle_vs_montecarlo(kernel: TableKernel, u0: CountingMeasure, n: int,
                         f: TestFunction, replicas: int, base_seed: int = 0,
                         node_budget: int = 10 ** 6,
                         depth_cap: int = 8) -> list:
    """Exact E[Ubar_k(f)] versus the simulation engine at every k in 1..n.

    The Monte Carlo side must land within four standard errors of the exact
    value at each horizon; a tiny absolute slack covers float summation noise
    when the statistic is deterministic and the spread collapses to zero.
    """
    exacts = [exact_moments(kernel, u0, k, f, node_budget, depth_cap).mean_normalized
              for k in range(1, n + 1)]
    vals = np.empty((replicas, n))
    for r in range(replicas):
        eng = UrnEngine(kernel, u0, observables={"f": f}, base_seed=base_seed,
                        replica=r, track_modulation=False)
        traj = eng.run(steps=n, grid=CheckpointGrid(steps=range(1, n + 1)))
        arr = traj.as_array()
        cols = traj.columns
        obs = arr[:, cols.index("obs_f")]
        tot = arr[:, cols.index("total")]
        vals[r] = obs / tot
    out = []
    for k in range(1, n + 1):
        col = vals[:, k - 1]
        mc = float(col.mean())
        se = float(col.std(ddof=1) / math.sqrt(replicas))
        ex = float(exacts[k - 1])
        passed = abs(mc - ex) <= 4 * se + 1e-12 * max(1.0, abs(ex))
        out.append(OracleComparison(n=k, exact=exacts[k - 1], mc_mean=mc,
                                    se=se, replicas=replicas, passed=passed))
    return out
