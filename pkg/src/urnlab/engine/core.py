"""The simulation hot path: discrete chain, Poisson clock, martingale trackers.

One engine owns one replica. The state lives in flat arrays (a blocked
weighted sampler plus a color-per-slot table) shared by two executors: a
plain Python stepper (any kernel) and a compiled stepper (built-in kernels,
see ``fastpath``). Both consume the same three random streams in the same
per-step order -- holding time, color, kernel draw -- so a trajectory is a
deterministic function of (configuration, seed) regardless of executor.

Clock bookkeeping is exact: holding times are unit exponentials obtained as
-log1p(-u), the time-change integral grows by dt / total per segment, and the
predictable brackets accumulate the closed-form per-segment integral of the
piecewise-constant bracket density (no quadrature anywhere).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..kernels import ReplacementKernel
from ..measures import (
    Color,
    CountingMeasure,
    FiniteColors,
    PiecewisePolynomial,
    TestFunction,
    UnitInterval,
    centered,
    measure_integrate,
    product,
)
from ..spectral import spectral_constants

BLOCK = 32  # slots per block of the two-level sampler


class EngineError(Exception):
    pass


class IntegrityError(EngineError):
    """A multiplicity would drop below zero."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------
@dataclass
class ReplicaStreams:
    """Three Philox streams: holding times, color sampling, kernel draws."""

    hold: np.random.Generator
    color: np.random.Generator
    kernel: np.random.Generator


def replica_streams(base_seed: int, replica: int) -> ReplicaStreams:
    """Streams for replica k derived from (base_seed, k), counter-based so
    results do not depend on thread scheduling."""
    children = np.random.SeedSequence(base_seed, spawn_key=(replica,)).spawn(3)
    gens = [np.random.Generator(np.random.Philox(c)) for c in children]
    return ReplicaStreams(hold=gens[0], color=gens[1], kernel=gens[2])


def exponential_from_uniform(u: float) -> float:
    """Unit-rate exponential via inversion; shared by both executors."""
    return -math.log1p(-u)


# ---------------------------------------------------------------------------
# Two-level weighted sampler
# ---------------------------------------------------------------------------
class WeightedSlotSampler:
    """Integer-weighted slot sampler: a binary indexed tree over 32-slot block
    sums plus a short in-block scan.

    Point update and prefix search both cost O(log n_blocks) plus a bounded
    scan. Keeping the indexed tree over blocks rather than slots keeps it
    cache-resident at hot-loop scales, which is what makes the per-operation
    cost flat in n. Slots are append-only; weights may drop to zero and stay
    as holes until the owner compacts.
    """

    __slots__ = ("coarse", "w", "nblocks_cap", "n_slots", "total", "zero_slots")

    def __init__(self, weights: Sequence[int] = (), min_blocks: int = 1):
        n = len(weights)
        nb = max(min_blocks, (n + BLOCK - 1) // BLOCK, 1)
        self.nblocks_cap = 1 << (nb - 1).bit_length()
        self.w = np.zeros(self.nblocks_cap * BLOCK, np.int32)
        self.n_slots = n
        for j, x in enumerate(weights):
            if x < 0:
                raise ValueError("weights must be >= 0")
            self.w[j] = x
        self.total = int(sum(weights))
        self.zero_slots = sum(1 for x in weights if x == 0)
        self._rebuild_coarse()

    def _rebuild_coarse(self) -> None:
        sums = self.w.reshape(self.nblocks_cap, BLOCK).sum(axis=1, dtype=np.int64)
        fen = sums.copy()
        n = self.nblocks_cap
        for i in range(1, n + 1):
            j = i + (i & (-i))
            if j <= n:
                fen[j - 1] += fen[i - 1]
        self.coarse = fen

    def _grow(self) -> None:
        old_w = self.w
        self.nblocks_cap *= 2
        self.w = np.zeros(self.nblocks_cap * BLOCK, np.int32)
        self.w[: len(old_w)] = old_w
        self._rebuild_coarse()

    def append(self, weight: int) -> int:
        if self.n_slots == len(self.w):
            self._grow()
        j = self.n_slots
        self.n_slots += 1
        self.zero_slots += 1
        if weight:
            self.update(j, weight)
        return j

    def update(self, slot: int, delta: int) -> None:
        if delta == 0:
            return
        old = int(self.w[slot])
        new = old + delta
        if new < 0:
            raise IntegrityError(f"slot {slot} multiplicity would become {new}")
        self.w[slot] = new
        if old == 0 and new > 0:
            self.zero_slots -= 1
        elif old > 0 and new == 0:
            self.zero_slots += 1
        self.total += delta
        i = (slot // BLOCK) + 1
        n = self.nblocks_cap
        while i <= n:
            self.coarse[i - 1] += delta
            i += i & (-i)

    def weight(self, slot: int) -> int:
        return int(self.w[slot])

    def sample(self, u: float) -> int:
        """Slot j with probability w_j / total, driven by one uniform."""
        if self.total <= 0:
            raise EngineError("cannot sample from an empty urn")
        target = u * self.total
        if target >= self.total:  # guard against u * total rounding up
            target = self.total - 0.5
        idx = 0
        bm = self.nblocks_cap >> 1
        coarse = self.coarse
        while bm:
            nxt = idx + bm
            v = float(coarse[nxt - 1])
            if target >= v:
                target -= v
                idx = nxt
            bm >>= 1
        j = idx * BLOCK
        ti = int(target)
        acc = 0
        w = self.w
        while True:
            acc += int(w[j])
            if ti < acc:
                return j
            j += 1

    def compact(self) -> List[int]:
        """Drop zero-weight slots; returns the kept old slot indices in order."""
        keep = [j for j in range(self.n_slots) if self.w[j] > 0]
        weights = [int(self.w[j]) for j in keep]
        self.__init__(weights)
        return keep


# ---------------------------------------------------------------------------
# Trackers and trajectories
# ---------------------------------------------------------------------------
@dataclass
class MartingaleTracker:
    """State of one exponentially discounted martingale X_t(f) e^{-lam Phi(t)}.

    Kind "centered" tracks an auto-centered observable with the copy
    eigenvalue in the exponent; kind "modulation" tracks the modulation
    function with the top eigenvalue. ``opt_bracket`` is the running sum of
    squared jumps; ``pred_bracket`` integrates the bracket density
    Q(X, f) e^{-2 lam Phi} exactly over holding segments (None q-hook means
    the kernel has no closed-form second moments and the column stays NaN).
    """

    name: str
    kind: str  # "modulation" | "centered"
    lam: float
    f: TestFunction
    center: float = 0.0
    xf: float = 0.0
    sq: Optional[float] = None
    opt_bracket: float = 0.0
    pred_bracket: float = 0.0
    q_of_color: Optional[Callable] = None
    i2c: Optional[float] = None

    def xfc(self, total: int) -> float:
        return self.xf - self.center * total

    def value(self, total: int, phi: float) -> float:
        return self.xfc(total) * math.exp(-self.lam * phi)


class CheckpointGrid:
    """Sorted step counts and continuous times at which rows are recorded."""

    def __init__(self, steps: Sequence[int] = (), times: Sequence[float] = ()):
        self.steps: Tuple[int, ...] = tuple(sorted(set(int(s) for s in steps)))
        self.times: Tuple[float, ...] = tuple(sorted(set(float(t) for t in times)))
        if any(s < 0 for s in self.steps):
            raise ValueError("checkpoint steps must be >= 0")
        if any(t <= 0 for t in self.times):
            raise ValueError("checkpoint times must be > 0")


class Trajectory:
    """Checkpoint rows: t, n, total, phi, the modulation tracker, then per
    observable its raw value, martingale value, and both brackets."""

    BASE_COLS = ("t", "n", "total", "phi", "M_a", "opt_a", "pred_a")

    def __init__(self, obs_names: Sequence[str]):
        self.obs_names = tuple(obs_names)
        self._rows: List[List[float]] = []

    @property
    def columns(self) -> Tuple[str, ...]:
        cols = list(self.BASE_COLS)
        for name in self.obs_names:
            cols += [f"obs_{name}", f"M_{name}", f"opt_bracket_{name}",
                     f"pred_bracket_{name}"]
        return tuple(cols)

    def append_row(self, row: Sequence[float]) -> None:
        self._rows.append(list(row))

    def __len__(self) -> int:
        return len(self._rows)

    def as_array(self) -> np.ndarray:
        if not self._rows:
            return np.empty((0, len(self.columns)))
        return np.array(self._rows, dtype=float)

    def column(self, name: str) -> np.ndarray:
        return self.as_array()[:, self.columns.index(name)]

    def _row_dict(self, r: int) -> Dict[str, float]:
        return {c: float(self._rows[r][i]) for i, c in enumerate(self.columns)}

    def row_at_step(self, n: int) -> Dict[str, float]:
        for r in range(len(self._rows) - 1, -1, -1):
            if int(self._rows[r][1]) == n:
                return self._row_dict(r)
        raise KeyError(f"no checkpoint at step {n}")

    def row_at_time(self, t: float) -> Dict[str, float]:
        for r in range(len(self._rows)):
            if self._rows[r][0] == t:
                return self._row_dict(r)
        raise KeyError(f"no checkpoint at time {t}")


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------
class UrnEngine:
    """One replica of the urn chain run at Poisson jump times.

    Parameters
    ----------
    kernel : ReplacementKernel
    u0 : CountingMeasure
        Non-empty initial composition.
    observables : mapping name -> TestFunction, optional
        Raw observables. Each one gets a centered martingale tracker next to
        its raw column; the center is the observable's mean under the
        normalized innovation intensity, computed exactly.
    base_seed, replica : int
        Select this replica's random streams.
    track_modulation : bool
        Track the modulation martingale (on by default).
    force_python : bool
        Skip the compiled executor even when eligible (testing hook).
    """

    def __init__(self, kernel: ReplacementKernel, u0: CountingMeasure,
                 observables: Optional[Dict[str, TestFunction]] = None,
                 base_seed: int = 0, replica: int = 0,
                 track_modulation: bool = True,
                 force_python: bool = False):
        if u0.total < 1:
            raise EngineError("initial urn must contain at least one ball")
        self.kernel = kernel
        self.constants = spectral_constants(kernel)
        self.lam1 = float(self.constants.lambda1)
        self.lam2 = float(self.constants.lambda2)
        self.base_seed = int(base_seed)
        self.replica = int(replica)
        self.streams = replica_streams(base_seed, replica)
        self.force_python = bool(force_python)

        space = kernel.space
        self.space = space
        self._tag_space = isinstance(space, FiniteColors)
        self._point_space = isinstance(space, UnitInterval)
        self.slot_colors: Optional[list] = None
        self._slot_of: Optional[dict] = None
        self._colors_arr: Optional[np.ndarray] = None

        for c, _ in u0.atoms():
            if not space.contains(c):
                raise EngineError(f"initial color {c!r} outside the color space")
        if self._tag_space:
            weights = [0] * space.d
            for c, m in u0.atoms():
                weights[c] = m
            self.sampler = WeightedSlotSampler(weights)
        else:
            colors = [c for c, _ in u0.atoms()]
            weights = [m for _, m in u0.atoms()]
            self.sampler = WeightedSlotSampler(weights)
            if self._point_space:
                self._colors_arr = np.zeros(len(self.sampler.w), np.float64)
                self._colors_arr[: len(colors)] = colors
            else:
                self.slot_colors = list(colors)
                self._slot_of = {c: j for j, c in enumerate(colors)}

        self.t = 0.0
        self.phi = 0.0
        self.n = 0

        self.trackers: List[MartingaleTracker] = []
        self.obs_names: List[str] = []
        self.mod_tracker: Optional[MartingaleTracker] = None
        if track_modulation:
            a = kernel.modulation
            tr = MartingaleTracker(name="a", kind="modulation", lam=self.lam1, f=a)
            tr.xf = float(self._integrate_state(a))
            tr.sq, tr.q_of_color, tr.i2c = self._q_setup(a)
            self.trackers.append(tr)
            self.mod_tracker = tr

        for name, f in (observables or {}).items():
            c = float(measure_integrate(self.constants.mu_bar, f))
            tr = MartingaleTracker(name=name, kind="centered", lam=self.lam2,
                                   f=f, center=c)
            tr.xf = float(self._integrate_state(f))
            fc = centered(f, c)
            tr.sq, tr.q_of_color, tr.i2c = self._q_setup(fc)
            self.trackers.append(tr)
            self.obs_names.append(name)

    # -- state helpers ---------------------------------------------------------
    def color_of(self, slot: int) -> Color:
        if self._tag_space:
            return slot
        if self._point_space:
            return float(self._colors_arr[slot])
        return self.slot_colors[slot]

    def urn(self) -> CountingMeasure:
        """Current composition as a counting measure (merges duplicate points)."""
        out = CountingMeasure()
        for j in range(self.sampler.n_slots):
            m = self.sampler.weight(j)
            if m:
                out.add(self.color_of(j), m)
        return out

    def _integrate_state(self, f: TestFunction) -> float:
        total = 0.0
        for j in range(self.sampler.n_slots):
            m = self.sampler.weight(j)
            if m:
                total += m * float(f(self.color_of(j)))
        return total

    def _sum_over_state(self, q: Callable) -> float:
        total = 0.0
        for j in range(self.sampler.n_slots):
            m = self.sampler.weight(j)
            if m:
                total += m * q(self.color_of(j))
        return total

    def _q_setup(self, f: TestFunction):
        """Per-color q evaluator and initial q-sum for a tracker function."""
        from ..kernels import SimonKernel, TableKernel

        kernel = self.kernel
        if isinstance(kernel, SimonKernel):
            try:
                ff = product(f, f)
            except Exception:
                return None, None, None
            i2 = ff.lebesgue_integral() if isinstance(ff, PiecewisePolynomial) \
                else float(ff.value)
            p = kernel.p

            def q(color, _p=p, _i2=i2, _f=f):
                fs = float(_f(color))
                return _p * fs * fs + (1.0 - _p) * _i2

            return self._sum_over_state(q), q, i2
        if isinstance(kernel, TableKernel):
            table = [float(kernel.q_value(s, f)) for s in range(kernel.d)]

            def q(color, _t=table):
                return _t[color]

            return self._sum_over_state(q), q, None
        if kernel.q_value(self.color_of(0), f) is None:
            return None, None, None

        def q(color, _k=kernel, _f=f):
            return float(_k.q_value(color, _f))

        return self._sum_over_state(q), q, None

    # -- public ops --------------------------------------------------------------
    def q_form(self, f: TestFunction, mc: Optional[Tuple[int, int]] = None):
        """Q(current urn, f), the conditional second-moment form.

        With ``mc=(n_draws, seed)`` estimates it by sampling colors from the
        urn and replacements from the kernel, returning (estimate, se).
        """
        if mc is None:
            _, q, _ = self._q_setup(f)
            if q is None:
                raise EngineError("kernel has no closed-form q; pass mc=(n, seed)")
            return self._sum_over_state(q) / self.sampler.total
        n_draws, seed = mc
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        vals = np.empty(n_draws)
        for i in range(n_draws):
            j = self.sampler.sample(rng.random())
            s = self.color_of(j)
            rep = self.kernel.sample(s, rng)
            jump = float(f(s)) * rep.copies + sum(float(f(v)) for v in rep.innovation)
            vals[i] = jump * jump
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_draws))

    # -- stepping (python executor) ------------------------------------------------
    def _advance_to(self, phi1: float) -> None:
        """Accumulate each tracker's exact bracket integral over [phi, phi1]."""
        for tr in self.trackers:
            if tr.sq is None:
                continue
            tr.pred_bracket += self._segment_integral(tr, phi1)
        self.phi = phi1

    def _segment_integral(self, tr: MartingaleTracker, phi1: float) -> float:
        lam = tr.lam
        if lam != 0.0:
            z0 = math.exp(-2.0 * lam * self.phi)
            z1 = math.exp(-2.0 * lam * phi1)
            return tr.sq / (2.0 * lam) * (z0 - z1)
        return tr.sq * (phi1 - self.phi)

    def _do_jump(self) -> None:
        streams = self.streams
        W0 = self.sampler.total
        u = streams.color.random()
        j = self.sampler.sample(u)
        s = self.color_of(j)
        rep = self.kernel.sample(s, streams.kernel)
        if __debug__:
            assert rep.copies >= -1 and rep.copies + len(rep.innovation) >= 0
        dW = rep.added_balls

        for tr in self.trackers:
            zj = math.exp(-tr.lam * self.phi)
            fs = float(tr.f(s))
            dxf = rep.copies * fs
            for v in rep.innovation:
                dxf += float(tr.f(v))
            dm = (dxf - tr.center * dW) * zj if tr.kind == "centered" else dxf * zj
            tr.xf += dxf
            tr.opt_bracket += dm * dm
            if tr.sq is not None:
                q = tr.q_of_color
                dsq = rep.copies * q(s)
                for v in rep.innovation:
                    dsq += q(v)
                tr.sq += dsq

        # urn update: copies first, then innovation atoms in order
        if rep.copies:
            self.sampler.update(j, rep.copies)
        for v in rep.innovation:
            self._insert_color(v)
        self.n += 1
        self._maybe_compact()

    def _insert_color(self, v: Color) -> None:
        if not self.space.contains(v):
            raise EngineError(f"kernel produced color {v!r} outside its space")
        if self._tag_space:
            self.sampler.update(v, 1)
            return
        if self._point_space:
            # sampled points are a.s. distinct: always open a fresh slot
            j = self.sampler.append(0)
            if j >= len(self._colors_arr):
                grown = np.zeros(len(self.sampler.w), np.float64)
                grown[: len(self._colors_arr)] = self._colors_arr
                self._colors_arr = grown
            self._colors_arr[j] = v
            self.sampler.update(j, 1)
            return
        j = self._slot_of.get(v)
        if j is None:
            j = self.sampler.append(0)
            self.slot_colors.append(v)
            self._slot_of[v] = j
        self.sampler.update(j, 1)

    def _maybe_compact(self) -> None:
        s = self.sampler
        if self._tag_space or s.n_slots < 2 * BLOCK or s.zero_slots * 2 <= s.n_slots:
            return
        keep = s.compact()
        if self._point_space:
            arr = np.zeros(len(s.w), np.float64)
            arr[: len(keep)] = self._colors_arr[keep]
            self._colors_arr = arr
        else:
            self.slot_colors = [self.slot_colors[j] for j in keep]
            self._slot_of = {c: j for j, c in enumerate(self.slot_colors)}

    # -- checkpoint rows --------------------------------------------------------
    def _emit_row(self, traj: Trajectory, t: float, phi: float) -> None:
        """Row from the current state; phi may lie mid-segment (t between
        jumps), in which case bracket integrals are taken up to phi."""
        total = self.sampler.total
        row = [t, float(self.n), float(total), phi]
        mod = self.mod_tracker
        if mod is not None:
            row += [mod.xf * math.exp(-mod.lam * phi), mod.opt_bracket,
                    self._pred_at(mod, phi)]
        else:
            row += [math.nan, math.nan, math.nan]
        for tr in self.trackers:
            if tr.kind != "centered":
                continue
            row += [tr.xf, tr.xfc(total) * math.exp(-tr.lam * phi),
                    tr.opt_bracket, self._pred_at(tr, phi)]
        traj.append_row(row)

    def _pred_at(self, tr: MartingaleTracker, phi: float) -> float:
        if tr.sq is None:
            return math.nan
        if phi == self.phi:
            return tr.pred_bracket
        return tr.pred_bracket + self._segment_integral(tr, phi)

    # -- run ----------------------------------------------------------------------
    def run(self, steps: Optional[int] = None, time: Optional[float] = None,
            grid: Optional[CheckpointGrid] = None) -> Trajectory:
        """Advance to the horizon (a step count or a continuous time, exactly
        one), recording grid checkpoints plus a final horizon row.

        The final state stays in the engine, so a later ``run`` extends the
        same path; the returned trajectory holds this call's rows only.
        """
        if (steps is None) == (time is None):
            raise ValueError("pass exactly one of steps= or time=")
        grid = grid or CheckpointGrid()
        traj = Trajectory(self.obs_names)

        if steps is not None:
            if steps < self.n:
                raise ValueError("horizon lies behind the current position")
            step_set = set(s for s in grid.steps if self.n <= s <= steps)
            step_set.add(steps)
        else:
            if time < self.t:
                raise ValueError("horizon lies behind the current position")
            step_set = set(s for s in grid.steps if s > self.n)
        times_pending = [tt for tt in grid.times
                         if tt > self.t and (time is None or tt <= time)]

        if self.n in step_set:
            self._emit_row(traj, self.t, self.phi)
            step_set.discard(self.n)
        if steps is not None and self.n >= steps:
            return traj
        if time is not None and self.t >= time:
            self._emit_row(traj, self.t, self.phi)
            return traj

        if self._try_fast(steps, time, step_set, times_pending, traj):
            return traj

        streams = self.streams
        while True:
            u = streams.hold.random()
            dt = exponential_from_uniform(u)
            t1 = self.t + dt
            W0 = self.sampler.total

            while times_pending and times_pending[0] <= t1:
                tau = times_pending.pop(0)
                self._emit_row(traj, tau, self.phi + (tau - self.t) / W0)

            if time is not None and t1 > time:
                self._advance_to(self.phi + (time - self.t) / W0)
                self.t = time
                self._emit_row(traj, self.t, self.phi)
                return traj

            self._advance_to(self.phi + dt / W0)
            self.t = t1
            self._do_jump()
            if self.n in step_set:
                self._emit_row(traj, self.t, self.phi)
                step_set.discard(self.n)
            if steps is not None and self.n >= steps:
                return traj

    # below this many remaining steps the compiled path's call overhead loses
    # to the plain stepper
    FAST_PATH_MIN_STEPS = 1000

    def _try_fast(self, steps, time, step_set, times_pending, traj) -> bool:
        if self.force_python:
            return False
        remaining = (steps - self.n) if steps is not None else (time - self.t)
        if remaining < self.FAST_PATH_MIN_STEPS:
            return False
        try:
            from . import fastpath
        except ImportError:
            return False
        plan = fastpath.plan(self)
        if plan is None:
            return False
        fastpath.run_fast(self, plan, steps, time, sorted(step_set),
                          list(times_pending), traj)
        return True

    # -- diagnostics ----------------------------------------------------------------
    def recompute_tracker_value(self, tr: MartingaleTracker) -> float:
        """Tracker value re-derived from the raw slot state, for drift checks."""
        xf = self._integrate_state(tr.f)
        xfc = xf - tr.center * self.sampler.total if tr.kind == "centered" else xf
        return xfc * math.exp(-tr.lam * self.phi)
