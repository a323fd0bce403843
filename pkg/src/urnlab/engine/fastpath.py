"""Compiled executors for the built-in kernels.

Same semantics as the Python stepper in ``core``: identical stream
consumption (one holding uniform, one color uniform, then the kernel's fixed
draw arity per step), identical sampler arithmetic, identical checkpoint
rules. Integer state (multiplicities, totals, slot layout) is therefore
bit-identical across executors; float accumulators agree to rounding.

Two step loops are compiled: the copy-or-innovate kernel on [0,1] with
piecewise-polynomial observables, and finite-table kernels with tag-table
observables. Everything else runs on the Python path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numba import njit

from ..measures import ConstantFunction, PiecewisePolynomial, TagFunction
from .core import BLOCK, Trajectory, UrnEngine

STATUS_DONE = 0
STATUS_CAPACITY = 1


@dataclass
class SimonFastSpec:
    p: float


@dataclass
class TableFastSpec:
    d: int
    row_start: np.ndarray  # i8[d+1]
    out_cum: np.ndarray    # f8[n_out], cumulative within each row
    out_c: np.ndarray      # i8[n_out]
    inn_start: np.ndarray  # i8[n_out+1]
    inn_tags: np.ndarray   # i8[total innovation atoms]

    @staticmethod
    def from_kernel(kernel) -> "TableFastSpec":
        row_start = [0]
        out_cum: List[float] = []
        out_c: List[int] = []
        inn_start = [0]
        inn_tags: List[int] = []
        for s in range(kernel.d):
            cum = kernel._cum[s]
            for (_, c, inn), top in zip(kernel.rows[s], cum):
                out_cum.append(top)
                out_c.append(c)
                inn_tags.extend(inn)
                inn_start.append(len(inn_tags))
            row_start.append(len(out_cum))
        return TableFastSpec(
            d=kernel.d,
            row_start=np.array(row_start, np.int64),
            out_cum=np.array(out_cum, np.float64),
            out_c=np.array(out_c, np.int64),
            inn_start=np.array(inn_start, np.int64),
            inn_tags=np.array(inn_tags, np.int64),
        )


# ---------------------------------------------------------------------------
# Eligibility
# ---------------------------------------------------------------------------
@dataclass
class _Plan:
    kind: str
    spec: object
    breaks: Optional[np.ndarray] = None
    nb: Optional[np.ndarray] = None
    coefs: Optional[np.ndarray] = None
    centers: Optional[np.ndarray] = None
    i2c: Optional[np.ndarray] = None
    fvals: Optional[np.ndarray] = None
    qtab: Optional[np.ndarray] = None
    a_tab: Optional[np.ndarray] = None
    qa_tab: Optional[np.ndarray] = None


def plan(engine: UrnEngine) -> Optional[_Plan]:
    """Inspect an engine and return a compiled-execution plan, or None."""
    try:
        spec = engine.kernel.fast_spec()
    except Exception:
        return None
    if spec is None:
        return None
    centered = [tr for tr in engine.trackers if tr.kind == "centered"]
    if isinstance(spec, SimonFastSpec):
        if engine.mod_tracker is not None:
            a = engine.mod_tracker.f
            if not (isinstance(a, ConstantFunction) and float(a.value) == 1.0):
                return None
        pps = []
        for tr in centered:
            f = tr.f
            if isinstance(f, ConstantFunction):
                f = PiecewisePolynomial.constant(float(f.value))
            if not isinstance(f, PiecewisePolynomial) or tr.sq is None:
                return None
            pps.append(f)
        nobs = len(pps)
        max_nb = max([len(f.breaks) for f in pps], default=2)
        max_deg = max([max(len(p) for p in f.coeffs) for f in pps], default=1)
        breaks = np.zeros((max(nobs, 1), max_nb))
        nb = np.zeros(max(nobs, 1), np.int64)
        coefs = np.zeros((max(nobs, 1), max(max_nb - 1, 1), max_deg))
        for i, f in enumerate(pps):
            nb[i] = len(f.breaks)
            breaks[i, : nb[i]] = f.breaks
            for k, piece in enumerate(f.coeffs):
                coefs[i, k, : len(piece)] = piece
        return _Plan(
            kind="simon", spec=spec, breaks=breaks, nb=nb, coefs=coefs,
            centers=np.array([tr.center for tr in centered], float),
            i2c=np.array([tr.i2c for tr in centered], float),
        )
    if isinstance(spec, TableFastSpec):
        d = spec.d
        for tr in centered:
            if not isinstance(tr.f, (TagFunction, ConstantFunction)) or tr.sq is None:
                return None
        nobs = len(centered)
        fvals = np.zeros((max(nobs, 1), d))
        qtab = np.zeros((max(nobs, 1), d))
        for i, tr in enumerate(centered):
            for s in range(d):
                fvals[i, s] = float(tr.f(s))
                qtab[i, s] = float(tr.q_of_color(s))
        a_tab = np.zeros(d)
        qa_tab = np.zeros(d)
        if engine.mod_tracker is not None:
            if engine.mod_tracker.sq is None:
                return None
            for s in range(d):
                a_tab[s] = float(engine.mod_tracker.f(s))
                qa_tab[s] = float(engine.mod_tracker.q_of_color(s))
        return _Plan(kind="table", spec=spec, fvals=fvals, qtab=qtab,
                     a_tab=a_tab, qa_tab=qa_tab,
                     centers=np.array([tr.center for tr in centered], float))
    return None


# ---------------------------------------------------------------------------
# Compiled helpers
# ---------------------------------------------------------------------------
@njit(cache=True, nogil=True)
def _pp_eval(breaks, nb, coefs, i, s):
    lo = 0
    hi = nb[i] - 1
    while lo < hi - 1:
        mid = (lo + hi) >> 1
        if breaks[i, mid] <= s:
            lo = mid
        else:
            hi = mid
    acc = 0.0
    for k in range(coefs.shape[2] - 1, -1, -1):
        acc = acc * s + coefs[i, lo, k]
    return acc


@njit(cache=True, nogil=True)
def _descend(coarse, nblocks_cap, w, target):
    idx = 0
    bm = nblocks_cap >> 1
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
    while True:
        acc += int(w[j])
        if ti < acc:
            return j
        j += 1


@njit(cache=True, nogil=True)
def _coarse_add(coarse, nblocks_cap, slot, delta):
    i = (slot // BLOCK) + 1
    while i <= nblocks_cap:
        coarse[i - 1] += delta
        i += i & (-i)


@njit(cache=True, nogil=True)
def _seg_integral(sq_val, lam, z0, z1, dphi):
    if lam != 0.0:
        return sq_val / (2.0 * lam) * (z0 - z1)
    return sq_val * dphi


@njit(cache=True, nogil=True)
def _emit(out, row, t, n, W, phi_row, phi_seg, has_mod, lam1, lam2,
          z2_seg, za_seg, mod_state, xf, sq, optb, predb, centers):
    """Checkpoint row; phi_row may be mid-segment ahead of phi_seg, in which
    case the bracket columns include the partial segment integral."""
    nobs = xf.shape[0]
    out[row, 0] = t
    out[row, 1] = float(n)
    out[row, 2] = float(W)
    out[row, 3] = phi_row
    if has_mod:
        pa = mod_state[3]
        if phi_row != phi_seg:
            pa += _seg_integral(mod_state[1], lam1, za_seg,
                                np.exp(-2.0 * lam1 * phi_row), phi_row - phi_seg)
        out[row, 4] = mod_state[0] * np.exp(-lam1 * phi_row)
        out[row, 5] = mod_state[2]
        out[row, 6] = pa
    else:
        out[row, 4] = np.nan
        out[row, 5] = np.nan
        out[row, 6] = np.nan
    for i in range(nobs):
        pb = predb[i]
        if phi_row != phi_seg:
            pb += _seg_integral(sq[i], lam2, z2_seg,
                                np.exp(-2.0 * lam2 * phi_row), phi_row - phi_seg)
        base = 7 + 4 * i
        out[row, base] = xf[i]
        out[row, base + 1] = (xf[i] - centers[i] * float(W)) * np.exp(-lam2 * phi_row)
        out[row, base + 2] = optb[i]
        out[row, base + 3] = pb


# ---------------------------------------------------------------------------
# Copy-or-innovate stepper
# ---------------------------------------------------------------------------
@njit(cache=True, nogil=True)
def _simon_steps(p, lam1, lam2, has_mod,
                 coarse, nblocks_cap, w, colors,
                 istate, fstate, mod_state,
                 xf, sq, optb, predb,
                 breaks, nb, coefs, centers, i2c,
                 step_grid, time_grid,
                 step_mode, horizon_steps, horizon_time,
                 out, gh, gc, gk):
    # istate: [n, W, n_slots, rows, step_idx, time_idx]
    # fstate: [t, phi, z2, za] with z = e^{-2 lam phi} at the current phi
    # mod_state: [Xa, Sqa, opt_a, pred_a]
    n = istate[0]
    W = istate[1]
    n_slots = istate[2]
    rows = istate[3]
    si = istate[4]
    ti = istate[5]
    t = fstate[0]
    phi = fstate[1]
    z2 = fstate[2]
    za = fstate[3]
    nobs = xf.shape[0]
    cap = w.shape[0]
    status = STATUS_DONE

    while True:
        if step_mode and n >= horizon_steps:
            break
        if n_slots + 1 > cap:
            status = STATUS_CAPACITY
            break

        dt = -np.log1p(-gh.random())
        t1 = t + dt
        Wf = float(W)

        while ti < time_grid.shape[0] and time_grid[ti] <= t1:
            tau = time_grid[ti]
            _emit(out, rows, tau, n, W, phi + (tau - t) / Wf, phi, has_mod,
                  lam1, lam2, z2, za, mod_state, xf, sq, optb, predb, centers)
            rows += 1
            ti += 1

        if not step_mode and t1 > horizon_time:
            phi_t = phi + (horizon_time - t) / Wf
            z2n = np.exp(-2.0 * lam2 * phi_t)
            zan = np.exp(-2.0 * lam1 * phi_t)
            for i in range(nobs):
                predb[i] += _seg_integral(sq[i], lam2, z2, z2n, phi_t - phi)
            if has_mod:
                mod_state[3] += _seg_integral(mod_state[1], lam1, za, zan,
                                              phi_t - phi)
            t = horizon_time
            phi = phi_t
            z2 = z2n
            za = zan
            _emit(out, rows, t, n, W, phi, phi, has_mod, lam1, lam2,
                  z2, za, mod_state, xf, sq, optb, predb, centers)
            rows += 1
            break

        phi1 = phi + dt / Wf
        z2n = np.exp(-2.0 * lam2 * phi1)
        zan = np.exp(-2.0 * lam1 * phi1)
        for i in range(nobs):
            predb[i] += _seg_integral(sq[i], lam2, z2, z2n, phi1 - phi)
        if has_mod:
            mod_state[3] += _seg_integral(mod_state[1], lam1, za, zan, phi1 - phi)
        t = t1
        phi = phi1
        z2 = z2n
        za = zan

        # jump: sampled color, then the kernel's two uniforms (coin, location)
        target = gc.random() * Wf
        if target >= Wf:
            target = Wf - 0.5
        j = _descend(coarse, nblocks_cap, w, target)
        ub = gk.random()
        uv = gk.random()
        if ub < p:
            x = colors[j]
            w[j] += 1
            _coarse_add(coarse, nblocks_cap, j, 1)
        else:
            x = uv
            colors[n_slots] = uv
            w[n_slots] = 1
            _coarse_add(coarse, nblocks_cap, n_slots, 1)
            n_slots += 1
        zj2 = np.sqrt(z2)
        for i in range(nobs):
            fx = _pp_eval(breaks, nb, coefs, i, x)
            fc = fx - centers[i]
            xf[i] += fx
            dm = fc * zj2
            optb[i] += dm * dm
            sq[i] += p * fc * fc + (1.0 - p) * i2c[i]
        if has_mod:
            dma = np.sqrt(za)  # jump of size 1 in X(a)
            mod_state[0] += 1.0
            mod_state[1] += 1.0
            mod_state[2] += dma * dma
        W += 1
        n += 1

        if si < step_grid.shape[0] and n == step_grid[si]:
            _emit(out, rows, t, n, W, phi, phi, has_mod, lam1, lam2,
                  z2, za, mod_state, xf, sq, optb, predb, centers)
            rows += 1
            si += 1

    istate[0] = n
    istate[1] = W
    istate[2] = n_slots
    istate[3] = rows
    istate[4] = si
    istate[5] = ti
    fstate[0] = t
    fstate[1] = phi
    fstate[2] = z2
    fstate[3] = za
    return status


# ---------------------------------------------------------------------------
# Finite-table stepper
# ---------------------------------------------------------------------------
@njit(cache=True, nogil=True)
def _table_steps(lam1, lam2, has_mod,
                 coarse, nblocks_cap, w,
                 row_start, out_cum, out_c, inn_start, inn_tags,
                 istate, fstate, mod_state,
                 xf, sq, optb, predb,
                 fvals, qtab, centers, a_tab, qa_tab,
                 step_grid, time_grid,
                 step_mode, horizon_steps, horizon_time,
                 out, gh, gc, gk):
    n = istate[0]
    W = istate[1]
    rows = istate[3]
    si = istate[4]
    ti = istate[5]
    t = fstate[0]
    phi = fstate[1]
    z2 = fstate[2]
    za = fstate[3]
    nobs = xf.shape[0]
    status = STATUS_DONE

    while True:
        if step_mode and n >= horizon_steps:
            break

        dt = -np.log1p(-gh.random())
        t1 = t + dt
        Wf = float(W)

        while ti < time_grid.shape[0] and time_grid[ti] <= t1:
            tau = time_grid[ti]
            _emit(out, rows, tau, n, W, phi + (tau - t) / Wf, phi, has_mod,
                  lam1, lam2, z2, za, mod_state, xf, sq, optb, predb, centers)
            rows += 1
            ti += 1

        if not step_mode and t1 > horizon_time:
            phi_t = phi + (horizon_time - t) / Wf
            z2n = np.exp(-2.0 * lam2 * phi_t)
            zan = np.exp(-2.0 * lam1 * phi_t)
            for i in range(nobs):
                predb[i] += _seg_integral(sq[i], lam2, z2, z2n, phi_t - phi)
            if has_mod:
                mod_state[3] += _seg_integral(mod_state[1], lam1, za, zan,
                                              phi_t - phi)
            t = horizon_time
            phi = phi_t
            z2 = z2n
            za = zan
            _emit(out, rows, t, n, W, phi, phi, has_mod, lam1, lam2,
                  z2, za, mod_state, xf, sq, optb, predb, centers)
            rows += 1
            break

        phi1 = phi + dt / Wf
        z2n = np.exp(-2.0 * lam2 * phi1)
        zan = np.exp(-2.0 * lam1 * phi1)
        for i in range(nobs):
            predb[i] += _seg_integral(sq[i], lam2, z2, z2n, phi1 - phi)
        if has_mod:
            mod_state[3] += _seg_integral(mod_state[1], lam1, za, zan, phi1 - phi)
        t = t1
        phi = phi1
        z2 = z2n
        za = zan

        # jump: sampled tag, then one uniform for the outcome row
        target = gc.random() * Wf
        if target >= Wf:
            target = Wf - 0.5
        s = _descend(coarse, nblocks_cap, w, target)
        u = gk.random()
        k = row_start[s]
        end = row_start[s + 1]
        while k < end - 1 and u >= out_cum[k]:
            k += 1
        c = out_c[k]
        a0 = inn_start[k]
        a1 = inn_start[k + 1]
        dW = c + (a1 - a0)

        zj2 = np.sqrt(z2)
        for i in range(nobs):
            dxf = c * fvals[i, s]
            dsq = c * qtab[i, s]
            for a in range(a0, a1):
                v = inn_tags[a]
                dxf += fvals[i, v]
                dsq += qtab[i, v]
            dm = (dxf - centers[i] * dW) * zj2
            xf[i] += dxf
            optb[i] += dm * dm
            sq[i] += dsq
        if has_mod:
            zja = np.sqrt(za)
            dxa = c * a_tab[s]
            dqa = c * qa_tab[s]
            for a in range(a0, a1):
                v = inn_tags[a]
                dxa += a_tab[v]
                dqa += qa_tab[v]
            dma = dxa * zja
            mod_state[0] += dxa
            mod_state[1] += dqa
            mod_state[2] += dma * dma

        if c != 0:
            w[s] += c
            _coarse_add(coarse, nblocks_cap, s, c)
        for a in range(a0, a1):
            v = inn_tags[a]
            w[v] += 1
            _coarse_add(coarse, nblocks_cap, v, 1)
        W += dW
        n += 1

        if si < step_grid.shape[0] and n == step_grid[si]:
            _emit(out, rows, t, n, W, phi, phi, has_mod, lam1, lam2,
                  z2, za, mod_state, xf, sq, optb, predb, centers)
            rows += 1
            si += 1

    istate[0] = n
    istate[1] = W
    istate[3] = rows
    istate[4] = si
    istate[5] = ti
    fstate[0] = t
    fstate[1] = phi
    fstate[2] = z2
    fstate[3] = za
    return status


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------
def run_fast(engine: UrnEngine, pl: _Plan, steps: Optional[int],
             time: Optional[float], step_grid: List[int],
             times_pending: List[float], traj: Trajectory) -> None:
    centered = [tr for tr in engine.trackers if tr.kind == "centered"]
    nobs = len(centered)
    xf = np.array([tr.xf for tr in centered], float)
    sq = np.array([tr.sq for tr in centered], float)
    optb = np.array([tr.opt_bracket for tr in centered], float)
    predb = np.array([tr.pred_bracket for tr in centered], float)
    mod = engine.mod_tracker
    has_mod = mod is not None
    if has_mod:
        mod_state = np.array([mod.xf, mod.sq, mod.opt_bracket, mod.pred_bracket])
    else:
        mod_state = np.zeros(4)

    smp = engine.sampler
    istate = np.array([engine.n, smp.total, smp.n_slots, 0, 0, 0], np.int64)
    fstate = np.array([engine.t, engine.phi,
                       math.exp(-2.0 * engine.lam2 * engine.phi),
                       math.exp(-2.0 * engine.lam1 * engine.phi)])
    step_arr = np.array(step_grid, np.int64)
    time_arr = np.array(times_pending, float)
    nrows_cap = len(step_grid) + len(times_pending) + 2
    out = np.zeros((nrows_cap, 7 + 4 * nobs))
    step_mode = steps is not None
    horizon_steps = int(steps) if step_mode else 0
    horizon_time = float(time) if time is not None else 0.0
    st = engine.streams

    if pl.kind == "simon":
        while True:
            if step_mode:
                need = int(istate[2]) + (horizon_steps - int(istate[0])) + 1
            else:
                need = int(istate[2]) + max(1024, int(1.2 * (horizon_time - fstate[0]))) + 64
            _ensure_capacity(engine, need)
            status = _simon_steps(
                pl.spec.p, engine.lam1, engine.lam2, has_mod,
                smp.coarse, smp.nblocks_cap, smp.w, engine._colors_arr,
                istate, fstate, mod_state,
                xf, sq, optb, predb,
                pl.breaks, pl.nb, pl.coefs, pl.centers, pl.i2c,
                step_arr, time_arr,
                step_mode, horizon_steps, horizon_time,
                out, st.hold, st.color, st.kernel)
            if status != STATUS_CAPACITY:
                break
            _ensure_capacity(engine, 2 * len(smp.w))
    else:
        spec: TableFastSpec = pl.spec
        status = _table_steps(
            engine.lam1, engine.lam2, has_mod,
            smp.coarse, smp.nblocks_cap, smp.w,
            spec.row_start, spec.out_cum, spec.out_c, spec.inn_start,
            spec.inn_tags,
            istate, fstate, mod_state,
            xf, sq, optb, predb,
            pl.fvals, pl.qtab, pl.centers, pl.a_tab, pl.qa_tab,
            step_arr, time_arr,
            step_mode, horizon_steps, horizon_time,
            out, st.hold, st.color, st.kernel)
    assert status == STATUS_DONE

    # write state back
    engine.n = int(istate[0])
    engine.t = float(fstate[0])
    engine.phi = float(fstate[1])
    smp.total = int(istate[1])
    smp.n_slots = int(istate[2])
    smp.zero_slots = int((smp.w[: smp.n_slots] == 0).sum())
    for i, tr in enumerate(centered):
        tr.xf = float(xf[i])
        tr.sq = float(sq[i])
        tr.opt_bracket = float(optb[i])
        tr.pred_bracket = float(predb[i])
    if has_mod:
        mod.xf = float(mod_state[0])
        mod.sq = float(mod_state[1])
        mod.opt_bracket = float(mod_state[2])
        mod.pred_bracket = float(mod_state[3])
    for r in range(int(istate[3])):
        traj.append_row(out[r])


def _ensure_capacity(engine: UrnEngine, n_slots_needed: int) -> None:
    smp = engine.sampler
    if n_slots_needed <= len(smp.w):
        return
    nb = (n_slots_needed + BLOCK - 1) // BLOCK
    nb = 1 << (nb - 1).bit_length()
    old_w = smp.w
    smp.nblocks_cap = nb
    smp.w = np.zeros(nb * BLOCK, np.int32)
    smp.w[: len(old_w)] = old_w
    smp._rebuild_coarse()
    if engine._colors_arr is not None:
        arr = np.zeros(len(smp.w), np.float64)
        arr[: len(engine._colors_arr)] = engine._colors_arr
        engine._colors_arr = arr
