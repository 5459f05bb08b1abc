"""Pure-numpy batch kernels, selected with ``MFLDP_BACKEND=numpy``.

Same signatures and results (to rounding) as the compiled loop kernels.
"""

import numpy as np

from ..expr import eval_postfix_batch
from ._loops import NEWTON_FULL_STEP, STATUS_INFEASIBLE, STATUS_NOT_CONVERGED, STATUS_OK


def rates_batch(code, args, offsets, max_stack, mus):
    mus = np.atleast_2d(mus)
    out = np.empty((mus.shape[0], offsets.shape[0] - 1))
    for e in range(out.shape[1]):
        lo, hi = offsets[e], offsets[e + 1]
        out[:, e] = eval_postfix_batch(code[lo:hi], args[lo:hi], mus)
    return out


def drift_batch(code, args, offsets, max_stack, src, dst, mus):
    mus = np.atleast_2d(mus)
    lam = rates_batch(code, args, offsets, max_stack, mus)
    flux = mus[:, src] * lam
    out = np.zeros_like(mus)
    np.add.at(out.T, dst, flux.T)
    np.subtract.at(out.T, src, flux.T)
    return out


def _rk4_batch_step(prog, mus, h):
    f = lambda x: drift_batch(*prog, x)  # noqa: E731
    k1 = f(mus)
    k2 = f(mus + 0.5 * h[:, None] * k1)
    k3 = f(mus + 0.5 * h[:, None] * k2)
    k4 = f(mus + h[:, None] * k3)
    return mus + h[:, None] * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


def _clip_renorm(x):
    clip = np.maximum(-x.min(axis=1), 0.0)
    x = np.maximum(x, 0.0)
    return x / x.sum(axis=1, keepdims=True), clip


def _rk4_batch(prog, mus, dt, n_steps, clip_tol, max_halvings, record):
    n = mus.shape[0]
    cur = mus.copy()
    path = [cur.copy()] if record else None
    max_clip = 0.0
    worst = 0
    ok = True
    for _ in range(n_steps):
        trial, clip = _clip_renorm(_rk4_batch_step(prog, cur, np.full(n, dt)))
        bad = clip > clip_tol
        if bad.any():
            # redo offending rows with 2, 4, ... substeps
            for halv in range(1, max_halvings + 1):
                idx = np.flatnonzero(bad)
                n_sub = 1 << halv
                sub = cur[idx]
                sub_clip = np.zeros(idx.size)
                for _ in range(n_sub):
                    sub, c = _clip_renorm(_rk4_batch_step(prog, sub, np.full(idx.size, dt / n_sub)))
                    sub_clip = np.maximum(sub_clip, c)
                trial[idx] = sub
                clip[idx] = sub_clip
                worst = max(worst, halv)
                bad = np.zeros(n, dtype=bool)
                bad[idx] = sub_clip > clip_tol
                if not bad.any():
                    break
            if bad.any():
                ok = False
        max_clip = max(max_clip, float(clip.max()))
        cur = trial
        if record:
            path.append(cur.copy())
    return (np.stack(path, axis=1) if record else cur), max_clip, worst, ok


def rk4_path(code, args, offsets, max_stack, src, dst, mu0, dt, n_steps, clip_tol, max_halvings, record):
    prog = (code, args, offsets, max_stack, src, dst)
    out, max_clip, worst, ok = _rk4_batch(prog, mu0[None, :], dt, n_steps, clip_tol, max_halvings, record)
    path = out[0] if record else out
    return path, max_clip, worst, ok


def rk4_endpoints(code, args, offsets, max_stack, src, dst, starts, dt, n_steps, clip_tol, max_halvings):
    prog = (code, args, offsets, max_stack, src, dst)
    out, _, _, _ = _rk4_batch(prog, starts, dt, n_steps, clip_tol, max_halvings, False)
    return out


def _incidence(src, dst, r):
    inc = np.zeros((src.shape[0], r))
    inc[np.arange(src.shape[0]), dst] += 1.0
    inc[np.arange(src.shape[0]), src] -= 1.0
    return inc


def _values(thetas, phis, ws, inc):
    delta = phis @ inc.T
    return np.einsum("nk,nk->n", thetas, phis) - np.sum(ws * (np.expm1(delta) - delta), axis=1)


def slice_solve_batch(thetas, ws, src, dst, cap, tol, max_iter, phis):
    n, r = thetas.shape
    inc = _incidence(src, dst, r)
    phis[:, 0] = 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(thetas).max(axis=1), ws.max(axis=1, initial=0.0)))
    status = np.full(n, STATUS_NOT_CONVERGED, dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    resid = np.full(n, np.inf)
    value = _values(thetas, phis, ws, inc)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        th, ph, w = thetas[idx], phis[idx], ws[idx]
        delta = ph @ inc.T
        grad = th - (w * np.expm1(delta)) @ inc
        res = np.abs(grad).max(axis=1)
        resid[idx] = res
        done = res <= tol * scale[idx]
        status[idx[done]] = STATUS_OK
        out_of_iters = iters[idx] >= max_iter
        active[idx[done | out_of_iters]] = False
        keep = ~(done | out_of_iters)
        idx, th, ph, w, grad, delta = idx[keep], th[keep], ph[keep], w[keep], grad[keep], delta[keep]
        if idx.size == 0:
            break
        h = w * np.exp(delta)
        hess = np.einsum("ne,ei,ej->nij", h, inc, inc)[:, 1:, 1:]
        g = grad[:, 1:]
        try:
            step = np.linalg.solve(hess, g[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.empty_like(g)
            for k in range(idx.size):
                try:
                    step[k] = np.linalg.solve(hess[k], g[k])
                except np.linalg.LinAlgError:
                    step[k] = g[k]
        bad = ~np.isfinite(step).all(axis=1)
        step[bad] = g[bad]
        slope = np.einsum("ni,ni->n", step, g)
        t_step = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        new_ph = ph.copy()
        new_val = value[idx].copy()
        full = slope <= NEWTON_FULL_STEP * (1.0 + np.abs(value[idx]))
        if full.any():
            f = np.flatnonzero(full)
            new_ph[f, 1:] += step[f]
            new_val[f] = _values(th[f], new_ph[f], w[f], inc)
            pending[f] = False
        for _ in range(60):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            trial = ph[p].copy()
            trial[:, 1:] += t_step[p, None] * step[p]
            tv = _values(th[p], trial, w[p], inc)
            ok = (tv >= value[idx[p]] + 1e-4 * t_step[p] * slope[p]) | ((tv >= value[idx[p]]) & (t_step[p] < 1e-12))
            new_ph[p[ok]] = trial[ok]
            new_val[p[ok]] = tv[ok]
            pending[p[ok]] = False
            t_step[p[~ok]] *= 0.5
        stalled = pending
        active[idx[stalled]] = False
        moved = ~stalled
        phis[idx[moved]] = new_ph[moved]
        value[idx[moved]] = new_val[moved]
        iters[idx[moved]] += 1
        blown = moved & (np.abs(new_ph).max(axis=1) > cap)
        status[idx[blown]] = STATUS_INFEASIBLE
        active[idx[blown]] = False
    delta = phis @ inc.T
    primal = np.sum(ws * (delta * np.exp(delta) - np.expm1(delta)), axis=1)
    return value, primal, resid, iters, status


# the SSA loops have no vectorized form; the interpreted loop versions are used
from ._loops import ssa_occupation, ssa_run  # noqa: E402,F401
