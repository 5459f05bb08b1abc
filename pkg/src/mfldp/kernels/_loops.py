"""Scalar loop kernels.

Written in the numba-compatible subset of Python.  With the numba backend
they are compiled with ``njit``; with the numpy backend the SSA loops run
interpreted (they are inherently sequential) while the batch operations are
replaced by the vectorized versions in ``_vector.py``.
"""

import math

import numpy as np

from .._backend import jit

# keep in sync with expr.OP_*
_CONST, _VAR, _ADD, _SUB, _MUL, _DIV = 0, 1, 2, 3, 4, 5
_NEG, _EXP, _LOG, _MIN, _MAX, _POW = 6, 7, 8, 9, 10, 11

STATUS_OK = 0
STATUS_INFEASIBLE = 1
STATUS_NOT_CONVERGED = 2


@jit
def eval_rates(code, args, offsets, stack, mu, out):
    """Evaluate every edge program at ``mu`` into ``out``."""
    n_edges = offsets.shape[0] - 1
    for e in range(n_edges):
        sp = 0
        for pc in range(offsets[e], offsets[e + 1]):
            op = code[pc]
            if op == _CONST:
                stack[sp] = args[pc]
                sp += 1
            elif op == _VAR:
                stack[sp] = mu[int(args[pc])]
                sp += 1
            elif op == _NEG:
                stack[sp - 1] = -stack[sp - 1]
            elif op == _EXP:
                stack[sp - 1] = math.exp(stack[sp - 1])
            elif op == _LOG:
                x = stack[sp - 1]
                stack[sp - 1] = math.log(x) if x > 0.0 else np.nan
            elif op == _POW:
                stack[sp - 1] = stack[sp - 1] ** args[pc]
            else:
                b = stack[sp - 1]
                a = stack[sp - 2]
                sp -= 1
                if op == _ADD:
                    stack[sp - 1] = a + b
                elif op == _SUB:
                    stack[sp - 1] = a - b
                elif op == _MUL:
                    stack[sp - 1] = a * b
                elif op == _DIV:
                    stack[sp - 1] = a / b
                elif op == _MIN:
                    stack[sp - 1] = a if a < b else b
                else:
                    stack[sp - 1] = a if a > b else b
        out[e] = stack[0]


@jit
def rates_batch(code, args, offsets, max_stack, mus):
    n = mus.shape[0]
    n_edges = offsets.shape[0] - 1
    out = np.empty((n, n_edges))
    stack = np.empty(max_stack + 1)
    row = np.empty(n_edges)
    for k in range(n):
        eval_rates(code, args, offsets, stack, mus[k], row)
        for e in range(n_edges):
            out[k, e] = row[e]
    return out


@jit
def _drift(code, args, offsets, stack, src, dst, mu, lam, out):
    eval_rates(code, args, offsets, stack, mu, lam)
    for k in range(out.shape[0]):
        out[k] = 0.0
    for e in range(src.shape[0]):
        f = mu[src[e]] * lam[e]
        out[src[e]] -= f
        out[dst[e]] += f


@jit
def drift_batch(code, args, offsets, max_stack, src, dst, mus):
    n, r = mus.shape
    out = np.empty((n, r))
    stack = np.empty(max_stack + 1)
    lam = np.empty(src.shape[0])
    row = np.empty(r)
    for k in range(n):
        _drift(code, args, offsets, stack, src, dst, mus[k], lam, row)
        for i in range(r):
            out[k, i] = row[i]
    return out


@jit
def _rk4_step(code, args, offsets, stack, src, dst, mu, h, lam, k1, k2, k3, k4, tmp, out):
    r = mu.shape[0]
    _drift(code, args, offsets, stack, src, dst, mu, lam, k1)
    for i in range(r):
        tmp[i] = mu[i] + 0.5 * h * k1[i]
    _drift(code, args, offsets, stack, src, dst, tmp, lam, k2)
    for i in range(r):
        tmp[i] = mu[i] + 0.5 * h * k2[i]
    _drift(code, args, offsets, stack, src, dst, tmp, lam, k3)
    for i in range(r):
        tmp[i] = mu[i] + h * k3[i]
    _drift(code, args, offsets, stack, src, dst, tmp, lam, k4)
    for i in range(r):
        out[i] = mu[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0


@jit
def _clip_renorm(x):
    clip = 0.0
    s = 0.0
    for i in range(x.shape[0]):
        if x[i] < 0.0:
            if -x[i] > clip:
                clip = -x[i]
            x[i] = 0.0
        s += x[i]
    for i in range(x.shape[0]):
        x[i] /= s
    return clip


@jit
def rk4_path(code, args, offsets, max_stack, src, dst, mu0, dt, n_steps, clip_tol, max_halvings, record):
    """Fixed-step RK4 with clip/renormalize; a step whose clip exceeds
    ``clip_tol`` is redone as 2, 4, ... substeps.

    Returns (path, max_clip, max_halvings_used, ok).  ``path`` has one row per
    knot when ``record`` else only the final state.
    """
    r = mu0.shape[0]
    n_rows = n_steps + 1 if record else 1
    path = np.empty((n_rows, r))
    stack = np.empty(max_stack + 1)
    lam = np.empty(src.shape[0])
    k1 = np.empty(r)
    k2 = np.empty(r)
    k3 = np.empty(r)
    k4 = np.empty(r)
    tmp = np.empty(r)
    cur = mu0.copy()
    trial = np.empty(r)
    sub = np.empty(r)
    if record:
        path[0] = cur
    max_clip = 0.0
    worst = 0
    ok = True
    for step in range(n_steps):
        accepted = False
        for halv in range(max_halvings + 1):
            n_sub = 1 << halv
            h = dt / n_sub
            sub[:] = cur
            step_clip = 0.0
            for _ in range(n_sub):
                _rk4_step(code, args, offsets, stack, src, dst, sub, h, lam, k1, k2, k3, k4, tmp, trial)
                c = _clip_renorm(trial)
                if c > step_clip:
                    step_clip = c
                sub[:] = trial
            if step_clip <= clip_tol or halv == max_halvings:
                if step_clip > clip_tol:
                    ok = False
                if step_clip > max_clip:
                    max_clip = step_clip
                if halv > worst:
                    worst = halv
                accepted = True
                break
        if not accepted:
            ok = False
        cur[:] = sub
        if record:
            path[step + 1] = cur
    if not record:
        path[0] = cur
    return path, max_clip, worst, ok


@jit
def rk4_endpoints(code, args, offsets, max_stack, src, dst, starts, dt, n_steps, clip_tol, max_halvings):
    n, r = starts.shape
    out = np.empty((n, r))
    for k in range(n):
        p, _, _, _ = rk4_path(code, args, offsets, max_stack, src, dst, starts[k], dt, n_steps, clip_tol,
                              max_halvings, False)
        out[k] = p[0]
    return out


# ---------------------------------------------------------------------------
# Gillespie on the lumped occupation chain


@jit
def _pick_edge(rates, target):
    acc = 0.0
    last = -1
    for e in range(rates.shape[0]):
        if rates[e] > 0.0:
            acc += rates[e]
            last = e
            if acc > target:
                return e
    return last


@jit
def ssa_run(code, args, offsets, max_stack, src, dst, counts, N, t, t_end, uniforms, u_pos,
            rec_times, rec_edges, n_rec):
    """Advance until ``t_end``, the uniform buffer or the record buffer runs out.

    Returns (t, u_pos, n_rec, status) with status 0 = horizon reached,
    1 = need more uniforms or record space, 2 = zero total rate.
    """
    n_edges = src.shape[0]
    lam = np.empty(n_edges)
    rates = np.empty(n_edges)
    stack = np.empty(max_stack + 1)
    mu = np.empty(counts.shape[0])
    n_u = uniforms.shape[0]
    cap = rec_times.shape[0]
    while True:
        if u_pos + 2 > n_u or n_rec >= cap:
            return t, u_pos, n_rec, 1
        for i in range(counts.shape[0]):
            mu[i] = counts[i] / N
        eval_rates(code, args, offsets, stack, mu, lam)
        total = 0.0
        for e in range(n_edges):
            rates[e] = counts[src[e]] * lam[e]
            total += rates[e]
        if not total > 0.0:
            return t, u_pos, n_rec, 2
        hold = -math.log(1.0 - uniforms[u_pos]) / total
        target = uniforms[u_pos + 1] * total
        u_pos += 2
        if t + hold >= t_end:
            return t_end, u_pos, n_rec, 0
        t += hold
        e = _pick_edge(rates, target)
        counts[src[e]] -= 1
        counts[dst[e]] += 1
        rec_times[n_rec] = t
        rec_edges[n_rec] = e
        n_rec += 1


@jit
def _cell_index(counts, N, resolution, strides):
    idx = 0
    for k in range(1, counts.shape[0]):
        if resolution == N:
            c = counts[k]
        else:
            c = int(math.floor(counts[k] * resolution / N + 0.5))
        idx += c * strides[k]
    return idx


@jit
def ssa_occupation(code, args, offsets, max_stack, src, dst, counts, N, t, t_end, uniforms, u_pos,
                   resolution, strides, hist, visits):
    """Like ``ssa_run`` but accumulates occupation time per cell instead of
    recording events.  ``hist``/``visits`` are flat arrays indexed by
    ``_cell_index``.  Returns (t, u_pos, n_events, status).
    """
    n_edges = src.shape[0]
    lam = np.empty(n_edges)
    rates = np.empty(n_edges)
    stack = np.empty(max_stack + 1)
    mu = np.empty(counts.shape[0])
    n_u = uniforms.shape[0]
    n_events = 0
    cell = _cell_index(counts, N, resolution, strides)
    while True:
        if u_pos + 2 > n_u:
            return t, u_pos, n_events, 1
        for i in range(counts.shape[0]):
            mu[i] = counts[i] / N
        eval_rates(code, args, offsets, stack, mu, lam)
        total = 0.0
        for e in range(n_edges):
            rates[e] = counts[src[e]] * lam[e]
            total += rates[e]
        if not total > 0.0:
            return t, u_pos, n_events, 2
        hold = -math.log(1.0 - uniforms[u_pos]) / total
        target = uniforms[u_pos + 1] * total
        u_pos += 2
        if t + hold >= t_end:
            hist[cell] += t_end - t
            return t_end, u_pos, n_events, 0
        hist[cell] += hold
        t += hold
        e = _pick_edge(rates, target)
        counts[src[e]] -= 1
        counts[dst[e]] += 1
        n_events += 1
        new_cell = _cell_index(counts, N, resolution, strides)
        if new_cell != cell:
            visits[new_cell] += 1
            cell = new_cell


# ---------------------------------------------------------------------------
# per-time-slice dual problem


# Newton decrement below which line-search comparisons are meaningless
NEWTON_FULL_STEP = 1e-8


@jit
def _slice_value(theta, phi, w, src, dst):
    val = 0.0
    for k in range(theta.shape[0]):
        val += theta[k] * phi[k]
    for e in range(src.shape[0]):
        d = phi[dst[e]] - phi[src[e]]
        val -= w[e] * (math.expm1(d) - d)
    return val


@jit
def _cholesky_solve(a, b, n):
    # in place on a (n x n, SPD); returns False if not positive definite
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if not s > 0.0:
            return False
        a[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / a[j, j]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= a[i, k] * b[k]
        b[i] = s / a[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= a[k, i] * b[k]
        b[i] = s / a[i, i]
    return True


@jit
def slice_solve(theta, w, src, dst, cap, tol, max_iter, phi):
    """Maximize sum(theta*phi) - sum_e w_e tau(phi_dst - phi_src), phi[0] = 0.

    ``phi`` is the warm start and is overwritten.  Returns
    (dual value, primal value, residual, iterations, status).
    """
    r = theta.shape[0]
    n = r - 1
    phi[0] = 0.0
    grad = np.empty(r)
    hess = np.empty((n, n))
    step = np.empty(n)
    trial = np.empty(r)
    scale = 1.0
    for k in range(r):
        if abs(theta[k]) > scale:
            scale = abs(theta[k])
    for e in range(src.shape[0]):
        if w[e] > scale:
            scale = w[e]
    value = _slice_value(theta, phi, w, src, dst)
    status = STATUS_NOT_CONVERGED
    it = 0
    res = np.inf
    while it < max_iter:
        for k in range(r):
            grad[k] = theta[k]
        for i in range(n):
            for j in range(n):
                hess[i, j] = 0.0
        for e in range(src.shape[0]):
            s = src[e]
            d = dst[e]
            delta = phi[d] - phi[s]
            g = w[e] * math.expm1(delta)
            h = w[e] * math.exp(delta)
            grad[d] -= g
            grad[s] += g
            # negated Hessian of the objective, gauge coordinate 0 dropped
            if s > 0:
                hess[s - 1, s - 1] += h
            if d > 0:
                hess[d - 1, d - 1] += h
            if s > 0 and d > 0:
                hess[s - 1, d - 1] -= h
                hess[d - 1, s - 1] -= h
        res = 0.0
        for k in range(r):
            if abs(grad[k]) > res:
                res = abs(grad[k])
        if res <= tol * scale:
            status = STATUS_OK
            break
        for i in range(n):
            step[i] = grad[i + 1]
        if not _cholesky_solve(hess, step, n):
            # degenerate curvature: fall back to a gradient step
            for i in range(n):
                step[i] = grad[i + 1]
        slope = 0.0
        for i in range(n):
            slope += step[i] * grad[i + 1]
        t_step = 1.0
        accepted = False
        # tiny Newton decrement: the gain is below rounding in the value, take the full step
        if slope <= NEWTON_FULL_STEP * (1.0 + abs(value)):
            for i in range(n):
                trial[i + 1] = phi[i + 1] + step[i]
            tv = _slice_value(theta, trial, w, src, dst)
            accepted = True
        for _ in range(0 if accepted else 60):
            trial[0] = 0.0
            for i in range(n):
                trial[i + 1] = phi[i + 1] + t_step * step[i]
            tv = _slice_value(theta, trial, w, src, dst)
            if tv >= value + 1e-4 * t_step * slope or (tv >= value and t_step < 1e-12):
                accepted = True
                break
            t_step *= 0.5
        if not accepted:
            break
        big = 0.0
        for i in range(r):
            phi[i] = trial[i]
            if abs(phi[i]) > big:
                big = abs(phi[i])
        value = tv
        it += 1
        if big > cap:
            status = STATUS_INFEASIBLE
            break
    primal = 0.0
    for e in range(src.shape[0]):
        d = phi[dst[e]] - phi[src[e]]
        # w * tau*(e^d - 1) = w * (d e^d - e^d + 1)
        primal += w[e] * (d * math.exp(d) - math.expm1(d))
    return value, primal, res, it, status


@jit
def slice_solve_batch(thetas, ws, src, dst, cap, tol, max_iter, phis):
    n, r = thetas.shape
    dual = np.empty(n)
    primal = np.empty(n)
    resid = np.empty(n)
    iters = np.empty(n, dtype=np.int64)
    status = np.empty(n, dtype=np.int64)
    phi = np.empty(r)
    for k in range(n):
        phi[:] = phis[k]
        dual[k], primal[k], resid[k], iters[k], status[k] = slice_solve(
            thetas[k], ws[k], src, dst, cap, tol, max_iter, phi)
        phis[k] = phi
    return dual, primal, resid, iters, status
