"""Pure-Python kernels.

Reference implementation of the inner loops; ``_ckernels.pyx`` mirrors the
arithmetic of the population kernels operation for operation so both
backends produce identical floats.  Noise is always drawn by the caller.

Storage convention shared by all kernels: the state at time index ``j``
(``t_j = j*dt``, ``0 <= j <= K``) is written to row ``j // stride`` when
``j % stride == 0``; if ``K`` is not a multiple of ``stride`` the final
state goes to the extra last row.
"""
import math

import numpy as np

EPS_V = 1e-12
PSD_SHIFT = 1e-8
NEG_INF = -math.inf


def store_row(j, K, stride):
    if j % stride == 0:
        return j // stride
    if j == K:
        return K // stride + 1
    return -1


def _means(q, r, theta, d, p, m):
    rbar = [0.0] * p
    for i in range(p):
        s = 0.0
        ri = r[i]
        for a in range(d):
            s += ri[a] * q[a]
        rbar[i] = s
    tbar = [0.0] * m
    for j in range(m):
        s = 0.0
        tj = theta[j]
        for a in range(d):
            s += tj[a] * q[a]
        tbar[j] = s
    return rbar, tbar


def _pop_update(q, r, theta, rbar, tbar, innov, jumped, dt, d, p, m, strict):
    """One Euler step with post-update jump maps, clipping and renormalisation.

    Returns ``(clipped, bad_channel)``; ``bad_channel`` is the counting
    channel index of an unprocessable jump when ``strict``, else -1.
    """
    qn = [0.0] * d
    for a in range(d):
        g = 0.0
        for i in range(p):
            g += (r[i][a] - rbar[i]) * innov[i]
        for j in range(m):
            g -= (theta[j][a] - tbar[j]) * dt
        qn[a] = q[a] + q[a] * g
    for j in range(m):
        if not jumped[j]:
            continue
        tj = theta[j]
        s = 0.0
        for a in range(d):
            s += tj[a] * qn[a]
        if s <= EPS_V or tbar[j] <= EPS_V:
            if strict:
                return False, j
            continue
        for a in range(d):
            qn[a] = tj[a] * qn[a] / s
    clipped = False
    total = 0.0
    for a in range(d):
        x = qn[a]
        if x < 0.0:
            x = 0.0
            clipped = True
        elif x > 1.0:
            x = 1.0
            clipped = True
        qn[a] = x
        total += x
    for a in range(d):
        q[a] = qn[a] / total
    return clipped, -1


def qdiag_simulate(q0, r, theta, dW, u, dt, stride, q_out, dy_out, jump_out):
    """Integrate populations under the physical measure.

    Fills ``q_out`` (stored rows), ``dy_out`` (K, p) output increments and
    ``jump_out`` (K, m) jump flags.  Returns the number of clipped steps.
    """
    d = len(q0)
    p = r.shape[0]
    m = theta.shape[0]
    K = dW.shape[0] if p else u.shape[0]
    q = [float(x) for x in q0]
    rl = r.tolist()
    tl = theta.tolist()
    dWl = dW.tolist()
    ul = u.tolist()
    q_out[0, :] = q
    clips = 0
    innov = [0.0] * p
    jumped = [False] * m
    for k in range(K):
        rbar, tbar = _means(q, rl, tl, d, p, m)
        dWk = dWl[k] if p else ()
        for i in range(p):
            dy = dWk[i] + rbar[i] * dt
            dy_out[k, i] = dy
            innov[i] = dy - rbar[i] * dt
        uk = ul[k] if m else ()
        for j in range(m):
            jumped[j] = tbar[j] > EPS_V and uk[j] < tbar[j] * dt
            jump_out[k, j] = jumped[j]
        clipped, _ = _pop_update(q, rl, tl, rbar, tbar, innov, jumped, dt, d, p, m, False)
        clips += clipped
        row = store_row(k + 1, K, stride)
        if row >= 0:
            q_out[row, :] = q
    return clips


def qdiag_filter(q0, r, theta, dy, jumps, dt, stride, q_out):
    """Integrate the filter populations from a measurement record.

    Returns ``(clips, bad_step, bad_channel)``; ``bad_step`` is -1 unless a
    recorded jump arrived while the filter intensity was zero.
    """
    d = len(q0)
    p = r.shape[0]
    m = theta.shape[0]
    K = dy.shape[0] if p else jumps.shape[0]
    q = [float(x) for x in q0]
    rl = r.tolist()
    tl = theta.tolist()
    dyl = dy.tolist()
    jl = jumps.tolist()
    q_out[0, :] = q
    clips = 0
    innov = [0.0] * p
    for k in range(K):
        rbar, tbar = _means(q, rl, tl, d, p, m)
        dyk = dyl[k] if p else ()
        for i in range(p):
            innov[i] = dyk[i] - rbar[i] * dt
        jumped = [bool(x) for x in jl[k]] if m else []
        clipped, bad = _pop_update(q, rl, tl, rbar, tbar, innov, jumped, dt, d, p, m, True)
        if bad >= 0:
            return clips, k, bad
        clips += clipped
        row = store_row(k + 1, K, stride)
        if row >= 0:
            q_out[row, :] = q
    return clips, -1, -1


def doleans_logq(logq0, r, theta, dW, jumps, dt, stride, out):
    """Log-space stochastic exponential with self-consistent left-point means."""
    d = len(logq0)
    p = r.shape[0]
    m = theta.shape[0]
    K = dW.shape[0] if p else jumps.shape[0]
    lq = [float(x) for x in logq0]
    rl = r.tolist()
    tl = theta.tolist()
    dWl = dW.tolist()
    jl = jumps.tolist()
    q = [0.0] * d
    out[0, :] = lq
    for k in range(K):
        for a in range(d):
            q[a] = math.exp(lq[a])
        rbar, tbar = _means(q, rl, tl, d, p, m)
        dWk = dWl[k] if p else ()
        jk = jl[k] if m else ()
        for a in range(d):
            if lq[a] == NEG_INF:
                continue
            inc = 0.0
            for i in range(p):
                e = rl[i][a] - rbar[i]
                inc += e * dWk[i] - 0.5 * e * e * dt
            for j in range(m):
                ta = tl[j][a]
                if jk[j]:
                    if ta == 0.0:
                        inc = NEG_INF
                        break
                    inc += math.log(ta / tbar[j])
                inc -= (ta - tbar[j]) * dt
            lq[a] += inc
        mx = NEG_INF
        for a in range(d):
            if lq[a] > mx:
                mx = lq[a]
        s = 0.0
        for a in range(d):
            if lq[a] != NEG_INF:
                s += math.exp(lq[a] - mx)
        shift = mx + math.log(s)
        for a in range(d):
            if lq[a] != NEG_INF:
                lq[a] -= shift
        row = store_row(k + 1, K, stride)
        if row >= 0:
            out[row, :] = lq
    return 0


def sme_steps(rho, H, C, CdC, n_diff, dW, u, dt, stride, k0, q_out, states_out, dy_out, jump_out):
    """Full density-matrix Euler steps ``k0 .. K-1``, modifying ``rho`` in place.

    Returns the index of the first step whose result needs eigenvalue repair
    (``rho`` then holds the unrepaired state), or ``K`` when finished.
    """
    n = C.shape[0]
    m = n - n_diff
    K = dW.shape[0] if n_diff else u.shape[0]
    d = rho.shape[0]
    for k in range(k0, K):
        rhobar = np.empty(n_diff)
        for i in range(n_diff):
            rhobar[i] = 2.0 * np.trace(C[i] @ rho).real
        v = np.array([np.trace(CdC[n_diff + j] @ rho).real for j in range(m)])
        new = -1j * (H @ rho - rho @ H)
        for i in range(n):
            Ci = C[i]
            Cd = Ci.conj().T
            new += Ci @ rho @ Cd - 0.5 * (CdC[i] @ rho + rho @ CdC[i])
        new *= dt
        for i in range(n_diff):
            dy = dW[k, i] + rhobar[i] * dt
            dy_out[k, i] = dy
            innov = dy - rhobar[i] * dt
            Cd = C[i].conj().T
            new += (C[i] @ rho + rho @ Cd - rhobar[i] * rho) * innov
        jumped = []
        for j in range(m):
            Cj = C[n_diff + j]
            new -= (Cj @ rho @ Cj.conj().T - v[j] * rho) * dt
            fired = v[j] > EPS_V and u[k, j] < v[j] * dt
            jump_out[k, j] = fired
            jumped.append(fired)
        new += rho
        for j in range(m):
            if jumped[j]:
                Cj = C[n_diff + j]
                s = np.trace(CdC[n_diff + j] @ new).real
                if s > EPS_V:
                    new = Cj @ new @ Cj.conj().T / s
        new = 0.5 * (new + new.conj().T)
        new /= np.trace(new).real
        rho[...] = new
        if np.linalg.eigvalsh(new)[0] < -PSD_SHIFT:
            return k
        row = store_row(k + 1, K, stride)
        if row >= 0:
            q_out[row, :] = np.diag(rho).real
            if states_out is not None:
                states_out[row] = rho
    return K
