"""Compiled fixed-step integration kernels.

Everything here is allocation-light scalar code so numba can compile it; the
public modules wrap these kernels with array handling and validation. When
numba is unavailable the identity decorator keeps the module importable and
the kernels run as plain (slow) Python.

State layout for the closed loop: Y = [xi (n*p), accum (p), phi (1),
theta_hat (m)]. The controller is evaluated inside every RK4 stage so the
coupled plant + controller system is integrated as one smooth ODE.
"""

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn
        return deco

STATUS_OK = 0
STATUS_DIVERGED = 1

_DIVERGENCE_LIMIT = 1e12


@njit(cache=True)
def _regressor_fill(F, xi, term_row, term_col, term_coef, term_exp,
                    special_kind, special_cols, special_w, special_a,
                    n, p):
    F[:, :] = 0.0
    nt = term_row.shape[0]
    d = xi.shape[0]
    for it in range(nt):
        v = term_coef[it]
        for j in range(d):
            e = term_exp[it, j]
            if e == 1:
                v *= xi[j]
            elif e > 1:
                v *= xi[j] ** e
        F[term_row[it], term_col[it]] += v
    if special_kind == 1:
        off = (n - 1) * p
        s = 0.0
        for i in range(p):
            s += special_w[i] * xi[off + i]
        q = s / math.sqrt(special_a * special_a + s * s)
        for r in range(p):
            F[r, special_cols[0]] += special_w[r] * s
            F[r, special_cols[1]] += special_w[r] * q


@njit(cache=True)
def _jacobian_top_fill(Jtop, xi, theta, term_row, term_col, term_coef,
                       term_exp, special_kind, special_cols, special_w,
                       special_a, n, p):
    """d(F(xi) theta)/d(xi), the top p rows of the plant Jacobian."""
    Jtop[:, :] = 0.0
    nt = term_row.shape[0]
    d = xi.shape[0]
    for it in range(nt):
        th = theta[term_col[it]]
        for j in range(d):
            e = term_exp[it, j]
            if e == 0:
                continue
            v = th * term_coef[it] * e
            if e > 1:
                v *= xi[j] ** (e - 1)
            for l in range(d):
                if l != j:
                    el = term_exp[it, l]
                    if el == 1:
                        v *= xi[l]
                    elif el > 1:
                        v *= xi[l] ** el
            Jtop[term_row[it], j] += v
    if special_kind == 1:
        off = (n - 1) * p
        s = 0.0
        for i in range(p):
            s += special_w[i] * xi[off + i]
        a2 = special_a * special_a
        qp = a2 / (a2 + s * s) ** 1.5
        coef = theta[special_cols[0]] + theta[special_cols[1]] * qp
        for r in range(p):
            for i in range(p):
                Jtop[r, off + i] += coef * special_w[r] * special_w[i]


@njit(cache=True)
def _reference_stack(stack, t, ra0, rcos, rsin, romega, n):
    """Derivatives 0..n-1 of the reference position channels at time t.

    stack[d, i] = d-th derivative of channel i. Harmonic angles use the
    cos/sin addition recurrence, so only two trig calls per evaluation.
    """
    p = ra0.shape[0]
    H = rcos.shape[1]
    for i in range(p):
        stack[0, i] = ra0[i]
        for dd in range(1, n):
            stack[dd, i] = 0.0
    c1 = math.cos(romega * t)
    s1 = math.sin(romega * t)
    ck = c1
    sk = s1
    for k in range(1, H + 1):
        kw = k * romega
        for i in range(p):
            ad = rcos[i, k - 1]
            bd = rsin[i, k - 1]
            for dd in range(n):
                stack[dd, i] += ad * ck + bd * sk
                tmp = kw * bd
                bd = -kw * ad
                ad = tmp
        cn = ck * c1 - sk * s1
        sn = sk * c1 + ck * s1
        ck = cn
        sk = sn


@njit(cache=True)
def _closed_loop_rhs(t, Y, dY, n, p, m,
                     term_row, term_col, term_coef, term_exp,
                     special_kind, special_cols, special_w, special_a,
                     theta_true, mask,
                     exc_amp, exc_om, exc_ph,
                     ra0, rcos, rsin, romega, xr_top0,
                     k_gain, kappa, eps, gamma, S, lam,
                     F, Fr, rstack, xi_r, work_m,
                     out_u, out_eta, out_y, out_zt, out_sig):
    npp = n * p
    xi = Y[:npp]
    accum = Y[npp:npp + p]
    phi = Y[npp + p]
    theta_hat = Y[npp + p + 1:]

    _reference_stack(rstack, t, ra0, rcos, rsin, romega, n)
    for j in range(n):
        for i in range(p):
            xi_r[j * p + i] = rstack[n - 1 - j, i]

    for i in range(p):
        out_sig[i] = exc_amp[i] * math.cos(exc_om * t + exc_ph[i])

    _regressor_fill(F, xi, term_row, term_col, term_coef, term_exp,
                    special_kind, special_cols, special_w, special_a, n, p)
    _regressor_fill(Fr, xi_r, term_row, term_col, term_coef, term_exp,
                    special_kind, special_cols, special_w, special_a, n, p)

    # g from the masked (controller-side) regressor difference
    gval = 0.0
    for i in range(p):
        acc = 0.0
        for c in range(m):
            acc += (F[i, c] - Fr[i, c]) * mask[c] * theta_hat[c]
        gval += acc * acc
    gval = math.sqrt(gval) + kappa

    ysq = 0.0
    for i in range(p):
        # y = e^(n-1) + sum_d lam_d e^(d-1); eta collects -lam_d e^(d)
        yv = xi[i] - rstack[n - 1, i]
        etav = 0.0
        for d in range(1, n):
            e_dm1 = xi[(n - d) * p + i] - rstack[d - 1, i]
            e_d = xi[(n - 1 - d) * p + i] - rstack[d, i]
            yv += lam[d - 1] * e_dm1
            etav -= lam[d - 1] * e_d
        sat = yv / eps
        if sat > 1.0:
            sat = 1.0
        elif sat < -1.0:
            sat = -1.0
        etav -= phi * yv + gval * sat
        ztv = xi[i] - accum[i] - xr_top0[i]
        out_y[i] = yv
        out_eta[i] = etav
        out_zt[i] = ztv
        out_u[i] = -k_gain * ztv + etav
        ysq += yv * yv

    # plant block
    for i in range(p):
        acc = out_sig[i] + out_u[i]
        for c in range(m):
            acc += F[i, c] * theta_true[c]
        dY[i] = acc
    for j in range(p, npp):
        dY[j] = xi[j - p]

    # controller blocks
    for i in range(p):
        acc = out_sig[i] + out_eta[i]
        for c in range(m):
            acc += F[i, c] * mask[c] * theta_hat[c]
        dY[npp + i] = acc
    dY[npp + p] = gamma * ysq
    for c in range(m):
        w = 0.0
        for i in range(p):
            w += F[i, c] * out_zt[i]
        work_m[c] = mask[c] * w
    for c in range(m):
        acc = 0.0
        for c2 in range(m):
            acc += S[c, c2] * work_m[c2]
        dY[npp + p + 1 + c] = acc


@njit(cache=True)
def integrate_closed_loop(Y0, t0, dt, n_steps, store_every,
                          n, p, m,
                          term_row, term_col, term_coef, term_exp,
                          special_kind, special_cols, special_w, special_a,
                          theta_true, mask,
                          exc_amp, exc_om, exc_ph,
                          ra0, rcos, rsin, romega, xr_top0,
                          k_gain, kappa, eps, gamma, S, lam):
    """Fixed-step RK4 over the coupled plant + controller system.

    Logs state and controller outputs every ``store_every`` steps plus the
    final step. Returns (t, Y, u, eta, y, z_tilde, sigma, n_logged, status,
    t_fail).
    """
    dim = Y0.shape[0]
    npp = n * p
    n_log = n_steps // store_every + 1
    if n_steps % store_every != 0:
        n_log += 1
    t_log = np.empty(n_log)
    Y_log = np.empty((n_log, dim))
    u_log = np.empty((n_log, p))
    eta_log = np.empty((n_log, p))
    y_log = np.empty((n_log, p))
    zt_log = np.empty((n_log, p))
    sig_log = np.empty((n_log, p))

    Y = Y0.copy()
    dY1 = np.empty(dim)
    dY2 = np.empty(dim)
    dY3 = np.empty(dim)
    dY4 = np.empty(dim)
    Yw = np.empty(dim)
    F = np.empty((p, m))
    Fr = np.empty((p, m))
    rstack = np.empty((n, p))
    xi_r = np.empty(npp)
    work_m = np.empty(m)
    out_u = np.empty(p)
    out_eta = np.empty(p)
    out_y = np.empty(p)
    out_zt = np.empty(p)
    out_sig = np.empty(p)

    ptr = 0
    status = STATUS_OK
    t_fail = 0.0
    t = t0
    for step in range(n_steps + 1):
        # k1 stage doubles as the logging evaluation
        _closed_loop_rhs(t, Y, dY1, n, p, m,
                         term_row, term_col, term_coef, term_exp,
                         special_kind, special_cols, special_w, special_a,
                         theta_true, mask, exc_amp, exc_om, exc_ph,
                         ra0, rcos, rsin, romega, xr_top0,
                         k_gain, kappa, eps, gamma, S, lam,
                         F, Fr, rstack, xi_r, work_m,
                         out_u, out_eta, out_y, out_zt, out_sig)
        if step % store_every == 0 or step == n_steps:
            t_log[ptr] = t
            for j in range(dim):
                Y_log[ptr, j] = Y[j]
            for i in range(p):
                u_log[ptr, i] = out_u[i]
                eta_log[ptr, i] = out_eta[i]
                y_log[ptr, i] = out_y[i]
                zt_log[ptr, i] = out_zt[i]
                sig_log[ptr, i] = out_sig[i]
            ptr += 1
        if step == n_steps:
            break

        half = 0.5 * dt
        for j in range(dim):
            Yw[j] = Y[j] + half * dY1[j]
        _closed_loop_rhs(t + half, Yw, dY2, n, p, m,
                         term_row, term_col, term_coef, term_exp,
                         special_kind, special_cols, special_w, special_a,
                         theta_true, mask, exc_amp, exc_om, exc_ph,
                         ra0, rcos, rsin, romega, xr_top0,
                         k_gain, kappa, eps, gamma, S, lam,
                         F, Fr, rstack, xi_r, work_m,
                         out_u, out_eta, out_y, out_zt, out_sig)
        for j in range(dim):
            Yw[j] = Y[j] + half * dY2[j]
        _closed_loop_rhs(t + half, Yw, dY3, n, p, m,
                         term_row, term_col, term_coef, term_exp,
                         special_kind, special_cols, special_w, special_a,
                         theta_true, mask, exc_amp, exc_om, exc_ph,
                         ra0, rcos, rsin, romega, xr_top0,
                         k_gain, kappa, eps, gamma, S, lam,
                         F, Fr, rstack, xi_r, work_m,
                         out_u, out_eta, out_y, out_zt, out_sig)
        for j in range(dim):
            Yw[j] = Y[j] + dt * dY3[j]
        _closed_loop_rhs(t + dt, Yw, dY4, n, p, m,
                         term_row, term_col, term_coef, term_exp,
                         special_kind, special_cols, special_w, special_a,
                         theta_true, mask, exc_amp, exc_om, exc_ph,
                         ra0, rcos, rsin, romega, xr_top0,
                         k_gain, kappa, eps, gamma, S, lam,
                         F, Fr, rstack, xi_r, work_m,
                         out_u, out_eta, out_y, out_zt, out_sig)
        sixth = dt / 6.0
        for j in range(dim):
            Y[j] += sixth * (dY1[j] + 2.0 * dY2[j] + 2.0 * dY3[j] + dY4[j])
        t = t0 + (step + 1) * dt

        ok = True
        for j in range(npp):
            v = Y[j]
            if not (v == v) or v > _DIVERGENCE_LIMIT or v < -_DIVERGENCE_LIMIT:
                ok = False
        if not ok:
            status = STATUS_DIVERGED
            t_fail = t
            break

    return (t_log[:ptr], Y_log[:ptr], u_log[:ptr], eta_log[:ptr],
            y_log[:ptr], zt_log[:ptr], sig_log[:ptr], ptr, status, t_fail)


@njit(cache=True)
def _open_loop_rhs(t, xi, dxi, n, p, m,
                   term_row, term_col, term_coef, term_exp,
                   special_kind, special_cols, special_w, special_a,
                   theta_true, exc_amp, exc_om, exc_ph, F):
    npp = n * p
    _regressor_fill(F, xi, term_row, term_col, term_coef, term_exp,
                    special_kind, special_cols, special_w, special_a, n, p)
    for i in range(p):
        acc = exc_amp[i] * math.cos(exc_om * t + exc_ph[i])
        for c in range(m):
            acc += F[i, c] * theta_true[c]
        dxi[i] = acc
    for j in range(p, npp):
        dxi[j] = xi[j - p]


@njit(cache=True)
def integrate_open_loop(xi0, t0, dt, n_steps, store_every,
                        n, p, m,
                        term_row, term_col, term_coef, term_exp,
                        special_kind, special_cols, special_w, special_a,
                        theta_true, exc_amp, exc_om, exc_ph):
    """Fixed-step RK4 of the uncontrolled plant under its excitation."""
    npp = n * p
    n_log = n_steps // store_every + 1
    if n_steps % store_every != 0:
        n_log += 1
    t_log = np.empty(n_log)
    xi_log = np.empty((n_log, npp))
    sig_log = np.empty((n_log, p))

    xi = xi0.copy()
    k1 = np.empty(npp)
    k2 = np.empty(npp)
    k3 = np.empty(npp)
    k4 = np.empty(npp)
    w = np.empty(npp)
    F = np.empty((p, m))

    ptr = 0
    status = STATUS_OK
    t_fail = 0.0
    t = t0
    for step in range(n_steps + 1):
        if step % store_every == 0 or step == n_steps:
            t_log[ptr] = t
            for j in range(npp):
                xi_log[ptr, j] = xi[j]
            for i in range(p):
                sig_log[ptr, i] = exc_amp[i] * math.cos(exc_om * t + exc_ph[i])
            ptr += 1
        if step == n_steps:
            break
        half = 0.5 * dt
        _open_loop_rhs(t, xi, k1, n, p, m, term_row, term_col, term_coef,
                       term_exp, special_kind, special_cols, special_w,
                       special_a, theta_true, exc_amp, exc_om, exc_ph, F)
        for j in range(npp):
            w[j] = xi[j] + half * k1[j]
        _open_loop_rhs(t + half, w, k2, n, p, m, term_row, term_col,
                       term_coef, term_exp, special_kind, special_cols,
                       special_w, special_a, theta_true, exc_amp, exc_om,
                       exc_ph, F)
        for j in range(npp):
            w[j] = xi[j] + half * k2[j]
        _open_loop_rhs(t + half, w, k3, n, p, m, term_row, term_col,
                       term_coef, term_exp, special_kind, special_cols,
                       special_w, special_a, theta_true, exc_amp, exc_om,
                       exc_ph, F)
        for j in range(npp):
            w[j] = xi[j] + dt * k3[j]
        _open_loop_rhs(t + dt, w, k4, n, p, m, term_row, term_col,
                       term_coef, term_exp, special_kind, special_cols,
                       special_w, special_a, theta_true, exc_amp, exc_om,
                       exc_ph, F)
        sixth = dt / 6.0
        for j in range(npp):
            xi[j] += sixth * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        t = t0 + (step + 1) * dt
        ok = True
        for j in range(npp):
            v = xi[j]
            if not (v == v) or v > _DIVERGENCE_LIMIT or v < -_DIVERGENCE_LIMIT:
                ok = False
        if not ok:
            status = STATUS_DIVERGED
            t_fail = t
            break

    return t_log[:ptr], xi_log[:ptr], sig_log[:ptr], ptr, status, t_fail


@njit(cache=True)
def _variational_rhs(t, xi, M, dxi, dM, Jtop, F, n, p, m,
                     term_row, term_col, term_coef, term_exp,
                     special_kind, special_cols, special_w, special_a,
                     theta_true, exc_amp, exc_om, exc_ph):
    npp = n * p
    _open_loop_rhs(t, xi, dxi, n, p, m, term_row, term_col, term_coef,
                   term_exp, special_kind, special_cols, special_w,
                   special_a, theta_true, exc_amp, exc_om, exc_ph, F)
    _jacobian_top_fill(Jtop, xi, theta_true, term_row, term_col, term_coef,
                       term_exp, special_kind, special_cols, special_w,
                       special_a, n, p)
    # dM = J M with J = [Jtop; shift identity]
    for r in range(p):
        for c in range(npp):
            acc = 0.0
            for l in range(npp):
                acc += Jtop[r, l] * M[l, c]
            dM[r, c] = acc
    for r in range(p, npp):
        for c in range(npp):
            dM[r, c] = M[r - p, c]
    # trace of J is the trace of its top-left p-by-p block
    tr = 0.0
    for r in range(p):
        tr += Jtop[r, r]
    return tr


@njit(cache=True)
def integrate_monodromy(xi0, t0, period, n_steps,
                        n, p, m,
                        term_row, term_col, term_coef, term_exp,
                        special_kind, special_cols, special_w, special_a,
                        theta_true, exc_amp, exc_om, exc_ph):
    """RK4 of the variational equations over one period.

    Returns the final state, the monodromy matrix M(T) and the integral of
    trace(J) along the trajectory (Liouville invariant: det M = exp of it).
    """
    npp = n * p
    dt = period / n_steps
    xi = xi0.copy()
    M = np.eye(npp)
    tr_int = 0.0

    k1x = np.empty(npp)
    k2x = np.empty(npp)
    k3x = np.empty(npp)
    k4x = np.empty(npp)
    k1M = np.empty((npp, npp))
    k2M = np.empty((npp, npp))
    k3M = np.empty((npp, npp))
    k4M = np.empty((npp, npp))
    wx = np.empty(npp)
    wM = np.empty((npp, npp))
    Jtop = np.empty((p, npp))
    F = np.empty((p, m))

    for step in range(n_steps):
        t = t0 + step * dt
        half = 0.5 * dt
        tr1 = _variational_rhs(t, xi, M, k1x, k1M, Jtop, F, n, p, m,
                               term_row, term_col, term_coef, term_exp,
                               special_kind, special_cols, special_w,
                               special_a, theta_true, exc_amp, exc_om, exc_ph)
        for j in range(npp):
            wx[j] = xi[j] + half * k1x[j]
        for r in range(npp):
            for c in range(npp):
                wM[r, c] = M[r, c] + half * k1M[r, c]
        tr2 = _variational_rhs(t + half, wx, wM, k2x, k2M, Jtop, F, n, p, m,
                               term_row, term_col, term_coef, term_exp,
                               special_kind, special_cols, special_w,
                               special_a, theta_true, exc_amp, exc_om, exc_ph)
        for j in range(npp):
            wx[j] = xi[j] + half * k2x[j]
        for r in range(npp):
            for c in range(npp):
                wM[r, c] = M[r, c] + half * k2M[r, c]
        tr3 = _variational_rhs(t + half, wx, wM, k3x, k3M, Jtop, F, n, p, m,
                               term_row, term_col, term_coef, term_exp,
                               special_kind, special_cols, special_w,
                               special_a, theta_true, exc_amp, exc_om, exc_ph)
        for j in range(npp):
            wx[j] = xi[j] + dt * k3x[j]
        for r in range(npp):
            for c in range(npp):
                wM[r, c] = M[r, c] + dt * k3M[r, c]
        tr4 = _variational_rhs(t + dt, wx, wM, k4x, k4M, Jtop, F, n, p, m,
                               term_row, term_col, term_coef, term_exp,
                               special_kind, special_cols, special_w,
                               special_a, theta_true, exc_amp, exc_om, exc_ph)
        sixth = dt / 6.0
        for j in range(npp):
            xi[j] += sixth * (k1x[j] + 2.0 * k2x[j] + 2.0 * k3x[j] + k4x[j])
        for r in range(npp):
            for c in range(npp):
                M[r, c] += sixth * (k1M[r, c] + 2.0 * k2M[r, c]
                                    + 2.0 * k3M[r, c] + k4M[r, c])
        tr_int += sixth * (tr1 + 2.0 * tr2 + 2.0 * tr3 + tr4)

    return xi, M, tr_int
