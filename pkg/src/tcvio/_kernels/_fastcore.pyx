# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled window-factor kernels; same contract as _pycore (the numpy
fallback). Per-factor loops accumulate straight into the normal equations."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt

cnp.import_array()

DEF MIN_DEPTH = 1e-4


cdef inline double _huber(double s, double huber_delta, double* scale) nogil:
    # returns the cost term; writes the sqrt IRLS scale
    cdef double sq
    if huber_delta > 0.0 and s > huber_delta * huber_delta:
        sq = sqrt(s)
        scale[0] = sqrt(huber_delta / sq)
        return huber_delta * (sq - 0.5 * huber_delta)
    scale[0] = 1.0
    return 0.5 * s


def cost_two_view(
    cnp.ndarray[double, ndim=3] rot,
    cnp.ndarray[double, ndim=2] pos,
    cnp.ndarray[long, ndim=1] host,
    cnp.ndarray[long, ndim=1] tgt,
    cnp.ndarray[long, ndim=1] fidx,
    cnp.ndarray[double, ndim=2] z_i,
    cnp.ndarray[double, ndim=2] v_i,
    cnp.ndarray[double, ndim=2] z_j,
    cnp.ndarray[double, ndim=2] v_j,
    cnp.ndarray[double, ndim=1] inv_depth,
    double td,
    double sqrt_w,
    double huber_delta,
):
    cdef Py_ssize_t n = host.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(n, dtype=np.uint8)
    cdef double cost = 0.0
    cdef Py_ssize_t k, i, j, a, b
    cdef double rho, lam, iz, s, scale
    cdef double hi[3]
    cdef double xi[3]
    cdef double xw[3]
    cdef double xj[3]
    cdef double r0, r1
    for k in range(n):
        i = host[k]
        j = tgt[k]
        rho = inv_depth[fidx[k]]
        if rho <= 0.0:
            continue
        lam = 1.0 / rho
        if lam <= MIN_DEPTH:
            continue
        hi[0] = z_i[k, 0] + td * v_i[k, 0]
        hi[1] = z_i[k, 1] + td * v_i[k, 1]
        hi[2] = 1.0
        for a in range(3):
            xi[a] = lam * hi[a]
        for a in range(3):
            xw[a] = pos[i, a]
            for b in range(3):
                xw[a] += rot[i, a, b] * xi[b]
        for a in range(3):
            xj[a] = 0.0
            for b in range(3):
                xj[a] += rot[j, b, a] * (xw[b] - pos[j, b])
        if xj[2] <= MIN_DEPTH:
            continue
        valid[k] = 1
        iz = 1.0 / xj[2]
        r0 = (z_j[k, 0] + td * v_j[k, 0]) - xj[0] * iz
        r1 = (z_j[k, 1] + td * v_j[k, 1]) - xj[1] * iz
        s = (r0 * r0 + r1 * r1) * sqrt_w * sqrt_w
        cost += _huber(s, huber_delta, &scale)
    return cost, valid.view(bool)


def accumulate_two_view(
    cnp.ndarray[double, ndim=3] rot,
    cnp.ndarray[double, ndim=2] pos,
    cnp.ndarray[long, ndim=1] host,
    cnp.ndarray[long, ndim=1] tgt,
    cnp.ndarray[long, ndim=1] fidx,
    cnp.ndarray[double, ndim=2] z_i,
    cnp.ndarray[double, ndim=2] v_i,
    cnp.ndarray[double, ndim=2] z_j,
    cnp.ndarray[double, ndim=2] v_j,
    cnp.ndarray[double, ndim=1] inv_depth,
    double td,
    double sqrt_w,
    double huber_delta,
    Py_ssize_t n_frames,
):
    cdef Py_ssize_t n = host.shape[0]
    cdef Py_ssize_t n_feat = inv_depth.shape[0]
    cdef Py_ssize_t d = 15 * n_frames + 1
    cdef cnp.ndarray[double, ndim=2] h_cc = np.zeros((d, d))
    cdef cnp.ndarray[double, ndim=1] g_c = np.zeros(d)
    cdef cnp.ndarray[double, ndim=1] h_ff = np.zeros(n_feat)
    cdef cnp.ndarray[double, ndim=1] g_f = np.zeros(n_feat)
    cdef cnp.ndarray[double, ndim=2] h_fc = np.zeros((n_feat, d))
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(n, dtype=np.uint8)
    cdef double cost = 0.0

    cdef Py_ssize_t k, i, j, f, a, b, c
    cdef double rho, lam, iz, iz2, s, scale, w, cterm
    cdef double hi[3]
    cdef double xi[3]
    cdef double xw[3]
    cdef double xj[3]
    cdef double pm[2][3]
    cdef double am[2][3]
    cdef double ari[2][3]
    cdef double sxi[3][3]
    cdef double sxj[3][3]
    cdef double jc[2][13]
    cdef double jf[2]
    cdef double rr[2]
    cdef Py_ssize_t cols[13]

    for k in range(n):
        i = host[k]
        j = tgt[k]
        f = fidx[k]
        rho = inv_depth[f]
        if rho <= 0.0:
            continue
        lam = 1.0 / rho
        if lam <= MIN_DEPTH:
            continue
        hi[0] = z_i[k, 0] + td * v_i[k, 0]
        hi[1] = z_i[k, 1] + td * v_i[k, 1]
        hi[2] = 1.0
        for a in range(3):
            xi[a] = lam * hi[a]
        for a in range(3):
            xw[a] = pos[i, a]
            for b in range(3):
                xw[a] += rot[i, a, b] * xi[b]
        for a in range(3):
            xj[a] = 0.0
            for b in range(3):
                xj[a] += rot[j, b, a] * (xw[b] - pos[j, b])
        if xj[2] <= MIN_DEPTH:
            continue
        valid[k] = 1

        iz = 1.0 / xj[2]
        iz2 = iz * iz
        rr[0] = (z_j[k, 0] + td * v_j[k, 0]) - xj[0] * iz
        rr[1] = (z_j[k, 1] + td * v_j[k, 1]) - xj[1] * iz
        s = (rr[0] * rr[0] + rr[1] * rr[1]) * sqrt_w * sqrt_w
        cterm = _huber(s, huber_delta, &scale)
        cost += cterm
        w = sqrt_w * scale

        pm[0][0] = iz
        pm[0][1] = 0.0
        pm[0][2] = -xj[0] * iz2
        pm[1][0] = 0.0
        pm[1][1] = iz
        pm[1][2] = -xj[1] * iz2
        # am = pm @ Rj^T ; ari = am @ Ri
        for a in range(2):
            for c in range(3):
                am[a][c] = 0.0
                for b in range(3):
                    am[a][c] += pm[a][b] * rot[j, c, b]
        for a in range(2):
            for c in range(3):
                ari[a][c] = 0.0
                for b in range(3):
                    ari[a][c] += am[a][b] * rot[i, b, c]

        sxi[0][0] = 0.0
        sxi[0][1] = -xi[2]
        sxi[0][2] = xi[1]
        sxi[1][0] = xi[2]
        sxi[1][1] = 0.0
        sxi[1][2] = -xi[0]
        sxi[2][0] = -xi[1]
        sxi[2][1] = xi[0]
        sxi[2][2] = 0.0
        sxj[0][0] = 0.0
        sxj[0][1] = -xj[2]
        sxj[0][2] = xj[1]
        sxj[1][0] = xj[2]
        sxj[1][1] = 0.0
        sxj[1][2] = -xj[0]
        sxj[2][0] = -xj[1]
        sxj[2][1] = xj[0]
        sxj[2][2] = 0.0

        for a in range(2):
            for c in range(3):
                jc[a][c] = -am[a][c] * w
                jc[a][6 + c] = am[a][c] * w
                jc[a][3 + c] = 0.0
                jc[a][9 + c] = 0.0
                for b in range(3):
                    jc[a][3 + c] += ari[a][b] * sxi[b][c]
                    jc[a][9 + c] -= pm[a][b] * sxj[b][c]
                jc[a][3 + c] *= w
                jc[a][9 + c] *= w
            jc[a][12] = (
                v_j[k, a]
                - lam * (ari[a][0] * v_i[k, 0] + ari[a][1] * v_i[k, 1])
            ) * w
            jf[a] = (
                lam * lam * (ari[a][0] * hi[0] + ari[a][1] * hi[1] + ari[a][2] * hi[2])
            ) * w
            rr[a] *= w

        for a in range(3):
            cols[a] = 15 * i + a
            cols[3 + a] = 15 * i + 3 + a
            cols[6 + a] = 15 * j + a
            cols[9 + a] = 15 * j + 3 + a
        cols[12] = d - 1

        for a in range(13):
            g_c[cols[a]] += jc[0][a] * rr[0] + jc[1][a] * rr[1]
            for b in range(13):
                h_cc[cols[a], cols[b]] += jc[0][a] * jc[0][b] + jc[1][a] * jc[1][b]
        h_ff[f] += jf[0] * jf[0] + jf[1] * jf[1]
        g_f[f] += jf[0] * rr[0] + jf[1] * rr[1]
        for a in range(13):
            h_fc[f, cols[a]] += jf[0] * jc[0][a] + jf[1] * jc[1][a]

    return h_cc, g_c, h_ff, g_f, h_fc, cost, valid.view(bool)


def cost_world_point(
    cnp.ndarray[double, ndim=3] rot,
    cnp.ndarray[double, ndim=2] pos,
    cnp.ndarray[long, ndim=1] kf,
    cnp.ndarray[long, ndim=1] fidx,
    cnp.ndarray[double, ndim=2] z,
    cnp.ndarray[double, ndim=2] v,
    cnp.ndarray[double, ndim=2] points,
    double td,
    double sqrt_w,
    double huber_delta,
):
    cdef Py_ssize_t n = kf.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(n, dtype=np.uint8)
    cdef double cost = 0.0
    cdef Py_ssize_t k, i, f, a, b
    cdef double xc[3]
    cdef double iz, r0, r1, s, scale
    for k in range(n):
        i = kf[k]
        f = fidx[k]
        for a in range(3):
            xc[a] = 0.0
            for b in range(3):
                xc[a] += rot[i, b, a] * (points[f, b] - pos[i, b])
        if xc[2] <= MIN_DEPTH:
            continue
        valid[k] = 1
        iz = 1.0 / xc[2]
        r0 = (z[k, 0] + td * v[k, 0]) - xc[0] * iz
        r1 = (z[k, 1] + td * v[k, 1]) - xc[1] * iz
        s = (r0 * r0 + r1 * r1) * sqrt_w * sqrt_w
        cost += _huber(s, huber_delta, &scale)
    return cost, valid.view(bool)


def accumulate_world_point(
    cnp.ndarray[double, ndim=3] rot,
    cnp.ndarray[double, ndim=2] pos,
    cnp.ndarray[long, ndim=1] kf,
    cnp.ndarray[long, ndim=1] fidx,
    cnp.ndarray[double, ndim=2] z,
    cnp.ndarray[double, ndim=2] v,
    cnp.ndarray[double, ndim=2] points,
    double td,
    double sqrt_w,
    double huber_delta,
    Py_ssize_t n_frames,
):
    cdef Py_ssize_t n = kf.shape[0]
    cdef Py_ssize_t n_feat = points.shape[0]
    cdef Py_ssize_t d = 15 * n_frames + 1
    cdef cnp.ndarray[double, ndim=2] h_cc = np.zeros((d, d))
    cdef cnp.ndarray[double, ndim=1] g_c = np.zeros(d)
    cdef cnp.ndarray[double, ndim=3] h_ff = np.zeros((n_feat, 3, 3))
    cdef cnp.ndarray[double, ndim=2] g_f = np.zeros((n_feat, 3))
    cdef cnp.ndarray[double, ndim=3] h_fc = np.zeros((n_feat, 3, d))
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(n, dtype=np.uint8)
    cdef double cost = 0.0

    cdef Py_ssize_t k, i, f, a, b, c
    cdef double xc[3]
    cdef double pm[2][3]
    cdef double prt[2][3]
    cdef double sxc[3][3]
    cdef double jc[2][7]
    cdef double jf[2][3]
    cdef double rr[2]
    cdef Py_ssize_t cols[7]
    cdef double iz, iz2, s, scale, w, cterm

    for k in range(n):
        i = kf[k]
        f = fidx[k]
        for a in range(3):
            xc[a] = 0.0
            for b in range(3):
                xc[a] += rot[i, b, a] * (points[f, b] - pos[i, b])
        if xc[2] <= MIN_DEPTH:
            continue
        valid[k] = 1
        iz = 1.0 / xc[2]
        iz2 = iz * iz
        rr[0] = (z[k, 0] + td * v[k, 0]) - xc[0] * iz
        rr[1] = (z[k, 1] + td * v[k, 1]) - xc[1] * iz
        s = (rr[0] * rr[0] + rr[1] * rr[1]) * sqrt_w * sqrt_w
        cterm = _huber(s, huber_delta, &scale)
        cost += cterm
        w = sqrt_w * scale

        pm[0][0] = iz
        pm[0][1] = 0.0
        pm[0][2] = -xc[0] * iz2
        pm[1][0] = 0.0
        pm[1][1] = iz
        pm[1][2] = -xc[1] * iz2
        for a in range(2):
            for c in range(3):
                prt[a][c] = 0.0
                for b in range(3):
                    prt[a][c] += pm[a][b] * rot[i, c, b]
        sxc[0][0] = 0.0
        sxc[0][1] = -xc[2]
        sxc[0][2] = xc[1]
        sxc[1][0] = xc[2]
        sxc[1][1] = 0.0
        sxc[1][2] = -xc[0]
        sxc[2][0] = -xc[1]
        sxc[2][1] = xc[0]
        sxc[2][2] = 0.0

        for a in range(2):
            for c in range(3):
                jc[a][c] = prt[a][c] * w
                jc[a][3 + c] = 0.0
                for b in range(3):
                    jc[a][3 + c] -= pm[a][b] * sxc[b][c]
                jc[a][3 + c] *= w
                jf[a][c] = -prt[a][c] * w
            jc[a][6] = v[k, a] * w
            rr[a] *= w

        for a in range(3):
            cols[a] = 15 * i + a
            cols[3 + a] = 15 * i + 3 + a
        cols[6] = d - 1

        for a in range(7):
            g_c[cols[a]] += jc[0][a] * rr[0] + jc[1][a] * rr[1]
            for b in range(7):
                h_cc[cols[a], cols[b]] += jc[0][a] * jc[0][b] + jc[1][a] * jc[1][b]
        for a in range(3):
            g_f[f, a] += jf[0][a] * rr[0] + jf[1][a] * rr[1]
            for b in range(3):
                h_ff[f, a, b] += jf[0][a] * jf[0][b] + jf[1][a] * jf[1][b]
            for b in range(7):
                h_fc[f, a, cols[b]] += jf[0][a] * jc[0][b] + jf[1][a] * jc[1][b]

    return h_cc, g_c, h_ff, g_f, h_fc, cost, valid.view(bool)


def preintegrate(
    cnp.ndarray[double, ndim=1] ts,
    cnp.ndarray[double, ndim=2] gyro,
    cnp.ndarray[double, ndim=2] accel,
    cnp.ndarray[double, ndim=1] bias_a,
    cnp.ndarray[double, ndim=1] bias_g,
    double sig_g,
    double sig_a,
    double sig_wa,
    double sig_wg,
):
    """Midpoint preintegration over a sample sequence.

    Returns (delta_q wxyz, delta_v, delta_p, cov 15x15, jac 15x15, dt_total)
    with the error-state ordering [theta, v, p, b_a, b_g]; matches the
    pure-Python PreintegratedImu.step chain.
    """
    cdef Py_ssize_t n = ts.shape[0]
    if n < 2:
        raise ValueError("need at least 2 IMU samples to integrate")
    cdef cnp.ndarray[double, ndim=1] q = np.array([1.0, 0.0, 0.0, 0.0])
    cdef cnp.ndarray[double, ndim=1] dv = np.zeros(3)
    cdef cnp.ndarray[double, ndim=1] dp = np.zeros(3)
    cdef cnp.ndarray[double, ndim=2] cov = np.zeros((15, 15))
    cdef cnp.ndarray[double, ndim=2] jac = np.eye(15)
    cdef cnp.ndarray[double, ndim=2] f = np.zeros((15, 15))
    cdef cnp.ndarray[double, ndim=2] tmp = np.zeros((15, 15))
    cdef cnp.ndarray[double, ndim=2] tmp2 = np.zeros((15, 15))
    cdef cnp.ndarray[double, ndim=2] g = np.zeros((15, 18))
    cdef cnp.ndarray[double, ndim=1] qd = np.zeros(18)

    cdef double dt, dt_total = 0.0
    cdef double wm[3]
    cdef double a0c[3]
    cdef double a1c[3]
    cdef double r0[3][3]
    cdef double r1[3][3]
    cdef double am[3]
    cdef double dq[4]
    cdef double q1[4]
    cdef double jr[3][3]
    cdef double em[3][3]
    cdef double s0[3][3]
    cdef double s1[3][3]
    cdef double phi[3]
    cdef double angle, half, w_, c1, c2, s_
    cdef Py_ssize_t k, a, b, c

    qd[0] = qd[1] = qd[2] = sig_g * sig_g
    qd[3] = qd[4] = qd[5] = sig_a * sig_a
    qd[6] = qd[7] = qd[8] = sig_g * sig_g
    qd[9] = qd[10] = qd[11] = sig_a * sig_a

    for k in range(n - 1):
        dt = ts[k + 1] - ts[k]
        if dt <= 0.0:
            raise ValueError("IMU samples not strictly time-ordered")
        dt_total += dt
        for a in range(3):
            wm[a] = 0.5 * (gyro[k, a] + gyro[k + 1, a]) - bias_g[a]
            a0c[a] = accel[k, a] - bias_a[a]
            a1c[a] = accel[k + 1, a] - bias_a[a]
        _quat_to_mat(&q[0], r0)

        # dq = exp(wm*dt) as quaternion
        for a in range(3):
            phi[a] = wm[a] * dt
        angle = sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
        if angle < 1e-8:
            half = 0.5 - angle * angle / 48.0
            w_ = 1.0 - angle * angle / 8.0
        else:
            half = sin(0.5 * angle) / angle
            w_ = cos(0.5 * angle)
        dq[0] = w_
        dq[1] = half * phi[0]
        dq[2] = half * phi[1]
        dq[3] = half * phi[2]
        _quat_mul(&q[0], dq, q1)
        _quat_normalize(q1)
        _quat_to_mat(q1, r1)

        for a in range(3):
            am[a] = 0.0
        for a in range(3):
            for b in range(3):
                am[a] += 0.5 * (r0[a][b] * a0c[b] + r1[a][b] * a1c[b])
        for a in range(3):
            dp[a] += dv[a] * dt + 0.5 * am[a] * dt * dt
            dv[a] += am[a] * dt
        for a in range(4):
            q[a] = q1[a]

        # jr = right Jacobian of phi, em = exp(-phi) as matrix
        _right_jacobian(phi, jr)
        for a in range(3):
            phi[a] = -phi[a]
        _exp_matrix(phi, em)

        _skew3(a0c, s0)
        _skew3(a1c, s1)
        # s0 <- r0 @ skew(a0c), s1 <- r1 @ skew(a1c)
        _mat3_mul_inplace(r0, s0)
        _mat3_mul_inplace(r1, s1)

        f[:] = 0.0
        for a in range(3):
            f[a + 9, a + 9] = 1.0
            f[a + 12, a + 12] = 1.0
            f[a + 3, a + 3] = 1.0
            f[a + 6, a + 6] = 1.0
            f[a + 6, a + 3] = dt
        for a in range(3):
            for b in range(3):
                f[a, b] = em[a][b]
                f[a, 12 + b] = -jr[a][b] * dt
        # f_v_theta = -0.5*dt*(s0 + s1 @ em)
        for a in range(3):
            for b in range(3):
                w_ = 0.0
                for c in range(3):
                    w_ += s1[a][c] * em[c][b]
                f[3 + a, b] = -0.5 * dt * (s0[a][b] + w_)
                f[3 + a, 9 + b] = -0.5 * dt * (r0[a][b] + r1[a][b])
                w_ = 0.0
                for c in range(3):
                    w_ += s1[a][c] * (-jr[c][b] * dt)
                f[3 + a, 12 + b] = -0.5 * dt * w_
        # position rows: p_theta, p_ba, p_bg = 0.5*dt * velocity rows;
        # p_v = dt and p_p = I were set above
        for a in range(3):
            for b in range(3):
                f[6 + a, b] = 0.5 * dt * f[3 + a, b]
                f[6 + a, 9 + b] = 0.5 * dt * f[3 + a, 9 + b]
                f[6 + a, 12 + b] = 0.5 * dt * f[3 + a, 12 + b]

        g[:] = 0.0
        for a in range(3):
            for b in range(3):
                g[a, b] = -0.5 * jr[a][b] * dt
                g[a, 6 + b] = -0.5 * jr[a][b] * dt
                g[3 + a, 3 + b] = -0.5 * dt * r0[a][b]
                g[3 + a, 9 + b] = -0.5 * dt * r1[a][b]
                w_ = 0.0
                for c in range(3):
                    w_ += s1[a][c] * (-0.5 * jr[c][b] * dt)
                g[3 + a, b] = -0.5 * dt * w_
                g[3 + a, 6 + b] = -0.5 * dt * w_
            g[9 + a, 12 + a] = 1.0
            g[12 + a, 15 + a] = 1.0
        for a in range(3):
            for b in range(18):
                g[6 + a, b] = 0.5 * dt * g[3 + a, b]
        qd[12] = qd[13] = qd[14] = sig_wa * sig_wa * dt
        qd[15] = qd[16] = qd[17] = sig_wg * sig_wg * dt

        # cov = f cov f^T + g qd g^T (symmetrized); jac = f jac
        np.matmul(f, cov, out=tmp)
        np.matmul(tmp, f.T, out=tmp2)
        tmp2 += (g * qd) @ g.T
        cov[:] = 0.5 * (tmp2 + tmp2.T)
        np.matmul(f, jac, out=tmp)
        jac[:] = tmp

    return q, dv, dp, cov, jac, dt_total


cdef inline void _quat_mul(double* a, double* b, double* out) nogil:
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]


cdef inline void _quat_normalize(double* q) nogil:
    cdef double n = sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    q[0] /= n
    q[1] /= n
    q[2] /= n
    q[3] /= n


cdef inline void _quat_to_mat(double* q, double m[3][3]) nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    m[0][0] = 1 - 2 * (y * y + z * z)
    m[0][1] = 2 * (x * y - w * z)
    m[0][2] = 2 * (x * z + w * y)
    m[1][0] = 2 * (x * y + w * z)
    m[1][1] = 1 - 2 * (x * x + z * z)
    m[1][2] = 2 * (y * z - w * x)
    m[2][0] = 2 * (x * z - w * y)
    m[2][1] = 2 * (y * z + w * x)
    m[2][2] = 1 - 2 * (x * x + y * y)


cdef inline void _skew3(double* v, double m[3][3]) nogil:
    m[0][0] = 0.0
    m[0][1] = -v[2]
    m[0][2] = v[1]
    m[1][0] = v[2]
    m[1][1] = 0.0
    m[1][2] = -v[0]
    m[2][0] = -v[1]
    m[2][1] = v[0]
    m[2][2] = 0.0


cdef inline void _mat3_mul_inplace(double a[3][3], double b[3][3]) nogil:
    # b <- a @ b
    cdef double out[3][3]
    cdef Py_ssize_t i, j, k
    for i in range(3):
        for j in range(3):
            out[i][j] = 0.0
            for k in range(3):
                out[i][j] += a[i][k] * b[k][j]
    for i in range(3):
        for j in range(3):
            b[i][j] = out[i][j]


cdef inline void _right_jacobian(double* phi, double m[3][3]) nogil:
    cdef double angle = sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    cdef double k[3][3]
    cdef double kk[3][3]
    cdef double c1, c2
    cdef Py_ssize_t i, j, c
    _skew3(phi, k)
    for i in range(3):
        for j in range(3):
            kk[i][j] = 0.0
            for c in range(3):
                kk[i][j] += k[i][c] * k[c][j]
    if angle < 1e-8:
        c1 = 0.5
        c2 = 1.0 / 6.0
    else:
        c1 = (1.0 - cos(angle)) / (angle * angle)
        c2 = (angle - sin(angle)) / (angle * angle * angle)
    for i in range(3):
        for j in range(3):
            m[i][j] = (1.0 if i == j else 0.0) - c1 * k[i][j] + c2 * kk[i][j]


cdef inline void _exp_matrix(double* phi, double m[3][3]) nogil:
    cdef double angle = sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    cdef double k[3][3]
    cdef double kk[3][3]
    cdef double c1, c2
    cdef Py_ssize_t i, j, c
    _skew3(phi, k)
    for i in range(3):
        for j in range(3):
            kk[i][j] = 0.0
            for c in range(3):
                kk[i][j] += k[i][c] * k[c][j]
    if angle < 1e-8:
        c1 = 1.0
        c2 = 0.5
    else:
        c1 = sin(angle) / angle
        c2 = (1.0 - cos(angle)) / (angle * angle)
    for i in range(3):
        for j in range(3):
            m[i][j] = (1.0 if i == j else 0.0) + c1 * k[i][j] + c2 * kk[i][j]
