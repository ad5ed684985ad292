"""Vectorized numpy fallback for the window-factor kernels.

Shared contract with the compiled backend (_fastcore):

- Camera-side tangent layout: keyframe k owns columns [15k, 15k+15) ordered
  [dp, dtheta, dv, dba, dbg]; the time-offset variable owns the last column,
  D = 15*n_frames + 1. Vision factors touch only the dp/dtheta columns and td.
- `accumulate_*` returns the Gauss-Newton pieces with feature blocks kept
  separate for Schur elimination: (h_cc, g_c, h_ff, g_f, h_fc, cost, valid).
- `cost_*` evaluates the robustified cost only.
- Residuals are whitened by sqrt_w; huber_delta <= 0 disables the loss.
- Factors whose camera-frame depth falls below min_depth are flagged invalid
  and contribute nothing this iteration.
"""

import numpy as np

MIN_DEPTH = 1e-4


def _batch_skew(v):
    n = v.shape[0]
    s = np.zeros((n, 3, 3))
    s[:, 0, 1] = -v[:, 2]
    s[:, 0, 2] = v[:, 1]
    s[:, 1, 0] = v[:, 2]
    s[:, 1, 2] = -v[:, 0]
    s[:, 2, 0] = -v[:, 1]
    s[:, 2, 1] = v[:, 0]
    return s


def _two_view_terms(rot, pos, host, tgt, fidx, z_i, v_i, z_j, v_j, inv_depth, td):
    ri = rot[host]
    rj = rot[tgt]
    lam = np.where(inv_depth[fidx] > 0, 1.0 / np.maximum(inv_depth[fidx], 1e-300), -1.0)
    zi = z_i + td * v_i
    zj = z_j + td * v_j
    hi = np.concatenate([zi, np.ones((len(zi), 1))], axis=1)
    xi = lam[:, None] * hi
    xw = np.einsum("nij,nj->ni", ri, xi) + pos[host]
    xj = np.einsum("nji,nj->ni", rj, xw - pos[tgt])
    valid = (lam > MIN_DEPTH) & (xj[:, 2] > MIN_DEPTH)
    zsafe = np.where(valid, xj[:, 2], 1.0)
    pred = xj[:, 0:2] / zsafe[:, None]
    resid = np.where(valid[:, None], zj - pred, 0.0)
    return ri, rj, lam, hi, xi, xj, zsafe, resid, valid


def _huber_terms(resid, valid, sqrt_w, huber_delta):
    """Whitened residual, per-factor sqrt IRLS scale, and robustified cost."""
    rw = resid * sqrt_w
    s = np.einsum("ni,ni->n", rw, rw)
    if huber_delta > 0:
        outlier = valid & (s > huber_delta * huber_delta)
        sq = np.sqrt(np.where(s > 0, s, 1.0))
        scale = np.where(outlier, np.sqrt(huber_delta / sq), 1.0)
        cost_terms = np.where(
            outlier, huber_delta * (sq - 0.5 * huber_delta), 0.5 * s
        )
    else:
        scale = np.ones(len(s))
        cost_terms = 0.5 * s
    cost = float(cost_terms[valid].sum()) if valid.any() else 0.0
    return rw, scale, cost


def cost_two_view(
    rot, pos, host, tgt, fidx, z_i, v_i, z_j, v_j, inv_depth, td, sqrt_w, huber_delta
):
    _, _, _, _, _, _, _, resid, valid = _two_view_terms(
        rot, pos, host, tgt, fidx, z_i, v_i, z_j, v_j, inv_depth, td
    )
    _, _, cost = _huber_terms(resid, valid, sqrt_w, huber_delta)
    return cost, valid


def accumulate_two_view(
    rot,
    pos,
    host,
    tgt,
    fidx,
    z_i,
    v_i,
    z_j,
    v_j,
    inv_depth,
    td,
    sqrt_w,
    huber_delta,
    n_frames,
):
    n = len(host)
    n_feat = len(inv_depth)
    d = 15 * n_frames + 1
    ri, rj, lam, hi, xi, xj, zsafe, resid, valid = _two_view_terms(
        rot, pos, host, tgt, fidx, z_i, v_i, z_j, v_j, inv_depth, td
    )
    rw, scale, cost = _huber_terms(resid, valid, sqrt_w, huber_delta)

    iz = 1.0 / zsafe
    proj = np.zeros((n, 2, 3))
    proj[:, 0, 0] = iz
    proj[:, 1, 1] = iz
    proj[:, 0, 2] = -xj[:, 0] * iz * iz
    proj[:, 1, 2] = -xj[:, 1] * iz * iz

    a = np.einsum("nab,ncb->nac", proj, rj)       # proj @ Rj^T
    a_ri = np.einsum("nab,nbc->nac", a, ri)
    j_pi_th = np.einsum("nab,nbc->nac", a_ri, _batch_skew(xi))
    j_pj_th = -np.einsum("nab,nbc->nac", proj, _batch_skew(xj))
    j_rho = (lam * lam)[:, None] * np.einsum("nab,nb->na", a_ri, hi)
    vi_aug = np.concatenate([v_i, np.zeros((n, 1))], axis=1)
    j_td = v_j - lam[:, None] * np.einsum("nab,nb->na", a_ri, vi_aug)

    # whitening + robust scale; invalid factors contribute zero rows
    w = (sqrt_w * scale * valid)[:, None]
    rw = rw * (scale * valid)[:, None]
    jc = np.zeros((n, 2, 13))
    jc[:, :, 0:3] = -a * w[:, :, None]
    jc[:, :, 3:6] = j_pi_th * w[:, :, None]
    jc[:, :, 6:9] = a * w[:, :, None]
    jc[:, :, 9:12] = j_pj_th * w[:, :, None]
    jc[:, :, 12] = j_td * w
    jf = j_rho * w

    # dense stacked Jacobian over camera columns + one column per feature
    cols = np.empty((n, 14), dtype=np.intp)
    base_i = 15 * host
    base_j = 15 * tgt
    for k in range(3):
        cols[:, k] = base_i + k
        cols[:, 3 + k] = base_i + 3 + k
        cols[:, 6 + k] = base_j + k
        cols[:, 9 + k] = base_j + 3 + k
    cols[:, 12] = d - 1
    cols[:, 13] = d + fidx

    j_ext = np.zeros((2 * n, d + n_feat))
    rows = np.arange(2 * n).reshape(n, 2)
    vals = np.concatenate([jc, jf[:, :, None]], axis=2)
    j_ext[rows[:, :, None], cols[:, None, :]] = vals
    r_stack = rw.reshape(2 * n)

    h_full = j_ext.T @ j_ext
    g_full = j_ext.T @ r_stack
    h_cc = h_full[:d, :d]
    g_c = g_full[:d]
    h_ff = np.diag(h_full[d:, d:]).copy()
    g_f = g_full[d:]
    h_fc = h_full[d:, :d]
    return h_cc, g_c, h_ff, g_f, h_fc, cost, valid


def _world_point_terms(rot, pos, kf, fidx, z, v, points, td):
    r = rot[kf]
    xc = np.einsum("nji,nj->ni", r, points[fidx] - pos[kf])
    valid = xc[:, 2] > MIN_DEPTH
    zsafe = np.where(valid, xc[:, 2], 1.0)
    pred = xc[:, 0:2] / zsafe[:, None]
    resid = np.where(valid[:, None], z + td * v - pred, 0.0)
    return r, xc, zsafe, resid, valid


def cost_world_point(rot, pos, kf, fidx, z, v, points, td, sqrt_w, huber_delta):
    _, _, _, resid, valid = _world_point_terms(rot, pos, kf, fidx, z, v, points, td)
    _, _, cost = _huber_terms(resid, valid, sqrt_w, huber_delta)
    return cost, valid


def accumulate_world_point(
    rot, pos, kf, fidx, z, v, points, td, sqrt_w, huber_delta, n_frames
):
    n = len(kf)
    n_feat = len(points)
    d = 15 * n_frames + 1
    r, xc, zsafe, resid, valid = _world_point_terms(
        rot, pos, kf, fidx, z, v, points, td
    )
    rw, scale, cost = _huber_terms(resid, valid, sqrt_w, huber_delta)

    iz = 1.0 / zsafe
    proj = np.zeros((n, 2, 3))
    proj[:, 0, 0] = iz
    proj[:, 1, 1] = iz
    proj[:, 0, 2] = -xc[:, 0] * iz * iz
    proj[:, 1, 2] = -xc[:, 1] * iz * iz

    prt = np.einsum("nab,ncb->nac", proj, r)      # proj @ R^T
    j_th = -np.einsum("nab,nbc->nac", proj, _batch_skew(xc))

    w = (sqrt_w * scale * valid)[:, None]
    rw = rw * (scale * valid)[:, None]
    jc = np.zeros((n, 2, 7))
    jc[:, :, 0:3] = prt * w[:, :, None]
    jc[:, :, 3:6] = j_th * w[:, :, None]
    jc[:, :, 6] = v * w
    jf = -prt * w[:, :, None]

    cols = np.empty((n, 10), dtype=np.intp)
    base = 15 * kf
    for k in range(3):
        cols[:, k] = base + k
        cols[:, 3 + k] = base + 3 + k
        cols[:, 7 + k] = d + 3 * fidx + k
    cols[:, 6] = d - 1

    j_ext = np.zeros((2 * n, d + 3 * n_feat))
    rows = np.arange(2 * n).reshape(n, 2)
    vals = np.concatenate([jc, jf], axis=2)
    j_ext[rows[:, :, None], cols[:, None, :]] = vals
    r_stack = rw.reshape(2 * n)

    h_full = j_ext.T @ j_ext
    g_full = j_ext.T @ r_stack
    h_cc = h_full[:d, :d]
    g_c = g_full[:d]
    h_ff = np.zeros((n_feat, 3, 3))
    g_f = np.zeros((n_feat, 3))
    h_fc = np.zeros((n_feat, 3, d))
    hf_block = h_full[d:, d:]
    for f in range(n_feat):
        sl = slice(3 * f, 3 * f + 3)
        h_ff[f] = hf_block[sl, sl]
        g_f[f] = g_full[d + 3 * f : d + 3 * f + 3]
        h_fc[f] = h_full[d + 3 * f : d + 3 * f + 3, :d]
    return h_cc, g_c, h_ff, g_f, h_fc, cost, valid


def preintegrate(ts, gyro, accel, bias_a, bias_g, sig_g, sig_a, sig_wa, sig_wg):
    """Midpoint preintegration over a sample sequence; mirrors the compiled
    kernel. Returns (delta_q wxyz, delta_v, delta_p, cov, jac, dt_total)."""
    from ..preintegration import ImuNoiseParams, PreintegratedImu

    if len(ts) < 2:
        raise ValueError("need at least 2 IMU samples to integrate")
    pre = PreintegratedImu(
        bias_a, bias_g, ImuNoiseParams(sig_g, sig_a, sig_wg, sig_wa)
    )
    for k in range(len(ts) - 1):
        dt = ts[k + 1] - ts[k]
        if dt <= 0.0:
            raise ValueError("IMU samples not strictly time-ordered")
        pre.step(gyro[k], accel[k], gyro[k + 1], accel[k + 1], dt)
    return pre.delta_q.q, pre.delta_v, pre.delta_p, pre.covariance, pre.jac, pre.dt_total
