"""Numba kernels for the simulator, sensitivities, and geometric losses.

Every kernel carries an optional block of forward-mode tangents: state arrays
have a trailing axis of width P (the number of active optimization
parameters).  With P = 0 the tangent loops vanish and the primal arithmetic
is instruction-for-instruction identical, which is what makes plain and
dual rollouts bitwise consistent.

All kernels are single-threaded and iterate in fixed order, so identical
input bits produce identical output bits.  No fastmath.

Error reporting: kernels write (code, particle index) into an int64[2]
buffer instead of raising; wrappers translate codes into typed exceptions.
Codes: 0 ok, 1 out-of-domain, 2 inverted element.
"""

import numpy as np
from numba import njit

ERR_OK = 0
ERR_OOB = 1
ERR_INVERTED = 2

# material codes shared with materials.MaterialFamily
MAT_ELASTIC = 0
MAT_PLASTICINE = 1
MAT_SNOW = 2
MAT_FLUID = 3
MAT_SAND = 4

MASS_EPS = 1e-12  # kg; grid nodes lighter than this are treated as empty
SVD_DENOM_EPS = 1e-8  # safeguard for near-equal singular values in the JVP


# ---------------------------------------------------------------------------
# 3x3 symmetric eigen / SVD, scalar arithmetic only (no allocations)
# ---------------------------------------------------------------------------


@njit(cache=True)
def svd3_kernel(a, u, s, v):
    """Rotation-variant SVD of a 3x3 matrix.

    Fills u, s, v so that a = u @ diag(s) @ v.T with det(u) = det(v) = +1,
    s[0] >= s[1] >= |s[2]|, reflections folded into the sign of s[2].
    Jacobi eigen-analysis of a.T a followed by a Gram-Schmidt build of u.
    """
    # b = a^T a, symmetric
    b00 = a[0, 0] * a[0, 0] + a[1, 0] * a[1, 0] + a[2, 0] * a[2, 0]
    b01 = a[0, 0] * a[0, 1] + a[1, 0] * a[1, 1] + a[2, 0] * a[2, 1]
    b02 = a[0, 0] * a[0, 2] + a[1, 0] * a[1, 2] + a[2, 0] * a[2, 2]
    b11 = a[0, 1] * a[0, 1] + a[1, 1] * a[1, 1] + a[2, 1] * a[2, 1]
    b12 = a[0, 1] * a[0, 2] + a[1, 1] * a[1, 2] + a[2, 1] * a[2, 2]
    b22 = a[0, 2] * a[0, 2] + a[1, 2] * a[1, 2] + a[2, 2] * a[2, 2]

    v00 = 1.0
    v01 = 0.0
    v02 = 0.0
    v10 = 0.0
    v11 = 1.0
    v12 = 0.0
    v20 = 0.0
    v21 = 0.0
    v22 = 1.0

    scale = b00 + b11 + b22
    tol = 1e-30 * scale * scale + 1e-300

    for _sweep in range(24):
        off = b01 * b01 + b02 * b02 + b12 * b12
        if off <= tol:
            break
        # rotate (0, 1)
        if b01 != 0.0:
            tau = (b11 - b00) / (2.0 * b01)
            if tau >= 0.0:
                t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
            else:
                t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c
            nb00 = b00 - t * b01
            nb11 = b11 + t * b01
            nb02 = c * b02 - sn * b12
            nb12 = sn * b02 + c * b12
            b00 = nb00
            b11 = nb11
            b01 = 0.0
            b02 = nb02
            b12 = nb12
            t0 = c * v00 - sn * v01
            v01 = sn * v00 + c * v01
            v00 = t0
            t0 = c * v10 - sn * v11
            v11 = sn * v10 + c * v11
            v10 = t0
            t0 = c * v20 - sn * v21
            v21 = sn * v20 + c * v21
            v20 = t0
        # rotate (0, 2)
        if b02 != 0.0:
            tau = (b22 - b00) / (2.0 * b02)
            if tau >= 0.0:
                t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
            else:
                t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c
            nb00 = b00 - t * b02
            nb22 = b22 + t * b02
            nb01 = c * b01 - sn * b12
            nb12 = sn * b01 + c * b12
            b00 = nb00
            b22 = nb22
            b02 = 0.0
            b01 = nb01
            b12 = nb12
            t0 = c * v00 - sn * v02
            v02 = sn * v00 + c * v02
            v00 = t0
            t0 = c * v10 - sn * v12
            v12 = sn * v10 + c * v12
            v10 = t0
            t0 = c * v20 - sn * v22
            v22 = sn * v20 + c * v22
            v20 = t0
        # rotate (1, 2)
        if b12 != 0.0:
            tau = (b22 - b11) / (2.0 * b12)
            if tau >= 0.0:
                t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
            else:
                t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c
            nb11 = b11 - t * b12
            nb22 = b22 + t * b12
            nb01 = c * b01 - sn * b02
            nb02 = sn * b01 + c * b02
            b11 = nb11
            b22 = nb22
            b12 = 0.0
            b01 = nb01
            b02 = nb02
            t0 = c * v01 - sn * v02
            v02 = sn * v01 + c * v02
            v01 = t0
            t0 = c * v11 - sn * v12
            v12 = sn * v11 + c * v12
            v11 = t0
            t0 = c * v21 - sn * v22
            v22 = sn * v21 + c * v22
            v21 = t0

    l0 = b00
    l1 = b11
    l2 = b22

    # sort eigenpairs descending (3-element sorting network)
    if l0 < l1:
        l0, l1 = l1, l0
        v00, v01 = v01, v00
        v10, v11 = v11, v10
        v20, v21 = v21, v20
    if l1 < l2:
        l1, l2 = l2, l1
        v01, v02 = v02, v01
        v11, v12 = v12, v11
        v21, v22 = v22, v21
    if l0 < l1:
        l0, l1 = l1, l0
        v00, v01 = v01, v00
        v10, v11 = v11, v10
        v20, v21 = v21, v20

    # force det(v) = +1
    det_v = (
        v00 * (v11 * v22 - v12 * v21)
        - v01 * (v10 * v22 - v12 * v20)
        + v02 * (v10 * v21 - v11 * v20)
    )
    if det_v < 0.0:
        v02 = -v02
        v12 = -v12
        v22 = -v22

    # u columns from a @ v, Gram-Schmidt with degeneracy fallbacks
    a0x = a[0, 0] * v00 + a[0, 1] * v10 + a[0, 2] * v20
    a0y = a[1, 0] * v00 + a[1, 1] * v10 + a[1, 2] * v20
    a0z = a[2, 0] * v00 + a[2, 1] * v10 + a[2, 2] * v20
    s0 = np.sqrt(a0x * a0x + a0y * a0y + a0z * a0z)
    if s0 > 1e-300:
        u0x = a0x / s0
        u0y = a0y / s0
        u0z = a0z / s0
    else:
        u0x = 1.0
        u0y = 0.0
        u0z = 0.0

    a1x = a[0, 0] * v01 + a[0, 1] * v11 + a[0, 2] * v21
    a1y = a[1, 0] * v01 + a[1, 1] * v11 + a[1, 2] * v21
    a1z = a[2, 0] * v01 + a[2, 1] * v11 + a[2, 2] * v21
    dot01 = a1x * u0x + a1y * u0y + a1z * u0z
    a1x -= dot01 * u0x
    a1y -= dot01 * u0y
    a1z -= dot01 * u0z
    s1 = np.sqrt(a1x * a1x + a1y * a1y + a1z * a1z)
    if s1 > 1e-300:
        u1x = a1x / s1
        u1y = a1y / s1
        u1z = a1z / s1
    else:
        # any unit vector orthogonal to u0
        if abs(u0x) < 0.9:
            cx, cy, cz = 1.0, 0.0, 0.0
        else:
            cx, cy, cz = 0.0, 1.0, 0.0
        u1x = u0y * cz - u0z * cy
        u1y = u0z * cx - u0x * cz
        u1z = u0x * cy - u0y * cx
        nrm = np.sqrt(u1x * u1x + u1y * u1y + u1z * u1z)
        u1x /= nrm
        u1y /= nrm
        u1z /= nrm

    u2x = u0y * u1z - u0z * u1y
    u2y = u0z * u1x - u0x * u1z
    u2z = u0x * u1y - u0y * u1x

    a2x = a[0, 0] * v02 + a[0, 1] * v12 + a[0, 2] * v22
    a2y = a[1, 0] * v02 + a[1, 1] * v12 + a[1, 2] * v22
    a2z = a[2, 0] * v02 + a[2, 1] * v12 + a[2, 2] * v22
    s2 = a2x * u2x + a2y * u2y + a2z * u2z  # signed: carries any reflection

    u[0, 0] = u0x
    u[1, 0] = u0y
    u[2, 0] = u0z
    u[0, 1] = u1x
    u[1, 1] = u1y
    u[2, 1] = u1z
    u[0, 2] = u2x
    u[1, 2] = u2y
    u[2, 2] = u2z
    s[0] = s0
    s[1] = s1
    s[2] = s2
    v[0, 0] = v00
    v[0, 1] = v01
    v[0, 2] = v02
    v[1, 0] = v10
    v[1, 1] = v11
    v[1, 2] = v12
    v[2, 0] = v20
    v[2, 1] = v21
    v[2, 2] = v22


@njit(cache=True)
def svd3_jvp_kernel(da, u, s, v, du, ds, dv):
    """Directional derivative of the SVD along da.

    Uses the perturbation identity u^T da v = Om_u Sigma - Sigma Om_v + dSigma
    with skew-symmetric Om_u, Om_v; near-equal singular values get a
    safeguarded denominator (magnitude floored at SVD_DENOM_EPS).
    """
    # w = u^T da v
    w00 = 0.0
    w01 = 0.0
    w02 = 0.0
    w10 = 0.0
    w11 = 0.0
    w12 = 0.0
    w20 = 0.0
    w21 = 0.0
    w22 = 0.0
    for r in range(3):
        t0 = u[r, 0]
        t1 = u[r, 1]
        t2 = u[r, 2]
        c0 = da[r, 0] * v[0, 0] + da[r, 1] * v[1, 0] + da[r, 2] * v[2, 0]
        c1 = da[r, 0] * v[0, 1] + da[r, 1] * v[1, 1] + da[r, 2] * v[2, 1]
        c2 = da[r, 0] * v[0, 2] + da[r, 1] * v[1, 2] + da[r, 2] * v[2, 2]
        w00 += t0 * c0
        w01 += t0 * c1
        w02 += t0 * c2
        w10 += t1 * c0
        w11 += t1 * c1
        w12 += t1 * c2
        w20 += t2 * c0
        w21 += t2 * c1
        w22 += t2 * c2

    ds[0] = w00
    ds[1] = w11
    ds[2] = w22

    # pair (i, j): [s_j, -s_i; -s_i, s_j] [ou; ov] = [w_ij; w_ji]
    d01 = s[1] * s[1] - s[0] * s[0]
    if d01 >= 0.0:
        d01 = max(d01, SVD_DENOM_EPS)
    else:
        d01 = min(d01, -SVD_DENOM_EPS)
    ou01 = (s[1] * w01 + s[0] * w10) / d01
    ov01 = (s[0] * w01 + s[1] * w10) / d01

    d02 = s[2] * s[2] - s[0] * s[0]
    if d02 >= 0.0:
        d02 = max(d02, SVD_DENOM_EPS)
    else:
        d02 = min(d02, -SVD_DENOM_EPS)
    ou02 = (s[2] * w02 + s[0] * w20) / d02
    ov02 = (s[0] * w02 + s[2] * w20) / d02

    d12 = s[2] * s[2] - s[1] * s[1]
    if d12 >= 0.0:
        d12 = max(d12, SVD_DENOM_EPS)
    else:
        d12 = min(d12, -SVD_DENOM_EPS)
    ou12 = (s[2] * w12 + s[1] * w21) / d12
    ov12 = (s[1] * w12 + s[2] * w21) / d12

    # du = u @ Om_u, dv = v @ Om_v with Om skew (Om[i,j] = o_ij, Om[j,i] = -o_ij)
    for r in range(3):
        du[r, 0] = -u[r, 1] * ou01 - u[r, 2] * ou02
        du[r, 1] = u[r, 0] * ou01 - u[r, 2] * ou12
        du[r, 2] = u[r, 0] * ou02 + u[r, 1] * ou12
        dv[r, 0] = -v[r, 1] * ov01 - v[r, 2] * ov02
        dv[r, 1] = v[r, 0] * ov01 - v[r, 2] * ov12
        dv[r, 2] = v[r, 0] * ov02 + v[r, 1] * ov12


# ---------------------------------------------------------------------------
# particle -> grid scatter (mass, APIC momentum)
# ---------------------------------------------------------------------------


@njit(cache=True)
def p2g_kernel(
    x, v, bmat, mass, x_t, v_t, b_t,
    gm, gmom, gm_t, gmom_t,
    origin, dx, err,
):
    """Scatter particle mass and APIC momentum to this object's grid.

    The affine momentum term uses B D^-1 with the closed-form quadratic
    B-spline D = (dx^2/4) I.  The zeroing of the target sub-box is done by
    the caller.  Flags out-of-domain particles (stencil needs one spare node
    ring for contact normals).
    """
    n = x.shape[0]
    p_w = x_t.shape[2]
    nx = gm.shape[0]
    ny = gm.shape[1]
    nz = gm.shape[2]
    inv_dx = 1.0 / dx
    d_inv = 4.0 * inv_dx * inv_dx

    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    gx = np.empty(3)
    gy = np.empty(3)
    gz = np.empty(3)
    # per-particle, node-independent tangent scratch
    xt_l = np.empty((3, p_w)) if p_w > 0 else np.empty((3, 1))
    vt_l = np.empty((3, p_w)) if p_w > 0 else np.empty((3, 1))
    bt_l = np.empty((3, 3, p_w)) if p_w > 0 else np.empty((3, 3, 1))
    cxt_l = np.empty((3, p_w)) if p_w > 0 else np.empty((3, 1))

    for p in range(n):
        fx = (x[p, 0] - origin[0]) * inv_dx
        fy = (x[p, 1] - origin[1]) * inv_dx
        fz = (x[p, 2] - origin[2]) * inv_dx
        bx = int(np.floor(fx - 0.5))
        by = int(np.floor(fy - 0.5))
        bz = int(np.floor(fz - 0.5))
        if (
            bx < 1 or bx + 3 > nx - 1
            or by < 1 or by + 3 > ny - 1
            or bz < 1 or bz + 3 > nz - 1
        ):
            if err[0] == ERR_OK:
                err[0] = ERR_OOB
                err[1] = p
            continue

        rx = fx - bx
        ry = fy - by
        rz = fz - bz
        wx[0] = 0.5 * (1.5 - rx) * (1.5 - rx)
        wx[1] = 0.75 - (rx - 1.0) * (rx - 1.0)
        wx[2] = 0.5 * (rx - 0.5) * (rx - 0.5)
        wy[0] = 0.5 * (1.5 - ry) * (1.5 - ry)
        wy[1] = 0.75 - (ry - 1.0) * (ry - 1.0)
        wy[2] = 0.5 * (ry - 0.5) * (ry - 0.5)
        wz[0] = 0.5 * (1.5 - rz) * (1.5 - rz)
        wz[1] = 0.75 - (rz - 1.0) * (rz - 1.0)
        wz[2] = 0.5 * (rz - 0.5) * (rz - 0.5)
        gx[0] = -(1.5 - rx) * inv_dx
        gx[1] = -2.0 * (rx - 1.0) * inv_dx
        gx[2] = (rx - 0.5) * inv_dx
        gy[0] = -(1.5 - ry) * inv_dx
        gy[1] = -2.0 * (ry - 1.0) * inv_dx
        gy[2] = (ry - 0.5) * inv_dx
        gz[0] = -(1.5 - rz) * inv_dx
        gz[1] = -2.0 * (rz - 1.0) * inv_dx
        gz[2] = (rz - 0.5) * inv_dx

        mp = mass[p]
        v0 = v[p, 0]
        v1 = v[p, 1]
        v2 = v[p, 2]
        c00 = bmat[p, 0, 0] * d_inv
        c01 = bmat[p, 0, 1] * d_inv
        c02 = bmat[p, 0, 2] * d_inv
        c10 = bmat[p, 1, 0] * d_inv
        c11 = bmat[p, 1, 1] * d_inv
        c12 = bmat[p, 1, 2] * d_inv
        c20 = bmat[p, 2, 0] * d_inv
        c21 = bmat[p, 2, 1] * d_inv
        c22 = bmat[p, 2, 2] * d_inv

        for t in range(p_w):
            xt_l[0, t] = x_t[p, 0, t]
            xt_l[1, t] = x_t[p, 1, t]
            xt_l[2, t] = x_t[p, 2, t]
            vt_l[0, t] = v_t[p, 0, t]
            vt_l[1, t] = v_t[p, 1, t]
            vt_l[2, t] = v_t[p, 2, t]
            for r in range(3):
                bt_l[r, 0, t] = b_t[p, r, 0, t] * d_inv
                bt_l[r, 1, t] = b_t[p, r, 1, t] * d_inv
                bt_l[r, 2, t] = b_t[p, r, 2, t] * d_inv
            cxt_l[0, t] = c00 * xt_l[0, t] + c01 * xt_l[1, t] + c02 * xt_l[2, t]
            cxt_l[1, t] = c10 * xt_l[0, t] + c11 * xt_l[1, t] + c12 * xt_l[2, t]
            cxt_l[2, t] = c20 * xt_l[0, t] + c21 * xt_l[1, t] + c22 * xt_l[2, t]

        for i in range(3):
            wxi = wx[i]
            r0 = origin[0] + (bx + i) * dx - x[p, 0]
            for j in range(3):
                wxy = wxi * wy[j]
                r1 = origin[1] + (by + j) * dx - x[p, 1]
                for k in range(3):
                    w = wxy * wz[k]
                    r2 = origin[2] + (bz + k) * dx - x[p, 2]
                    ii = bx + i
                    jj = by + j
                    kk = bz + k
                    wm = w * mp
                    af0 = c00 * r0 + c01 * r1 + c02 * r2
                    af1 = c10 * r0 + c11 * r1 + c12 * r2
                    af2 = c20 * r0 + c21 * r1 + c22 * r2
                    gm[ii, jj, kk] += wm
                    gmom[ii, jj, kk, 0] += wm * (v0 + af0)
                    gmom[ii, jj, kk, 1] += wm * (v1 + af1)
                    gmom[ii, jj, kk, 2] += wm * (v2 + af2)

                    if p_w > 0:
                        gw0 = gx[i] * wy[j] * wz[k]
                        gw1 = wx[i] * gy[j] * wz[k]
                        gw2 = wx[i] * wy[j] * gz[k]
                        for t in range(p_w):
                            dw = gw0 * xt_l[0, t] + gw1 * xt_l[1, t] + gw2 * xt_l[2, t]
                            dwm = dw * mp
                            # d(affine term): dB D^-1 r - B D^-1 dx_p
                            daf0 = (
                                bt_l[0, 0, t] * r0 + bt_l[0, 1, t] * r1 + bt_l[0, 2, t] * r2
                            ) - cxt_l[0, t]
                            daf1 = (
                                bt_l[1, 0, t] * r0 + bt_l[1, 1, t] * r1 + bt_l[1, 2, t] * r2
                            ) - cxt_l[1, t]
                            daf2 = (
                                bt_l[2, 0, t] * r0 + bt_l[2, 1, t] * r1 + bt_l[2, 2, t] * r2
                            ) - cxt_l[2, t]
                            gm_t[ii, jj, kk, t] += dwm
                            gmom_t[ii, jj, kk, 0, t] += dwm * (v0 + af0) + wm * (
                                vt_l[0, t] + daf0
                            )
                            gmom_t[ii, jj, kk, 1, t] += dwm * (v1 + af1) + wm * (
                                vt_l[1, t] + daf1
                            )
                            gmom_t[ii, jj, kk, 2, t] += dwm * (v2 + af2) + wm * (
                                vt_l[2, t] + daf2
                            )


# ---------------------------------------------------------------------------
# per-particle stress -> grid force scatter
# ---------------------------------------------------------------------------


@njit(cache=True)
def forces_kernel(
    x, fdef, vol0, x_t, f_t,
    usvd, sig, vsvd, u_t, sig_t, v_t,
    jfl, jfl_t, gradv, gradv_t,
    gf, gf_t,
    mat_code, mu, lam, visc, kappa,
    mu_t, lam_t, visc_t, kappa_t,
    origin, dx, err,
):
    """Evaluate volume-scaled stress per particle and scatter grid forces.

    f_i = -V0 * tau * grad w, with tau the Kirchhoff-type stress (J T).
    Hencky-based materials reuse the cached decomposition of the current
    (already projected) deformation gradient; fluids use the cached velocity
    gradient and tracked volume ratio.
    """
    n = x.shape[0]
    p_w = x_t.shape[2]
    nx = gf.shape[0]
    ny = gf.shape[1]
    nz = gf.shape[2]
    inv_dx = 1.0 / dx

    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    gx = np.empty(3)
    gy = np.empty(3)
    gz = np.empty(3)
    hx = np.empty(3)
    hy = np.empty(3)
    hz = np.empty(3)
    tau = np.empty((3, 3))
    tau_t = np.empty((3, 3, p_w)) if p_w > 0 else np.empty((3, 3, 1))

    for p in range(n):
        # ---- stress tau = J*T and its tangents -------------------------
        if mat_code == MAT_ELASTIC:
            f00 = fdef[p, 0, 0]
            f01 = fdef[p, 0, 1]
            f02 = fdef[p, 0, 2]
            f10 = fdef[p, 1, 0]
            f11 = fdef[p, 1, 1]
            f12 = fdef[p, 1, 2]
            f20 = fdef[p, 2, 0]
            f21 = fdef[p, 2, 1]
            f22 = fdef[p, 2, 2]
            # cofactor matrix (d det / d F)
            co00 = f11 * f22 - f12 * f21
            co01 = f12 * f20 - f10 * f22
            co02 = f10 * f21 - f11 * f20
            co10 = f02 * f21 - f01 * f22
            co11 = f00 * f22 - f02 * f20
            co12 = f01 * f20 - f00 * f21
            co20 = f01 * f12 - f02 * f11
            co21 = f02 * f10 - f00 * f12
            co22 = f00 * f11 - f01 * f10
            jdet = f00 * co00 + f01 * co01 + f02 * co02
            if jdet <= 0.0:
                if err[0] == ERR_OK:
                    err[0] = ERR_INVERTED
                    err[1] = p
                continue
            logj = np.log(jdet)
            diag_term = lam * logj - mu
            tau[0, 0] = mu * (f00 * f00 + f01 * f01 + f02 * f02) + diag_term
            tau[1, 1] = mu * (f10 * f10 + f11 * f11 + f12 * f12) + diag_term
            tau[2, 2] = mu * (f20 * f20 + f21 * f21 + f22 * f22) + diag_term
            tau[0, 1] = mu * (f00 * f10 + f01 * f11 + f02 * f12)
            tau[0, 2] = mu * (f00 * f20 + f01 * f21 + f02 * f22)
            tau[1, 2] = mu * (f10 * f20 + f11 * f21 + f12 * f22)
            tau[1, 0] = tau[0, 1]
            tau[2, 0] = tau[0, 2]
            tau[2, 1] = tau[1, 2]
            for t in range(p_w):
                dj = (
                    co00 * f_t[p, 0, 0, t]
                    + co01 * f_t[p, 0, 1, t]
                    + co02 * f_t[p, 0, 2, t]
                    + co10 * f_t[p, 1, 0, t]
                    + co11 * f_t[p, 1, 1, t]
                    + co12 * f_t[p, 1, 2, t]
                    + co20 * f_t[p, 2, 0, t]
                    + co21 * f_t[p, 2, 1, t]
                    + co22 * f_t[p, 2, 2, t]
                )
                ddiag = lam_t[t] * logj + lam * dj / jdet - mu_t[t]
                for r in range(3):
                    for c in range(r, 3):
                        ffd = (
                            fdef[p, r, 0] * f_t[p, c, 0, t]
                            + fdef[p, r, 1] * f_t[p, c, 1, t]
                            + fdef[p, r, 2] * f_t[p, c, 2, t]
                            + fdef[p, c, 0] * f_t[p, r, 0, t]
                            + fdef[p, c, 1] * f_t[p, r, 1, t]
                            + fdef[p, c, 2] * f_t[p, r, 2, t]
                        )
                        ff = (
                            fdef[p, r, 0] * fdef[p, c, 0]
                            + fdef[p, r, 1] * fdef[p, c, 1]
                            + fdef[p, r, 2] * fdef[p, c, 2]
                        )
                        val = mu_t[t] * ff + mu * ffd
                        if r == c:
                            val += ddiag
                        tau_t[r, c, t] = val
                        tau_t[c, r, t] = val
        elif mat_code == MAT_FLUID:
            jv = jfl[p]
            if jv <= 0.0:
                if err[0] == ERR_OK:
                    err[0] = ERR_INVERTED
                    err[1] = p
                continue
            jm6 = jv ** (-6.0)
            vol_term = kappa * (jv - jm6)
            for r in range(3):
                for c in range(3):
                    tau[r, c] = 0.5 * visc * (gradv[p, r, c] + gradv[p, c, r])
                tau[r, r] += vol_term
            for t in range(p_w):
                dvol = kappa_t[t] * (jv - jm6) + kappa * (
                    1.0 + 6.0 * jm6 / jv
                ) * jfl_t[p, t]
                for r in range(3):
                    for c in range(3):
                        tau_t[r, c, t] = 0.5 * visc_t[t] * (
                            gradv[p, r, c] + gradv[p, c, r]
                        ) + 0.5 * visc * (gradv_t[p, r, c, t] + gradv_t[p, c, r, t])
                    tau_t[r, r, t] += dvol
        else:
            # Hencky-strain elasticity on the cached decomposition
            s0 = sig[p, 0]
            s1 = sig[p, 1]
            s2 = sig[p, 2]
            if s2 <= 0.0:
                if err[0] == ERR_OK:
                    err[0] = ERR_INVERTED
                    err[1] = p
                continue
            e0 = np.log(s0)
            e1 = np.log(s1)
            e2 = np.log(s2)
            tr = e0 + e1 + e2
            c0 = 2.0 * mu * e0 + lam * tr
            c1 = 2.0 * mu * e1 + lam * tr
            c2 = 2.0 * mu * e2 + lam * tr
            for r in range(3):
                ur0 = usvd[p, r, 0] * c0
                ur1 = usvd[p, r, 1] * c1
                ur2 = usvd[p, r, 2] * c2
                for c in range(r, 3):
                    val = (
                        ur0 * usvd[p, c, 0]
                        + ur1 * usvd[p, c, 1]
                        + ur2 * usvd[p, c, 2]
                    )
                    tau[r, c] = val
                    tau[c, r] = val
            for t in range(p_w):
                de0 = sig_t[p, 0, t] / s0
                de1 = sig_t[p, 1, t] / s1
                de2 = sig_t[p, 2, t] / s2
                dtr = de0 + de1 + de2
                dc0 = 2.0 * (mu_t[t] * e0 + mu * de0) + lam_t[t] * tr + lam * dtr
                dc1 = 2.0 * (mu_t[t] * e1 + mu * de1) + lam_t[t] * tr + lam * dtr
                dc2 = 2.0 * (mu_t[t] * e2 + mu * de2) + lam_t[t] * tr + lam * dtr
                for r in range(3):
                    for c in range(r, 3):
                        val = (
                            u_t[p, r, 0, t] * c0 * usvd[p, c, 0]
                            + u_t[p, r, 1, t] * c1 * usvd[p, c, 1]
                            + u_t[p, r, 2, t] * c2 * usvd[p, c, 2]
                            + usvd[p, r, 0] * dc0 * usvd[p, c, 0]
                            + usvd[p, r, 1] * dc1 * usvd[p, c, 1]
                            + usvd[p, r, 2] * dc2 * usvd[p, c, 2]
                            + usvd[p, r, 0] * c0 * u_t[p, c, 0, t]
                            + usvd[p, r, 1] * c1 * u_t[p, c, 1, t]
                            + usvd[p, r, 2] * c2 * u_t[p, c, 2, t]
                        )
                        tau_t[r, c, t] = val
                        tau_t[c, r, t] = val

        # ---- scatter ----------------------------------------------------
        fx = (x[p, 0] - origin[0]) * inv_dx
        fy = (x[p, 1] - origin[1]) * inv_dx
        fz = (x[p, 2] - origin[2]) * inv_dx
        bx = int(np.floor(fx - 0.5))
        by = int(np.floor(fy - 0.5))
        bz = int(np.floor(fz - 0.5))
        if (
            bx < 1 or bx + 3 > nx - 1
            or by < 1 or by + 3 > ny - 1
            or bz < 1 or bz + 3 > nz - 1
        ):
            if err[0] == ERR_OK:
                err[0] = ERR_OOB
                err[1] = p
            continue
        rx = fx - bx
        ry = fy - by
        rz = fz - bz
        wx[0] = 0.5 * (1.5 - rx) * (1.5 - rx)
        wx[1] = 0.75 - (rx - 1.0) * (rx - 1.0)
        wx[2] = 0.5 * (rx - 0.5) * (rx - 0.5)
        wy[0] = 0.5 * (1.5 - ry) * (1.5 - ry)
        wy[1] = 0.75 - (ry - 1.0) * (ry - 1.0)
        wy[2] = 0.5 * (ry - 0.5) * (ry - 0.5)
        wz[0] = 0.5 * (1.5 - rz) * (1.5 - rz)
        wz[1] = 0.75 - (rz - 1.0) * (rz - 1.0)
        wz[2] = 0.5 * (rz - 0.5) * (rz - 0.5)
        gx[0] = -(1.5 - rx) * inv_dx
        gx[1] = -2.0 * (rx - 1.0) * inv_dx
        gx[2] = (rx - 0.5) * inv_dx
        gy[0] = -(1.5 - ry) * inv_dx
        gy[1] = -2.0 * (ry - 1.0) * inv_dx
        gy[2] = (ry - 0.5) * inv_dx
        gz[0] = -(1.5 - rz) * inv_dx
        gz[1] = -2.0 * (rz - 1.0) * inv_dx
        gz[2] = (rz - 0.5) * inv_dx
        hx[0] = inv_dx * inv_dx
        hx[1] = -2.0 * inv_dx * inv_dx
        hx[2] = inv_dx * inv_dx
        hy[0] = hx[0]
        hy[1] = hx[1]
        hy[2] = hx[2]
        hz[0] = hx[0]
        hz[1] = hx[1]
        hz[2] = hx[2]

        volp = vol0[p]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    ii = bx + i
                    jj = by + j
                    kk = bz + k
                    gw0 = gx[i] * wy[j] * wz[k]
                    gw1 = wx[i] * gy[j] * wz[k]
                    gw2 = wx[i] * wy[j] * gz[k]
                    gf[ii, jj, kk, 0] -= volp * (
                        tau[0, 0] * gw0 + tau[0, 1] * gw1 + tau[0, 2] * gw2
                    )
                    gf[ii, jj, kk, 1] -= volp * (
                        tau[1, 0] * gw0 + tau[1, 1] * gw1 + tau[1, 2] * gw2
                    )
                    gf[ii, jj, kk, 2] -= volp * (
                        tau[2, 0] * gw0 + tau[2, 1] * gw1 + tau[2, 2] * gw2
                    )
                    if p_w > 0:
                        # grad-w tangents via the (separable) weight Hessian
                        hxx = hx[i] * wy[j] * wz[k]
                        hxy = gx[i] * gy[j] * wz[k]
                        hxz = gx[i] * wy[j] * gz[k]
                        hyy = wx[i] * hy[j] * wz[k]
                        hyz = wx[i] * gy[j] * gz[k]
                        hzz = wx[i] * wy[j] * hz[k]
                        for t in range(p_w):
                            xt0 = x_t[p, 0, t]
                            xt1 = x_t[p, 1, t]
                            xt2 = x_t[p, 2, t]
                            dg0 = hxx * xt0 + hxy * xt1 + hxz * xt2
                            dg1 = hxy * xt0 + hyy * xt1 + hyz * xt2
                            dg2 = hxz * xt0 + hyz * xt1 + hzz * xt2
                            gf_t[ii, jj, kk, 0, t] -= volp * (
                                tau_t[0, 0, t] * gw0
                                + tau_t[0, 1, t] * gw1
                                + tau_t[0, 2, t] * gw2
                                + tau[0, 0] * dg0
                                + tau[0, 1] * dg1
                                + tau[0, 2] * dg2
                            )
                            gf_t[ii, jj, kk, 1, t] -= volp * (
                                tau_t[1, 0, t] * gw0
                                + tau_t[1, 1, t] * gw1
                                + tau_t[1, 2, t] * gw2
                                + tau[1, 0] * dg0
                                + tau[1, 1] * dg1
                                + tau[1, 2] * dg2
                            )
                            gf_t[ii, jj, kk, 2, t] -= volp * (
                                tau_t[2, 0, t] * gw0
                                + tau_t[2, 1, t] * gw1
                                + tau_t[2, 2, t] * gw2
                                + tau[2, 0] * dg0
                                + tau[2, 1] * dg1
                                + tau[2, 2] * dg2
                            )


# ---------------------------------------------------------------------------
# grid momentum -> velocity update, gravity, floor boundary
# ---------------------------------------------------------------------------

FLOOR_STICKY = 0
FLOOR_SLIP = 1
FLOOR_SEPARATE = 2


@njit(cache=True)
def grid_update_kernel(
    gm, gmom, gf, gv, gm_t, gmom_t, gf_t, gv_t,
    ibox, dt, gravity, origin, dx,
    floor_height, floor_friction, floor_mode,
):
    """Explicit velocity update v = mom/m + dt (f/m + g) with floor handling.

    Nodes lighter than MASS_EPS get zero velocity.  Floor contact removes the
    approaching normal component; 'separate' mode applies a Coulomb clamp to
    the tangential part, 'sticky' zeroes everything, 'slip' only the normal.
    """
    p_w = gm_t.shape[3]
    for ii in range(ibox[0, 0], ibox[1, 0]):
        for jj in range(ibox[0, 1], ibox[1, 1]):
            for kk in range(ibox[0, 2], ibox[1, 2]):
                m = gm[ii, jj, kk]
                if m <= MASS_EPS:
                    gv[ii, jj, kk, 0] = 0.0
                    gv[ii, jj, kk, 1] = 0.0
                    gv[ii, jj, kk, 2] = 0.0
                    for t in range(p_w):
                        gv_t[ii, jj, kk, 0, t] = 0.0
                        gv_t[ii, jj, kk, 1, t] = 0.0
                        gv_t[ii, jj, kk, 2, t] = 0.0
                    continue
                inv_m = 1.0 / m
                v0 = gmom[ii, jj, kk, 0] * inv_m + dt * gf[ii, jj, kk, 0] * inv_m + dt * gravity[0]
                v1 = gmom[ii, jj, kk, 1] * inv_m + dt * gf[ii, jj, kk, 1] * inv_m + dt * gravity[1]
                v2 = gmom[ii, jj, kk, 2] * inv_m + dt * gf[ii, jj, kk, 2] * inv_m + dt * gravity[2]
                for t in range(p_w):
                    dm = gm_t[ii, jj, kk, t]
                    gv_t[ii, jj, kk, 0, t] = (
                        gmom_t[ii, jj, kk, 0, t]
                        - gmom[ii, jj, kk, 0] * inv_m * dm
                        + dt * (gf_t[ii, jj, kk, 0, t] - gf[ii, jj, kk, 0] * inv_m * dm)
                    ) * inv_m
                    gv_t[ii, jj, kk, 1, t] = (
                        gmom_t[ii, jj, kk, 1, t]
                        - gmom[ii, jj, kk, 1] * inv_m * dm
                        + dt * (gf_t[ii, jj, kk, 1, t] - gf[ii, jj, kk, 1] * inv_m * dm)
                    ) * inv_m
                    gv_t[ii, jj, kk, 2, t] = (
                        gmom_t[ii, jj, kk, 2, t]
                        - gmom[ii, jj, kk, 2] * inv_m * dm
                        + dt * (gf_t[ii, jj, kk, 2, t] - gf[ii, jj, kk, 2] * inv_m * dm)
                    ) * inv_m

                z_node = origin[2] + kk * dx
                if z_node <= floor_height and v2 < 0.0:
                    if floor_mode == FLOOR_STICKY:
                        v0 = 0.0
                        v1 = 0.0
                        v2 = 0.0
                        for t in range(p_w):
                            gv_t[ii, jj, kk, 0, t] = 0.0
                            gv_t[ii, jj, kk, 1, t] = 0.0
                            gv_t[ii, jj, kk, 2, t] = 0.0
                    elif floor_mode == FLOOR_SLIP:
                        v2 = 0.0
                        for t in range(p_w):
                            gv_t[ii, jj, kk, 2, t] = 0.0
                    else:  # separate with Coulomb friction
                        vn_rem = -v2
                        tmag = np.sqrt(v0 * v0 + v1 * v1)
                        if tmag > 0.0 and floor_friction * vn_rem < tmag:
                            scale = (tmag - floor_friction * vn_rem) / tmag
                            for t in range(p_w):
                                dt0 = gv_t[ii, jj, kk, 0, t]
                                dt1 = gv_t[ii, jj, kk, 1, t]
                                dtmag = (v0 * dt0 + v1 * dt1) / tmag
                                dvn = -gv_t[ii, jj, kk, 2, t]
                                dscale = (
                                    (dtmag - floor_friction * dvn) / tmag
                                    - (tmag - floor_friction * vn_rem) * dtmag / (tmag * tmag)
                                )
                                gv_t[ii, jj, kk, 0, t] = dt0 * scale + v0 * dscale
                                gv_t[ii, jj, kk, 1, t] = dt1 * scale + v1 * dscale
                                gv_t[ii, jj, kk, 2, t] = 0.0
                            v0 *= scale
                            v1 *= scale
                        else:
                            v0 = 0.0
                            v1 = 0.0
                            for t in range(p_w):
                                gv_t[ii, jj, kk, 0, t] = 0.0
                                gv_t[ii, jj, kk, 1, t] = 0.0
                                gv_t[ii, jj, kk, 2, t] = 0.0
                        v2 = 0.0
                        for t in range(p_w):
                            gv_t[ii, jj, kk, 2, t] = 0.0
                gv[ii, jj, kk, 0] = v0
                gv[ii, jj, kk, 1] = v1
                gv[ii, jj, kk, 2] = v2


# ---------------------------------------------------------------------------
# pairwise grid contact with Coulomb friction
# ---------------------------------------------------------------------------


@njit(cache=True)
def contact_kernel(
    gma, gva, gma_t, gva_t,
    gmb, gvb, gmb_t, gvb_t,
    box, dx, mu_pair, mu_pair_t,
):
    """Resolve contact between two objects' grids on the overlap box.

    Where both grids carry mass, an approaching relative normal velocity is
    removed by an equal-and-opposite (perfectly inelastic) momentum exchange,
    then Coulomb friction clamps the relative tangential velocity.  The
    contact normal is the difference of the two mass-field gradients; if that
    is degenerate, the relative velocity direction is used.
    """
    p_w = gma_t.shape[3]
    inv2dx = 1.0 / (2.0 * dx)
    dn = np.empty((3, p_w)) if p_w > 0 else np.empty((3, 1))

    for ii in range(box[0, 0], box[1, 0]):
        for jj in range(box[0, 1], box[1, 1]):
            for kk in range(box[0, 2], box[1, 2]):
                ma = gma[ii, jj, kk]
                mb = gmb[ii, jj, kk]
                if ma <= MASS_EPS or mb <= MASS_EPS:
                    continue
                # mass-field gradients by central differences
                gax = (gma[ii + 1, jj, kk] - gma[ii - 1, jj, kk]) * inv2dx
                gay = (gma[ii, jj + 1, kk] - gma[ii, jj - 1, kk]) * inv2dx
                gaz = (gma[ii, jj, kk + 1] - gma[ii, jj, kk - 1]) * inv2dx
                gbx = (gmb[ii + 1, jj, kk] - gmb[ii - 1, jj, kk]) * inv2dx
                gby = (gmb[ii, jj + 1, kk] - gmb[ii, jj - 1, kk]) * inv2dx
                gbz = (gmb[ii, jj, kk + 1] - gmb[ii, jj, kk - 1]) * inv2dx
                ndx = gbx - gax
                ndy = gby - gay
                ndz = gbz - gaz
                nlen = np.sqrt(ndx * ndx + ndy * ndy + ndz * ndz)

                va0 = gva[ii, jj, kk, 0]
                va1 = gva[ii, jj, kk, 1]
                va2 = gva[ii, jj, kk, 2]
                vb0 = gvb[ii, jj, kk, 0]
                vb1 = gvb[ii, jj, kk, 1]
                vb2 = gvb[ii, jj, kk, 2]
                vr0 = va0 - vb0
                vr1 = va1 - vb1
                vr2 = va2 - vb2

                use_vel_normal = nlen < 1e-9
                if use_vel_normal:
                    vlen = np.sqrt(vr0 * vr0 + vr1 * vr1 + vr2 * vr2)
                    if vlen < 1e-15:
                        continue
                    ndx = vr0
                    ndy = vr1
                    ndz = vr2
                    nlen = vlen
                n0 = ndx / nlen
                n1 = ndy / nlen
                n2 = ndz / nlen

                vn = vr0 * n0 + vr1 * n1 + vr2 * n2
                if vn <= 0.0:
                    continue  # separating or resting

                # tangents of the normal direction (smooth in positions)
                for t in range(p_w):
                    if use_vel_normal:
                        dvr0 = gva_t[ii, jj, kk, 0, t] - gvb_t[ii, jj, kk, 0, t]
                        dvr1 = gva_t[ii, jj, kk, 1, t] - gvb_t[ii, jj, kk, 1, t]
                        dvr2 = gva_t[ii, jj, kk, 2, t] - gvb_t[ii, jj, kk, 2, t]
                        dnd0 = dvr0
                        dnd1 = dvr1
                        dnd2 = dvr2
                    else:
                        dgax = (gma_t[ii + 1, jj, kk, t] - gma_t[ii - 1, jj, kk, t]) * inv2dx
                        dgay = (gma_t[ii, jj + 1, kk, t] - gma_t[ii, jj - 1, kk, t]) * inv2dx
                        dgaz = (gma_t[ii, jj, kk + 1, t] - gma_t[ii, jj, kk - 1, t]) * inv2dx
                        dgbx = (gmb_t[ii + 1, jj, kk, t] - gmb_t[ii - 1, jj, kk, t]) * inv2dx
                        dgby = (gmb_t[ii, jj + 1, kk, t] - gmb_t[ii, jj - 1, kk, t]) * inv2dx
                        dgbz = (gmb_t[ii, jj, kk + 1, t] - gmb_t[ii, jj, kk - 1, t]) * inv2dx
                        dnd0 = dgbx - dgax
                        dnd1 = dgby - dgay
                        dnd2 = dgbz - dgaz
                    dot = n0 * dnd0 + n1 * dnd1 + n2 * dnd2
                    dn[0, t] = (dnd0 - n0 * dot) / nlen
                    dn[1, t] = (dnd1 - n1 * dot) / nlen
                    dn[2, t] = (dnd2 - n2 * dot) / nlen

                msum = ma + mb
                ca = mb / msum
                cb = ma / msum

                # normal exchange: va -= ca*vn*n, vb += cb*vn*n
                na0 = va0 - ca * vn * n0
                na1 = va1 - ca * vn * n1
                na2 = va2 - ca * vn * n2
                nb0 = vb0 + cb * vn * n0
                nb1 = vb1 + cb * vn * n1
                nb2 = vb2 + cb * vn * n2

                # post-exchange relative tangential velocity
                tr0 = vr0 - vn * n0
                tr1 = vr1 - vn * n1
                tr2 = vr2 - vn * n2
                tmag = np.sqrt(tr0 * tr0 + tr1 * tr1 + tr2 * tr2)
                full_stop = not (tmag > 0.0 and mu_pair * vn < tmag)
                if full_stop:
                    red = tmag
                else:
                    red = mu_pair * vn

                if tmag > 0.0:
                    th0 = tr0 / tmag
                    th1 = tr1 / tmag
                    th2 = tr2 / tmag
                else:
                    th0 = 0.0
                    th1 = 0.0
                    th2 = 0.0

                for t in range(p_w):
                    dva0 = gva_t[ii, jj, kk, 0, t]
                    dva1 = gva_t[ii, jj, kk, 1, t]
                    dva2 = gva_t[ii, jj, kk, 2, t]
                    dvb0 = gvb_t[ii, jj, kk, 0, t]
                    dvb1 = gvb_t[ii, jj, kk, 1, t]
                    dvb2 = gvb_t[ii, jj, kk, 2, t]
                    dvr0 = dva0 - dvb0
                    dvr1 = dva1 - dvb1
                    dvr2 = dva2 - dvb2
                    dma = gma_t[ii, jj, kk, t]
                    dmb = gmb_t[ii, jj, kk, t]
                    dmsum = dma + dmb
                    dca = (dmb - ca * dmsum) / msum
                    dcb = (dma - cb * dmsum) / msum
                    dvn = (
                        dvr0 * n0 + dvr1 * n1 + dvr2 * n2
                        + vr0 * dn[0, t] + vr1 * dn[1, t] + vr2 * dn[2, t]
                    )
                    dna0 = dva0 - dca * vn * n0 - ca * dvn * n0 - ca * vn * dn[0, t]
                    dna1 = dva1 - dca * vn * n1 - ca * dvn * n1 - ca * vn * dn[1, t]
                    dna2 = dva2 - dca * vn * n2 - ca * dvn * n2 - ca * vn * dn[2, t]
                    dnb0 = dvb0 + dcb * vn * n0 + cb * dvn * n0 + cb * vn * dn[0, t]
                    dnb1 = dvb1 + dcb * vn * n1 + cb * dvn * n1 + cb * vn * dn[1, t]
                    dnb2 = dvb2 + dcb * vn * n2 + cb * dvn * n2 + cb * vn * dn[2, t]

                    dtr0 = dvr0 - dvn * n0 - vn * dn[0, t]
                    dtr1 = dvr1 - dvn * n1 - vn * dn[1, t]
                    dtr2 = dvr2 - dvn * n2 - vn * dn[2, t]
                    if tmag > 0.0:
                        dtmag = (tr0 * dtr0 + tr1 * dtr1 + tr2 * dtr2) / tmag
                        dth0 = (dtr0 - th0 * dtmag) / tmag
                        dth1 = (dtr1 - th1 * dtmag) / tmag
                        dth2 = (dtr2 - th2 * dtmag) / tmag
                    else:
                        dtmag = 0.0
                        dth0 = 0.0
                        dth1 = 0.0
                        dth2 = 0.0
                    if full_stop:
                        dred = dtmag
                    else:
                        dred = mu_pair_t[t] * vn + mu_pair * dvn

                    gva_t[ii, jj, kk, 0, t] = dna0 - dca * red * th0 - ca * dred * th0 - ca * red * dth0
                    gva_t[ii, jj, kk, 1, t] = dna1 - dca * red * th1 - ca * dred * th1 - ca * red * dth1
                    gva_t[ii, jj, kk, 2, t] = dna2 - dca * red * th2 - ca * dred * th2 - ca * red * dth2
                    gvb_t[ii, jj, kk, 0, t] = dnb0 + dcb * red * th0 + cb * dred * th0 + cb * red * dth0
                    gvb_t[ii, jj, kk, 1, t] = dnb1 + dcb * red * th1 + cb * dred * th1 + cb * red * dth1
                    gvb_t[ii, jj, kk, 2, t] = dnb2 + dcb * red * th2 + cb * dred * th2 + cb * red * dth2

                gva[ii, jj, kk, 0] = na0 - ca * red * th0
                gva[ii, jj, kk, 1] = na1 - ca * red * th1
                gva[ii, jj, kk, 2] = na2 - ca * red * th2
                gvb[ii, jj, kk, 0] = nb0 + cb * red * th0
                gvb[ii, jj, kk, 1] = nb1 + cb * red * th1
                gvb[ii, jj, kk, 2] = nb2 + cb * red * th2


# ---------------------------------------------------------------------------
# grid -> particle gather, deformation update, plastic projection, advection
# ---------------------------------------------------------------------------


@njit(cache=True)
def g2p_kernel(
    x, v, fdef, bmat, x_t, v_t, f_t, b_t,
    usvd, sig, vsvd, u_t, sig_t, v_svd_t,
    jfl, jfl_t, gradv_c, gradv_c_t,
    gv, gv_t,
    mat_code, mu, lam, tau_y, alpha_dp,
    mu_t, lam_t, tau_y_t, alpha_dp_t,
    origin, dx, dt, err,
):
    """Gather velocities back to particles, update F, project, advect.

    F <- (I + dt * grad v) F, then the family's plastic projection runs in
    principal logarithmic strain space.  The projected decomposition is
    cached for the next stress evaluation; fluids collapse F to a pure
    volume ratio.  The pre-update velocity gradient is cached for the
    viscous stress next step.
    """
    n = x.shape[0]
    p_w = x_t.shape[2]
    nx = gv.shape[0]
    ny = gv.shape[1]
    nz = gv.shape[2]
    inv_dx = 1.0 / dx

    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    gx = np.empty(3)
    gy = np.empty(3)
    gz = np.empty(3)
    hxv = np.empty(3)
    vp = np.empty(3)
    gvnew = np.empty((3, 3))
    bnew = np.empty((3, 3))
    ftr = np.empty((3, 3))
    vp_t = np.empty((3, p_w)) if p_w > 0 else np.empty((3, 1))
    gvn_t = np.empty((3, 3, p_w)) if p_w > 0 else np.empty((3, 3, 1))
    bn_t = np.empty((3, 3, p_w)) if p_w > 0 else np.empty((3, 3, 1))
    ftr_t = np.empty((3, 3, p_w)) if p_w > 0 else np.empty((3, 3, 1))
    uu = np.empty((3, 3))
    ss = np.empty(3)
    vv = np.empty((3, 3))
    duu = np.empty((3, 3))
    dss = np.empty(3)
    dvv = np.empty((3, 3))
    da_l = np.empty((3, 3))
    eps = np.empty(3)
    deps = np.empty(3)
    epro = np.empty(3)
    depro = np.empty(3)
    xt_l = np.empty((3, p_w)) if p_w > 0 else np.empty((3, 1))

    for p in range(n):
        fx = (x[p, 0] - origin[0]) * inv_dx
        fy = (x[p, 1] - origin[1]) * inv_dx
        fz = (x[p, 2] - origin[2]) * inv_dx
        bx = int(np.floor(fx - 0.5))
        by = int(np.floor(fy - 0.5))
        bz = int(np.floor(fz - 0.5))
        if (
            bx < 1 or bx + 3 > nx - 1
            or by < 1 or by + 3 > ny - 1
            or bz < 1 or bz + 3 > nz - 1
        ):
            if err[0] == ERR_OK:
                err[0] = ERR_OOB
                err[1] = p
            continue
        rx = fx - bx
        ry = fy - by
        rz = fz - bz
        wx[0] = 0.5 * (1.5 - rx) * (1.5 - rx)
        wx[1] = 0.75 - (rx - 1.0) * (rx - 1.0)
        wx[2] = 0.5 * (rx - 0.5) * (rx - 0.5)
        wy[0] = 0.5 * (1.5 - ry) * (1.5 - ry)
        wy[1] = 0.75 - (ry - 1.0) * (ry - 1.0)
        wy[2] = 0.5 * (ry - 0.5) * (ry - 0.5)
        wz[0] = 0.5 * (1.5 - rz) * (1.5 - rz)
        wz[1] = 0.75 - (rz - 1.0) * (rz - 1.0)
        wz[2] = 0.5 * (rz - 0.5) * (rz - 0.5)
        gx[0] = -(1.5 - rx) * inv_dx
        gx[1] = -2.0 * (rx - 1.0) * inv_dx
        gx[2] = (rx - 0.5) * inv_dx
        gy[0] = -(1.5 - ry) * inv_dx
        gy[1] = -2.0 * (ry - 1.0) * inv_dx
        gy[2] = (ry - 0.5) * inv_dx
        gz[0] = -(1.5 - rz) * inv_dx
        gz[1] = -2.0 * (rz - 1.0) * inv_dx
        gz[2] = (rz - 0.5) * inv_dx
        hxv[0] = inv_dx * inv_dx
        hxv[1] = -2.0 * inv_dx * inv_dx
        hxv[2] = inv_dx * inv_dx

        for r in range(3):
            vp[r] = 0.0
            for c in range(3):
                gvnew[r, c] = 0.0
                bnew[r, c] = 0.0
        for t in range(p_w):
            for r in range(3):
                xt_l[r, t] = x_t[p, r, t]
                vp_t[r, t] = 0.0
                for c in range(3):
                    gvn_t[r, c, t] = 0.0
                    bn_t[r, c, t] = 0.0

        for i in range(3):
            r0 = origin[0] + (bx + i) * dx - x[p, 0]
            for j in range(3):
                r1 = origin[1] + (by + j) * dx - x[p, 1]
                for k in range(3):
                    r2 = origin[2] + (bz + k) * dx - x[p, 2]
                    ii = bx + i
                    jj = by + j
                    kk = bz + k
                    w = wx[i] * wy[j] * wz[k]
                    gw0 = gx[i] * wy[j] * wz[k]
                    gw1 = wx[i] * gy[j] * wz[k]
                    gw2 = wx[i] * wy[j] * gz[k]
                    gv0 = gv[ii, jj, kk, 0]
                    gv1 = gv[ii, jj, kk, 1]
                    gv2 = gv[ii, jj, kk, 2]
                    vp[0] += w * gv0
                    vp[1] += w * gv1
                    vp[2] += w * gv2
                    bnew[0, 0] += w * gv0 * r0
                    bnew[0, 1] += w * gv0 * r1
                    bnew[0, 2] += w * gv0 * r2
                    bnew[1, 0] += w * gv1 * r0
                    bnew[1, 1] += w * gv1 * r1
                    bnew[1, 2] += w * gv1 * r2
                    bnew[2, 0] += w * gv2 * r0
                    bnew[2, 1] += w * gv2 * r1
                    bnew[2, 2] += w * gv2 * r2
                    gvnew[0, 0] += gv0 * gw0
                    gvnew[0, 1] += gv0 * gw1
                    gvnew[0, 2] += gv0 * gw2
                    gvnew[1, 0] += gv1 * gw0
                    gvnew[1, 1] += gv1 * gw1
                    gvnew[1, 2] += gv1 * gw2
                    gvnew[2, 0] += gv2 * gw0
                    gvnew[2, 1] += gv2 * gw1
                    gvnew[2, 2] += gv2 * gw2
                    if p_w > 0:
                        hxx = hxv[i] * wy[j] * wz[k]
                        hxy = gx[i] * gy[j] * wz[k]
                        hxz = gx[i] * wy[j] * gz[k]
                        hyy = wx[i] * hxv[j] * wz[k]
                        hyz = wx[i] * gy[j] * gz[k]
                        hzz = wx[i] * wy[j] * hxv[k]
                        for t in range(p_w):
                            xt0 = xt_l[0, t]
                            xt1 = xt_l[1, t]
                            xt2 = xt_l[2, t]
                            dw = gw0 * xt0 + gw1 * xt1 + gw2 * xt2
                            dg0 = hxx * xt0 + hxy * xt1 + hxz * xt2
                            dg1 = hxy * xt0 + hyy * xt1 + hyz * xt2
                            dg2 = hxz * xt0 + hyz * xt1 + hzz * xt2
                            dv0 = gv_t[ii, jj, kk, 0, t]
                            dv1 = gv_t[ii, jj, kk, 1, t]
                            dv2 = gv_t[ii, jj, kk, 2, t]
                            vp_t[0, t] += dw * gv0 + w * dv0
                            vp_t[1, t] += dw * gv1 + w * dv1
                            vp_t[2, t] += dw * gv2 + w * dv2
                            bn_t[0, 0, t] += dw * gv0 * r0 + w * dv0 * r0 - w * gv0 * xt0
                            bn_t[0, 1, t] += dw * gv0 * r1 + w * dv0 * r1 - w * gv0 * xt1
                            bn_t[0, 2, t] += dw * gv0 * r2 + w * dv0 * r2 - w * gv0 * xt2
                            bn_t[1, 0, t] += dw * gv1 * r0 + w * dv1 * r0 - w * gv1 * xt0
                            bn_t[1, 1, t] += dw * gv1 * r1 + w * dv1 * r1 - w * gv1 * xt1
                            bn_t[1, 2, t] += dw * gv1 * r2 + w * dv1 * r2 - w * gv1 * xt2
                            bn_t[2, 0, t] += dw * gv2 * r0 + w * dv2 * r0 - w * gv2 * xt0
                            bn_t[2, 1, t] += dw * gv2 * r1 + w * dv2 * r1 - w * gv2 * xt1
                            bn_t[2, 2, t] += dw * gv2 * r2 + w * dv2 * r2 - w * gv2 * xt2
                            gvn_t[0, 0, t] += dv0 * gw0 + gv0 * dg0
                            gvn_t[0, 1, t] += dv0 * gw1 + gv0 * dg1
                            gvn_t[0, 2, t] += dv0 * gw2 + gv0 * dg2
                            gvn_t[1, 0, t] += dv1 * gw0 + gv1 * dg0
                            gvn_t[1, 1, t] += dv1 * gw1 + gv1 * dg1
                            gvn_t[1, 2, t] += dv1 * gw2 + gv1 * dg2
                            gvn_t[2, 0, t] += dv2 * gw0 + gv2 * dg0
                            gvn_t[2, 1, t] += dv2 * gw1 + gv2 * dg1
                            gvn_t[2, 2, t] += dv2 * gw2 + gv2 * dg2

        # trial deformation gradient: (I + dt * gradv) @ F
        for r in range(3):
            a0 = dt * gvnew[r, 0]
            a1 = dt * gvnew[r, 1]
            a2 = dt * gvnew[r, 2]
            if r == 0:
                a0 += 1.0
            elif r == 1:
                a1 += 1.0
            else:
                a2 += 1.0
            ftr[r, 0] = a0 * fdef[p, 0, 0] + a1 * fdef[p, 1, 0] + a2 * fdef[p, 2, 0]
            ftr[r, 1] = a0 * fdef[p, 0, 1] + a1 * fdef[p, 1, 1] + a2 * fdef[p, 2, 1]
            ftr[r, 2] = a0 * fdef[p, 0, 2] + a1 * fdef[p, 1, 2] + a2 * fdef[p, 2, 2]
        for t in range(p_w):
            for r in range(3):
                a0 = dt * gvnew[r, 0]
                a1 = dt * gvnew[r, 1]
                a2 = dt * gvnew[r, 2]
                if r == 0:
                    a0 += 1.0
                elif r == 1:
                    a1 += 1.0
                else:
                    a2 += 1.0
                da0 = dt * gvn_t[r, 0, t]
                da1 = dt * gvn_t[r, 1, t]
                da2 = dt * gvn_t[r, 2, t]
                for c in range(3):
                    ftr_t[r, c, t] = (
                        da0 * fdef[p, 0, c]
                        + da1 * fdef[p, 1, c]
                        + da2 * fdef[p, 2, c]
                        + a0 * f_t[p, 0, c, t]
                        + a1 * f_t[p, 1, c, t]
                        + a2 * f_t[p, 2, c, t]
                    )

        # ---- family projection -----------------------------------------
        if mat_code == MAT_ELASTIC:
            for r in range(3):
                for c in range(3):
                    fdef[p, r, c] = ftr[r, c]
            for t in range(p_w):
                for r in range(3):
                    for c in range(3):
                        f_t[p, r, c, t] = ftr_t[r, c, t]
        elif mat_code == MAT_FLUID:
            co00 = ftr[1, 1] * ftr[2, 2] - ftr[1, 2] * ftr[2, 1]
            co01 = ftr[1, 2] * ftr[2, 0] - ftr[1, 0] * ftr[2, 2]
            co02 = ftr[1, 0] * ftr[2, 1] - ftr[1, 1] * ftr[2, 0]
            co10 = ftr[0, 2] * ftr[2, 1] - ftr[0, 1] * ftr[2, 2]
            co11 = ftr[0, 0] * ftr[2, 2] - ftr[0, 2] * ftr[2, 0]
            co12 = ftr[0, 1] * ftr[2, 0] - ftr[0, 0] * ftr[2, 1]
            co20 = ftr[0, 1] * ftr[1, 2] - ftr[0, 2] * ftr[1, 1]
            co21 = ftr[0, 2] * ftr[1, 0] - ftr[0, 0] * ftr[1, 2]
            co22 = ftr[0, 0] * ftr[1, 1] - ftr[0, 1] * ftr[1, 0]
            jdet = ftr[0, 0] * co00 + ftr[0, 1] * co01 + ftr[0, 2] * co02
            if jdet <= 0.0:
                if err[0] == ERR_OK:
                    err[0] = ERR_INVERTED
                    err[1] = p
                continue
            cbrt = jdet ** (1.0 / 3.0)
            for r in range(3):
                for c in range(3):
                    fdef[p, r, c] = 0.0
                fdef[p, r, r] = cbrt
            jfl[p] = jdet
            for t in range(p_w):
                dj = (
                    co00 * ftr_t[0, 0, t]
                    + co01 * ftr_t[0, 1, t]
                    + co02 * ftr_t[0, 2, t]
                    + co10 * ftr_t[1, 0, t]
                    + co11 * ftr_t[1, 1, t]
                    + co12 * ftr_t[1, 2, t]
                    + co20 * ftr_t[2, 0, t]
                    + co21 * ftr_t[2, 1, t]
                    + co22 * ftr_t[2, 2, t]
                )
                jfl_t[p, t] = dj
                dcbrt = cbrt * dj / (3.0 * jdet)
                for r in range(3):
                    for c in range(3):
                        f_t[p, r, c, t] = 0.0
                    f_t[p, r, r, t] = dcbrt
        else:
            # Hencky-space projection (plasticine/snow: deviatoric yield;
            # sand: cone yield with open expansion branch)
            svd3_kernel(ftr, uu, ss, vv)
            if ss[2] <= 0.0:
                if err[0] == ERR_OK:
                    err[0] = ERR_INVERTED
                    err[1] = p
                continue
            eps[0] = np.log(ss[0])
            eps[1] = np.log(ss[1])
            eps[2] = np.log(ss[2])
            tr = eps[0] + eps[1] + eps[2]
            dev0 = eps[0] - tr / 3.0
            dev1 = eps[1] - tr / 3.0
            dev2 = eps[2] - tr / 3.0
            enorm = np.sqrt(dev0 * dev0 + dev1 * dev1 + dev2 * dev2)

            if mat_code == MAT_SAND and tr > 0.0:
                branch = 2  # open expansion: project to rotation
            else:
                if mat_code == MAT_SAND:
                    dgamma = enorm + alpha_dp * (3.0 * lam + 2.0 * mu) * tr / (2.0 * mu)
                else:
                    dgamma = enorm - tau_y / (2.0 * mu)
                branch = 1 if (dgamma > 0.0 and enorm > 0.0) else 0

            if branch == 0:
                # elastic: keep the trial state and its decomposition
                for r in range(3):
                    for c in range(3):
                        fdef[p, r, c] = ftr[r, c]
                        usvd[p, r, c] = uu[r, c]
                        vsvd[p, r, c] = vv[r, c]
                    sig[p, r] = ss[r]
                for t in range(p_w):
                    for r in range(3):
                        da_l[r, 0] = ftr_t[r, 0, t]
                        da_l[r, 1] = ftr_t[r, 1, t]
                        da_l[r, 2] = ftr_t[r, 2, t]
                    svd3_jvp_kernel(da_l, uu, ss, vv, duu, dss, dvv)
                    for r in range(3):
                        for c in range(3):
                            f_t[p, r, c, t] = ftr_t[r, c, t]
                            u_t[p, r, c, t] = duu[r, c]
                            v_svd_t[p, r, c, t] = dvv[r, c]
                        sig_t[p, r, t] = dss[r]
            elif branch == 2:
                for r in range(3):
                    for c in range(3):
                        val = (
                            uu[r, 0] * vv[c, 0]
                            + uu[r, 1] * vv[c, 1]
                            + uu[r, 2] * vv[c, 2]
                        )
                        fdef[p, r, c] = val
                        usvd[p, r, c] = uu[r, c]
                        vsvd[p, r, c] = vv[r, c]
                    sig[p, r] = 1.0
                for t in range(p_w):
                    for r in range(3):
                        da_l[r, 0] = ftr_t[r, 0, t]
                        da_l[r, 1] = ftr_t[r, 1, t]
                        da_l[r, 2] = ftr_t[r, 2, t]
                    svd3_jvp_kernel(da_l, uu, ss, vv, duu, dss, dvv)
                    for r in range(3):
                        sig_t[p, r, t] = 0.0
                        for c in range(3):
                            u_t[p, r, c, t] = duu[r, c]
                            v_svd_t[p, r, c, t] = dvv[r, c]
                            f_t[p, r, c, t] = (
                                duu[r, 0] * vv[c, 0]
                                + duu[r, 1] * vv[c, 1]
                                + duu[r, 2] * vv[c, 2]
                                + uu[r, 0] * dvv[c, 0]
                                + uu[r, 1] * dvv[c, 1]
                                + uu[r, 2] * dvv[c, 2]
                            )
            else:
                # projection onto the yield surface along the deviator
                nh0 = dev0 / enorm
                nh1 = dev1 / enorm
                nh2 = dev2 / enorm
                epro[0] = eps[0] - dgamma * nh0
                epro[1] = eps[1] - dgamma * nh1
                epro[2] = eps[2] - dgamma * nh2
                ex0 = np.exp(epro[0])
                ex1 = np.exp(epro[1])
                ex2 = np.exp(epro[2])
                for r in range(3):
                    for c in range(3):
                        val = (
                            uu[r, 0] * ex0 * vv[c, 0]
                            + uu[r, 1] * ex1 * vv[c, 1]
                            + uu[r, 2] * ex2 * vv[c, 2]
                        )
                        fdef[p, r, c] = val
                        usvd[p, r, c] = uu[r, c]
                        vsvd[p, r, c] = vv[r, c]
                sig[p, 0] = ex0
                sig[p, 1] = ex1
                sig[p, 2] = ex2
                for t in range(p_w):
                    for r in range(3):
                        da_l[r, 0] = ftr_t[r, 0, t]
                        da_l[r, 1] = ftr_t[r, 1, t]
                        da_l[r, 2] = ftr_t[r, 2, t]
                    svd3_jvp_kernel(da_l, uu, ss, vv, duu, dss, dvv)
                    deps[0] = dss[0] / ss[0]
                    deps[1] = dss[1] / ss[1]
                    deps[2] = dss[2] / ss[2]
                    dtr = deps[0] + deps[1] + deps[2]
                    ddev0 = deps[0] - dtr / 3.0
                    ddev1 = deps[1] - dtr / 3.0
                    ddev2 = deps[2] - dtr / 3.0
                    denorm = (dev0 * ddev0 + dev1 * ddev1 + dev2 * ddev2) / enorm
                    if mat_code == MAT_SAND:
                        kfac = (3.0 * lam + 2.0 * mu) / (2.0 * mu)
                        dkfac = (
                            (3.0 * lam_t[t] + 2.0 * mu_t[t]) * 2.0 * mu
                            - (3.0 * lam + 2.0 * mu) * 2.0 * mu_t[t]
                        ) / (4.0 * mu * mu)
                        ddg = (
                            denorm
                            + alpha_dp_t[t] * kfac * tr
                            + alpha_dp * dkfac * tr
                            + alpha_dp * kfac * dtr
                        )
                    else:
                        ddg = denorm - (
                            tau_y_t[t] * 2.0 * mu - tau_y * 2.0 * mu_t[t]
                        ) / (4.0 * mu * mu)
                    dnh0 = (ddev0 - nh0 * denorm) / enorm
                    dnh1 = (ddev1 - nh1 * denorm) / enorm
                    dnh2 = (ddev2 - nh2 * denorm) / enorm
                    depro[0] = deps[0] - ddg * nh0 - dgamma * dnh0
                    depro[1] = deps[1] - ddg * nh1 - dgamma * dnh1
                    depro[2] = deps[2] - ddg * nh2 - dgamma * dnh2
                    dex0 = ex0 * depro[0]
                    dex1 = ex1 * depro[1]
                    dex2 = ex2 * depro[2]
                    sig_t[p, 0, t] = dex0
                    sig_t[p, 1, t] = dex1
                    sig_t[p, 2, t] = dex2
                    for r in range(3):
                        for c in range(3):
                            u_t[p, r, c, t] = duu[r, c]
                            v_svd_t[p, r, c, t] = dvv[r, c]
                            f_t[p, r, c, t] = (
                                duu[r, 0] * ex0 * vv[c, 0]
                                + duu[r, 1] * ex1 * vv[c, 1]
                                + duu[r, 2] * ex2 * vv[c, 2]
                                + uu[r, 0] * dex0 * vv[c, 0]
                                + uu[r, 1] * dex1 * vv[c, 1]
                                + uu[r, 2] * dex2 * vv[c, 2]
                                + uu[r, 0] * ex0 * dvv[c, 0]
                                + uu[r, 1] * ex1 * dvv[c, 1]
                                + uu[r, 2] * ex2 * dvv[c, 2]
                            )

        # ---- write back velocity / affine state / position ---------------
        for t in range(p_w):
            for r in range(3):
                v_t[p, r, t] = vp_t[r, t]
                x_t[p, r, t] += dt * vp_t[r, t]
                for c in range(3):
                    b_t[p, r, c, t] = bn_t[r, c, t]
                    gradv_c_t[p, r, c, t] = gvn_t[r, c, t]
        for r in range(3):
            v[p, r] = vp[r]
            x[p, r] += dt * vp[r]
            for c in range(3):
                bmat[p, r, c] = bnew[r, c]
                gradv_c[p, r, c] = gvnew[r, c]


# ---------------------------------------------------------------------------
# hash-grid nearest neighbor for point sets (chamfer support)
# ---------------------------------------------------------------------------


@njit(cache=True)
def hash_grid_build(points, cell, lo, dims, cell_start, cell_count, order):
    """Bucket points into a uniform grid (counting sort).

    cell_start/cell_count are per-flat-cell arrays sized prod(dims)+1 and
    prod(dims); order receives point indices grouped by cell.
    """
    n = points.shape[0]
    ncell = dims[0] * dims[1] * dims[2]
    for c in range(ncell):
        cell_count[c] = 0
    for p in range(n):
        cx = int((points[p, 0] - lo[0]) / cell)
        cy = int((points[p, 1] - lo[1]) / cell)
        cz = int((points[p, 2] - lo[2]) / cell)
        if cx < 0:
            cx = 0
        if cy < 0:
            cy = 0
        if cz < 0:
            cz = 0
        if cx >= dims[0]:
            cx = dims[0] - 1
        if cy >= dims[1]:
            cy = dims[1] - 1
        if cz >= dims[2]:
            cz = dims[2] - 1
        cell_count[(cx * dims[1] + cy) * dims[2] + cz] += 1
    acc = 0
    for c in range(ncell):
        cell_start[c] = acc
        acc += cell_count[c]
    cell_start[ncell] = acc
    for c in range(ncell):
        cell_count[c] = 0
    for p in range(n):
        cx = int((points[p, 0] - lo[0]) / cell)
        cy = int((points[p, 1] - lo[1]) / cell)
        cz = int((points[p, 2] - lo[2]) / cell)
        if cx < 0:
            cx = 0
        if cy < 0:
            cy = 0
        if cz < 0:
            cz = 0
        if cx >= dims[0]:
            cx = dims[0] - 1
        if cy >= dims[1]:
            cy = dims[1] - 1
        if cz >= dims[2]:
            cz = dims[2] - 1
        c = (cx * dims[1] + cy) * dims[2] + cz
        order[cell_start[c] + cell_count[c]] = p
        cell_count[c] += 1


@njit(cache=True)
def hash_grid_query(queries, points, cell, lo, dims, cell_start, order, nn_idx, nn_d2):
    """Exact nearest neighbor per query via expanding ring search."""
    nq = queries.shape[0]
    max_ring = dims[0] + dims[1] + dims[2] + 2
    for q in range(nq):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        cx = min(max(int((qx - lo[0]) / cell), 0), dims[0] - 1)
        cy = min(max(int((qy - lo[1]) / cell), 0), dims[1] - 1)
        cz = min(max(int((qz - lo[2]) / cell), 0), dims[2] - 1)
        best = 1e300
        best_i = -1
        for ring in range(max_ring):
            if best_i >= 0:
                # closest possible point in this ring
                ring_min = (ring - 1) * cell
                if ring_min > 0.0 and ring_min * ring_min > best:
                    break
            x0 = cx - ring
            x1 = cx + ring
            y0 = cy - ring
            y1 = cy + ring
            z0 = cz - ring
            z1 = cz + ring
            for ix in range(max(x0, 0), min(x1, dims[0] - 1) + 1):
                on_x = ix == x0 or ix == x1
                for iy in range(max(y0, 0), min(y1, dims[1] - 1) + 1):
                    on_y = iy == y0 or iy == y1
                    for iz in range(max(z0, 0), min(z1, dims[2] - 1) + 1):
                        if not (on_x or on_y or iz == z0 or iz == z1):
                            continue  # interior cells were visited earlier
                        c = (ix * dims[1] + iy) * dims[2] + iz
                        for s in range(cell_start[c], cell_start[c + 1]):
                            pi = order[s]
                            dx0 = points[pi, 0] - qx
                            dx1 = points[pi, 1] - qy
                            dx2 = points[pi, 2] - qz
                            d2 = dx0 * dx0 + dx1 * dx1 + dx2 * dx2
                            if d2 < best:
                                best = d2
                                best_i = pi
        nn_idx[q] = best_i
        nn_d2[q] = best


# ---------------------------------------------------------------------------
# silhouette splatting and mask-loss gradient
# ---------------------------------------------------------------------------


@njit(cache=True)
def splat_kernel(uv, valid, radius, h, w, mask, dist2, argmin, want_dist):
    """Splat projected points as binary disks; optionally track per-pixel
    squared distance to the nearest point center (for the soft surrogate)."""
    n = uv.shape[0]
    reach = radius + 4.0 if want_dist else radius
    r2 = radius * radius
    for p in range(n):
        if not valid[p]:
            continue
        u = uv[p, 0]
        v = uv[p, 1]
        x0 = int(np.floor(u - reach - 0.5))
        x1 = int(np.ceil(u + reach - 0.5))
        y0 = int(np.floor(v - reach - 0.5))
        y1 = int(np.ceil(v + reach - 0.5))
        if x1 < 0 or y1 < 0 or x0 > w - 1 or y0 > h - 1:
            continue
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > w - 1:
            x1 = w - 1
        if y1 > h - 1:
            y1 = h - 1
        for py in range(y0, y1 + 1):
            dy = py + 0.5 - v
            for px in range(x0, x1 + 1):
                dx = px + 0.5 - u
                d2 = dx * dx + dy * dy
                if d2 <= r2:
                    mask[py, px] = 1
                if want_dist and d2 < dist2[py, px]:
                    dist2[py, px] = d2
                    argmin[py, px] = p


@njit(cache=True)
def mask_loss_grad_kernel(dist2, argmin, target, uv, uv_t, radius, grad):
    """Gradient of the smooth-coverage silhouette mismatch.

    Soft coverage s = sigmoid((radius - dist) / 0.5) against a binary target;
    accumulates d mean|s - target| / d theta through the nearest projected
    point of each pixel.
    """
    h = dist2.shape[0]
    w = dist2.shape[1]
    p_w = grad.shape[0]
    npix = h * w
    for py in range(h):
        for px in range(w):
            d2 = dist2[py, px]
            tgt = target[py, px]
            if d2 >= 1e299:
                continue  # no point nearby: s ~ 0 and flat
            d = np.sqrt(d2)
            a = (radius - d) / 0.5
            if a > 30.0 or a < -30.0:
                continue
            s = 1.0 / (1.0 + np.exp(-a))
            sp = s * (1.0 - s) * 2.0  # ds/d(dist) = -sp
            if s > tgt:
                sgn = 1.0
            elif s < tgt:
                sgn = -1.0
            else:
                continue
            pi = argmin[py, px]
            if d < 1e-12:
                continue
            # d(dist)/d(uv) = -(pixel - uv)/dist
            cu = (uv[pi, 0] - (px + 0.5)) / d
            cv = (uv[pi, 1] - (py + 0.5)) / d
            coef = sgn * (-sp) / npix
            for t in range(p_w):
                grad[t] += coef * (cu * uv_t[pi, 0, t] + cv * uv_t[pi, 1, t])


@njit(cache=True)
def mask_soft_value_kernel(dist2, target, radius):
    """Mean |soft coverage - target|; the differentiable companion of the
    hard-mask mismatch (used for gradient verification)."""
    h = dist2.shape[0]
    w = dist2.shape[1]
    acc = 0.0
    for py in range(h):
        for px in range(w):
            d2 = dist2[py, px]
            if d2 >= 1e299:
                s = 0.0
            else:
                a = (radius - np.sqrt(d2)) / 0.5
                if a > 30.0:
                    s = 1.0
                elif a < -30.0:
                    s = 0.0
                else:
                    s = 1.0 / (1.0 + np.exp(-a))
            acc += abs(s - target[py, px])
    return acc / (h * w)
