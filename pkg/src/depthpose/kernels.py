"""Compiled inner loops for the kinematics jacobians.

The math here mirrors BodyModel exactly; these kernels exist because the
optimization loop evaluates keypoint jacobians tens of thousands of times per
training run. Loops are single-threaded so results are reproducible bit for
bit. Derivative propagation only visits the pose coordinates of a joint's
ancestor chain; everything else is structurally zero.
"""

from __future__ import annotations

import numba as nb
import numpy as np

_EPS_ANGLE = 1e-8


@nb.njit(cache=True, inline="always")
def _rodrigues_one(w, R):
    """Rotation matrix for one axis-angle 3-vector, written into R."""
    t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    t = np.sqrt(t2)
    if t < _EPS_ANGLE:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = np.sin(t) / t
        b = (1.0 - np.cos(t)) / t2
    kx, ky, kz = w[0], w[1], w[2]
    R[0, 0] = 1.0 + b * (-kz * kz - ky * ky)
    R[0, 1] = -a * kz + b * kx * ky
    R[0, 2] = a * ky + b * kx * kz
    R[1, 0] = a * kz + b * kx * ky
    R[1, 1] = 1.0 + b * (-kx * kx - kz * kz)
    R[1, 2] = -a * kx + b * ky * kz
    R[2, 0] = -a * ky + b * kx * kz
    R[2, 1] = a * kx + b * ky * kz
    R[2, 2] = 1.0 + b * (-kx * kx - ky * ky)


@nb.njit(cache=True)
def _rodrigues_jac_one(w, R, dR):
    """dR/dw_i into dR (3,3,3) given w and its rotation R."""
    t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    if t2 < _EPS_ANGLE * _EPS_ANGLE:
        dR[:] = 0.0
        dR[0, 1, 2] = -1.0
        dR[0, 2, 1] = 1.0
        dR[1, 0, 2] = 1.0
        dR[1, 2, 0] = -1.0
        dR[2, 0, 1] = -1.0
        dR[2, 1, 0] = 1.0
        return
    for i in range(3):
        # c = w x ((I - R) e_i)
        u0 = (1.0 if i == 0 else 0.0) - R[0, i]
        u1 = (1.0 if i == 1 else 0.0) - R[1, i]
        u2 = (1.0 if i == 2 else 0.0) - R[2, i]
        c0 = w[1] * u2 - w[2] * u1
        c1 = w[2] * u0 - w[0] * u2
        c2 = w[0] * u1 - w[1] * u0
        wi = w[i]
        # M = (wi * skew(w) + skew(c)) / t2
        m00 = 0.0
        m01 = (-wi * w[2] - c2) / t2
        m02 = (wi * w[1] + c1) / t2
        m10 = (wi * w[2] + c2) / t2
        m11 = 0.0
        m12 = (-wi * w[0] - c0) / t2
        m20 = (-wi * w[1] - c1) / t2
        m21 = (wi * w[0] + c0) / t2
        m22 = 0.0
        for col in range(3):
            dR[i, 0, col] = m00 * R[0, col] + m01 * R[1, col] + m02 * R[2, col]
            dR[i, 1, col] = m10 * R[0, col] + m11 * R[1, col] + m12 * R[2, col]
            dR[i, 2, col] = m20 * R[0, col] + m21 * R[1, col] + m22 * R[2, col]


@nb.njit(cache=True)
def fk_joints_jacobian(theta, beta, rest, parents, chain, chain_len, a0, ab, rw):
    """Keypoints and their pose/shape jacobians for a batch.

    theta (B, 3J), beta (B, P). chain[j, :chain_len[j]] lists joint j's
    ancestors including itself. a0 (K,J,3), ab (K,J,3,P), rw (K,J) are the
    regressor-times-skinning contraction tensors.

    Returns X (B,K,3), dXt (B,K,3,Q), dXb (B,K,3,P).
    """
    B = theta.shape[0]
    J = rest.shape[0]
    Q = theta.shape[1]
    K = a0.shape[0]
    P = ab.shape[3]
    X = np.zeros((B, K, 3))
    dXt = np.zeros((B, K, 3, Q))
    dXb = np.zeros((B, K, 3, P))

    R = np.empty((J, 3, 3))
    dR = np.empty((J, 3, 3, 3))
    Rw = np.empty((J, 3, 3))
    tw = np.empty((J, 3))
    dRw = np.zeros((J, Q, 3, 3))
    dtw = np.zeros((J, Q, 3))
    a = np.empty((K, J, 3))
    lt = np.empty(3)
    tmp = np.empty((3, 3))

    for b in range(B):
        for j in range(J):
            _rodrigues_one(theta[b, 3 * j:3 * j + 3], R[j])
            _rodrigues_jac_one(theta[b, 3 * j:3 * j + 3], R[j], dR[j])
        # shaped contraction coefficients for this sample
        for k in range(K):
            for j in range(J):
                for y in range(3):
                    s = a0[k, j, y]
                    for p in range(P):
                        s += ab[k, j, y, p] * beta[b, p]
                    a[k, j, y] = s
        # root
        for x in range(3):
            for y in range(3):
                Rw[0, x, y] = R[0, x, y]
        for x in range(3):
            tw[0, x] = rest[0, x] - (R[0, x, 0] * rest[0, 0] + R[0, x, 1] * rest[0, 1] + R[0, x, 2] * rest[0, 2])
        for i in range(3):
            for x in range(3):
                for y in range(3):
                    dRw[0, i, x, y] = dR[0, i, x, y]
                dtw[0, i, x] = -(dR[0, i, x, 0] * rest[0, 0] + dR[0, i, x, 1] * rest[0, 1] + dR[0, i, x, 2] * rest[0, 2])
        # descend
        for j in range(1, J):
            p = parents[j]
            for x in range(3):
                lt[x] = rest[j, x] - (R[j, x, 0] * rest[j, 0] + R[j, x, 1] * rest[j, 1] + R[j, x, 2] * rest[j, 2])
            for x in range(3):
                for y in range(3):
                    s = 0.0
                    for z in range(3):
                        s += Rw[p, x, z] * R[j, z, y]
                    Rw[j, x, y] = s
            for x in range(3):
                tw[j, x] = Rw[p, x, 0] * lt[0] + Rw[p, x, 1] * lt[1] + Rw[p, x, 2] * lt[2] + tw[p, x]
            # ancestor coordinates flow through the parent transform
            for ci in range(chain_len[p]):
                anc = chain[p, ci]
                for i in range(3):
                    q = 3 * anc + i
                    for x in range(3):
                        for y in range(3):
                            s = 0.0
                            for z in range(3):
                                s += dRw[p, q, x, z] * R[j, z, y]
                            dRw[j, q, x, y] = s
                        dtw[j, q, x] = dRw[p, q, x, 0] * lt[0] + dRw[p, q, x, 1] * lt[1] + dRw[p, q, x, 2] * lt[2] + dtw[p, q, x]
            # own triple adds the local rotation derivative
            for i in range(3):
                q = 3 * j + i
                for x in range(3):
                    for y in range(3):
                        s = 0.0
                        for z in range(3):
                            s += Rw[p, x, z] * dR[j, i, z, y]
                        tmp[x, y] = s
                for x in range(3):
                    for y in range(3):
                        dRw[j, q, x, y] = tmp[x, y]
                    dtw[j, q, x] = -(tmp[x, 0] * rest[j, 0] + tmp[x, 1] * rest[j, 1] + tmp[x, 2] * rest[j, 2])
        # contract into keypoints
        for k in range(K):
            for j in range(J):
                w = rw[k, j]
                for x in range(3):
                    X[b, k, x] += Rw[j, x, 0] * a[k, j, 0] + Rw[j, x, 1] * a[k, j, 1] + Rw[j, x, 2] * a[k, j, 2] + tw[j, x] * w
                for ci in range(chain_len[j]):
                    anc = chain[j, ci]
                    for i in range(3):
                        q = 3 * anc + i
                        for x in range(3):
                            dXt[b, k, x, q] += (
                                dRw[j, q, x, 0] * a[k, j, 0]
                                + dRw[j, q, x, 1] * a[k, j, 1]
                                + dRw[j, q, x, 2] * a[k, j, 2]
                                + dtw[j, q, x] * w
                            )
                for p in range(P):
                    for x in range(3):
                        dXb[b, k, x, p] += (
                            Rw[j, x, 0] * ab[k, j, 0, p] + Rw[j, x, 1] * ab[k, j, 1, p] + Rw[j, x, 2] * ab[k, j, 2, p]
                        )
    return X, dXt, dXb


@nb.njit(cache=True)
def vertex_z_jacobian(theta, beta, rest, parents, chain, chain_len, verts, basis,
                      w_idx, w_val, w_ptr):
    """Per-vertex depth-coordinate jacobians for a single sample.

    Skin weights come in CSR form (w_ptr, w_idx, w_val). Returns the posed
    vertices (N,3) plus d(vertex z)/d(theta) (N,Q) and d(vertex z)/d(beta) (N,P).
    """
    J = rest.shape[0]
    Q = theta.shape[0]
    N = verts.shape[0]
    P = basis.shape[2]
    R = np.empty((J, 3, 3))
    dR = np.empty((J, 3, 3, 3))
    Rw = np.empty((J, 3, 3))
    tw = np.empty((J, 3))
    dRw = np.zeros((J, Q, 3, 3))
    dtw = np.zeros((J, Q, 3))
    lt = np.empty(3)
    tmp = np.empty((3, 3))

    for j in range(J):
        _rodrigues_one(theta[3 * j:3 * j + 3], R[j])
        _rodrigues_jac_one(theta[3 * j:3 * j + 3], R[j], dR[j])
    for x in range(3):
        for y in range(3):
            Rw[0, x, y] = R[0, x, y]
        tw[0, x] = rest[0, x] - (R[0, x, 0] * rest[0, 0] + R[0, x, 1] * rest[0, 1] + R[0, x, 2] * rest[0, 2])
    for i in range(3):
        for x in range(3):
            for y in range(3):
                dRw[0, i, x, y] = dR[0, i, x, y]
            dtw[0, i, x] = -(dR[0, i, x, 0] * rest[0, 0] + dR[0, i, x, 1] * rest[0, 1] + dR[0, i, x, 2] * rest[0, 2])
    for j in range(1, J):
        p = parents[j]
        for x in range(3):
            lt[x] = rest[j, x] - (R[j, x, 0] * rest[j, 0] + R[j, x, 1] * rest[j, 1] + R[j, x, 2] * rest[j, 2])
        for x in range(3):
            for y in range(3):
                s = 0.0
                for z in range(3):
                    s += Rw[p, x, z] * R[j, z, y]
                Rw[j, x, y] = s
            tw[j, x] = Rw[p, x, 0] * lt[0] + Rw[p, x, 1] * lt[1] + Rw[p, x, 2] * lt[2] + tw[p, x]
        for ci in range(chain_len[p]):
            anc = chain[p, ci]
            for i in range(3):
                q = 3 * anc + i
                for x in range(3):
                    for y in range(3):
                        s = 0.0
                        for z in range(3):
                            s += dRw[p, q, x, z] * R[j, z, y]
                        dRw[j, q, x, y] = s
                    dtw[j, q, x] = dRw[p, q, x, 0] * lt[0] + dRw[p, q, x, 1] * lt[1] + dRw[p, q, x, 2] * lt[2] + dtw[p, q, x]
        for i in range(3):
            q = 3 * j + i
            for x in range(3):
                for y in range(3):
                    s = 0.0
                    for z in range(3):
                        s += Rw[p, x, z] * dR[j, i, z, y]
                    tmp[x, y] = s
            for x in range(3):
                for y in range(3):
                    dRw[j, q, x, y] = tmp[x, y]
                dtw[j, q, x] = -(tmp[x, 0] * rest[j, 0] + tmp[x, 1] * rest[j, 1] + tmp[x, 2] * rest[j, 2])

    v_out = np.zeros((N, 3))
    dz_t = np.zeros((N, Q))
    dz_b = np.zeros((N, P))
    vp = np.empty(3)
    for v in range(N):
        for x in range(3):
            s = verts[v, x]
            for p in range(P):
                s += basis[v, x, p] * beta[p]
            vp[x] = s
        for e in range(w_ptr[v], w_ptr[v + 1]):
            j = w_idx[e]
            w = w_val[e]
            for x in range(3):
                v_out[v, x] += w * (Rw[j, x, 0] * vp[0] + Rw[j, x, 1] * vp[1] + Rw[j, x, 2] * vp[2] + tw[j, x])
            for ci in range(chain_len[j]):
                anc = chain[j, ci]
                for i in range(3):
                    q = 3 * anc + i
                    dz_t[v, q] += w * (
                        dRw[j, q, 2, 0] * vp[0] + dRw[j, q, 2, 1] * vp[1] + dRw[j, q, 2, 2] * vp[2] + dtw[j, q, 2]
                    )
            for p in range(P):
                dz_b[v, p] += w * (
                    Rw[j, 2, 0] * basis[v, 0, p] + Rw[j, 2, 1] * basis[v, 1, p] + Rw[j, 2, 2] * basis[v, 2, p]
                )
    return v_out, dz_t, dz_b
