"""Quaternion rotations and their exact parameter derivatives.

Convention: scalar-first q = [w, x, y, z].  Rotation always acts through the
normalized quaternion, so every matrix entry is a degree-0 homogeneous ratio
R_ij(q) = (q^T M_ij q) / (q^T q) with constant symmetric 4x4 tables M_ij.
That form gives closed expressions for the pose Jacobian B = d(R p)/dq, for
its Hessian contracted with arbitrary cotangents (needed when a loss
differentiates through B itself), and for VJPs of anything linear in R.
"""

import numpy as np


def _build_m_table():
    m = np.zeros((3, 3, 4, 4))
    w, x, y, z = 0, 1, 2, 3

    def sym(i, j, a, b, c):
        m[i, j, a, b] += 0.5 * c
        m[i, j, b, a] += 0.5 * c

    def diag(i, j, a, c):
        m[i, j, a, a] += c

    # row 0: [w2+x2-y2-z2, 2(xy-wz), 2(xz+wy)]
    diag(0, 0, w, 1.0); diag(0, 0, x, 1.0); diag(0, 0, y, -1.0); diag(0, 0, z, -1.0)
    sym(0, 1, x, y, 2.0); sym(0, 1, w, z, -2.0)
    sym(0, 2, x, z, 2.0); sym(0, 2, w, y, 2.0)
    # row 1: [2(xy+wz), w2-x2+y2-z2, 2(yz-wx)]
    sym(1, 0, x, y, 2.0); sym(1, 0, w, z, 2.0)
    diag(1, 1, w, 1.0); diag(1, 1, x, -1.0); diag(1, 1, y, 1.0); diag(1, 1, z, -1.0)
    sym(1, 2, y, z, 2.0); sym(1, 2, w, x, -2.0)
    # row 2: [2(xz-wy), 2(yz+wx), w2-x2-y2+z2]
    sym(2, 0, x, z, 2.0); sym(2, 0, w, y, -2.0)
    sym(2, 1, y, z, 2.0); sym(2, 1, w, x, 2.0)
    diag(2, 2, w, 1.0); diag(2, 2, x, -1.0); diag(2, 2, y, -1.0); diag(2, 2, z, 1.0)
    return m


M_TABLE = _build_m_table()

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-300:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def random_unit(rng):
    return normalize(rng.standard_normal(4))


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def multiply(q1, q2):
    """Hamilton product q1 ⊗ q2 (scalar-first)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def from_matrix(r):
    """Unit quaternion of a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k]) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return normalize(q)


def to_matrix(q):
    """Rotation matrix of the normalized quaternion."""
    w, x, y, z = normalize(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def rotate(q, pts):
    return np.asarray(pts) @ to_matrix(q).T


def rotate_jacobian(q, pts):
    """B[n] = d(R(q/|q|) p_n)/dq, shape (n, 3, 4), exact at any q."""
    q = np.asarray(q, dtype=np.float64)
    pts = np.atleast_2d(pts)
    nrm = q @ q
    a = np.einsum("ijkl,nj->nikl", M_TABLE, pts)       # (n,3,4,4)
    aq = a @ q                                         # (n,3,4)
    s = aq @ q / nrm                                   # (n,3) = R p
    return 2.0 * (aq - s[:, :, None] * q[None, None, :]) / nrm


def rotate_hess_apply(q, pts, f, u):
    """Gradient of sum_n f_n . B(q, p_n) u  w.r.t. q (the B-Hessian term).

    f: (n,3) cotangents, u: (4,) shared direction.  Uses the rank-1 collapse
    sum_{n,i} f_ni H(S_ni) = [2*Abar - 2(q gbar^T + gbar q^T) - 2 Sbar I]/|q|^2
    with Abar, gbar, Sbar the f-weighted sums of the per-entry quadratic
    forms, their gradients, and values.
    """
    q = np.asarray(q, dtype=np.float64)
    nrm = q @ q
    c = f.T @ pts                                     # (3,3) sum_n outer(f_n, p_n)
    abar = np.einsum("ij,ijkl->kl", c, M_TABLE)        # (4,4)
    abar_q = abar @ q
    sbar = abar_q @ q / nrm
    gbar = 2.0 * (abar_q - sbar * q) / nrm
    h = (2.0 * abar - 2.0 * (np.outer(q, gbar) + np.outer(gbar, q))
         - 2.0 * sbar * np.eye(4)) / nrm
    return h @ np.asarray(u, dtype=np.float64)


def matrix_vjp(q, cot_r):
    """Gradient of sum_ij cot_r[i,j] * R(q/|q|)[i,j] w.r.t. q."""
    q = np.asarray(q, dtype=np.float64)
    nrm = q @ q
    abar = np.einsum("ij,ijkl->kl", cot_r, M_TABLE)
    abar_q = abar @ q
    sbar = abar_q @ q / nrm
    return 2.0 * (abar_q - sbar * q) / nrm


def b_linear_vjp_p(q, f, u):
    """Gradient of sum_n f_n . B(q, p_n) u  w.r.t. the points p_n.

    B is linear in p: B(q, p) = sum_j p_j Bbasis_j with
    Bbasis_j = d(R e_j)/dq, so the VJP is a fixed 3x3 map applied to f.
    """
    basis = rotate_jacobian(q, np.eye(3))              # (3,3,4): j -> (3,4)
    qmat = np.einsum("jik,k->ij", basis, u)            # Q[i,j] = (Bbasis_j u)_i
    return f @ qmat                                    # (n,3) rows Q^T f_n
