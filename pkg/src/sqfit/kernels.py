"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The numba path is used by default when numba imports cleanly; set
``SQFIT_DISABLE_NUMBA=1`` to force the numpy fallback.  Both paths return
per-point arrays and leave reductions to the caller so results are
bit-comparable across backends.  ``benchmarks/bench_kernels.py`` times the
two paths against each other.

Kernels:
  nn_sqdist            exact brute-force nearest neighbor (lowest index wins ties)
  tri_sample           trilinear sampling of a vector grid, zero outside
  tri_sample_posgrad   spatial gradient of the trilinear interpolant
  tri_scatter          adjoint of tri_sample w.r.t. the grid values
  flow_compose         one scaling-and-squaring composition step
  flow_compose_vjp     reverse-mode of flow_compose
  sq_surface           tapered + bent superquadric surface points
  sq_surface_jac       surface plus its 3x8 Jacobian w.r.t. shape params
  sq_hess_apply        weighted shape Hessian contracted with a direction
"""

import os

import numpy as np

try:
    from numba import njit, prange
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f
        return deco

    prange = range

_DISABLED = os.environ.get("SQFIT_DISABLE_NUMBA", "0") not in ("", "0")
USING_NUMBA = _HAVE_NUMBA and not _DISABLED

_LOG_CLAMP = 1e-12
_BEND_EPS = 1e-8


# ---------------------------------------------------------------------------
# nearest neighbor
# ---------------------------------------------------------------------------

def nn_sqdist_numpy(query, ref):
    """Index and squared distance of the nearest ref point for every query.

    Brute force with direct coordinate differences; argmin keeps the lowest
    index on exact ties.  Blocked so memory stays bounded for large inputs.
    """
    n = query.shape[0]
    idx = np.empty(n, dtype=np.int64)
    sq = np.empty(n, dtype=np.float64)
    block = max(1, int(8_000_000 // max(1, ref.shape[0] * ref.shape[1])))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        d = query[lo:hi, None, :] - ref[None, :, :]
        dist = np.einsum("qrk,qrk->qr", d, d)
        idx[lo:hi] = np.argmin(dist, axis=1)
        sq[lo:hi] = dist[np.arange(hi - lo), idx[lo:hi]]
    return idx, sq


@njit(cache=True, parallel=True)
def _nn_sqdist_nb(query, ref):
    n = query.shape[0]
    m = ref.shape[0]
    dim = query.shape[1]
    idx = np.empty(n, dtype=np.int64)
    sq = np.empty(n, dtype=np.float64)
    for i in prange(n):
        best = np.inf
        best_j = -1
        for j in range(m):
            d = 0.0
            for k in range(dim):
                t = query[i, k] - ref[j, k]
                d += t * t
            if d < best:
                best = d
                best_j = j
        idx[i] = best_j
        sq[i] = best
    return idx, sq


def nn_sqdist_numba(query, ref):
    return _nn_sqdist_nb(np.ascontiguousarray(query), np.ascontiguousarray(ref))


# ---------------------------------------------------------------------------
# trilinear grid ops (regular cube grid: node j at lo + j*h per axis)
# ---------------------------------------------------------------------------

def _tri_cells(pts, lo, h, g):
    """Cell indices, fractional coords, and inside-mask for query points."""
    u = (pts - lo) / h
    inside = np.all((u >= 0.0) & (u <= g - 1.0), axis=1)
    c = np.floor(u).astype(np.int64)
    c = np.minimum(np.maximum(c, 0), g - 2)
    f = u - c
    return c, f, inside


def tri_sample_numpy(values, pts, lo, h):
    g = values.shape[0]
    c, f, inside = _tri_cells(pts, lo, h, g)
    out = np.zeros((pts.shape[0], 3))
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                w = wx * wy * wz
                out += w[:, None] * values[c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz]
    out[~inside] = 0.0
    return out


def tri_sample_posgrad_numpy(values, pts, lo, h):
    """D[n, a, b] = d(sample_a)/d(pos_b); zero outside the grid."""
    g = values.shape[0]
    c, f, inside = _tri_cells(pts, lo, h, g)
    out = np.zeros((pts.shape[0], 3, 3))
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        sx = 1.0 if dx else -1.0
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            sy = 1.0 if dy else -1.0
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                sz = 1.0 if dz else -1.0
                v = values[c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz]
                out[:, :, 0] += (sx * wy * wz)[:, None] * v
                out[:, :, 1] += (wx * sy * wz)[:, None] * v
                out[:, :, 2] += (wx * wy * sz)[:, None] * v
    out /= h
    out[~inside] = 0.0
    return out


def tri_scatter_numpy(cot, pts, lo, h, g):
    """Adjoint of tri_sample: scatter cotangents into grid-value gradients."""
    c, f, inside = _tri_cells(pts, lo, h, g)
    grad = np.zeros((g, g, g, 3))
    cot = np.where(inside[:, None], cot, 0.0)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                w = (wx * wy * wz)[:, None] * cot
                np.add.at(grad, (c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz), w)
    return grad


@njit(cache=True)
def _tri_sample_nb(values, pts, lo, h):
    g = values.shape[0]
    n = pts.shape[0]
    out = np.zeros((n, 3))
    for i in range(n):
        ux = (pts[i, 0] - lo) / h
        uy = (pts[i, 1] - lo) / h
        uz = (pts[i, 2] - lo) / h
        if ux < 0.0 or ux > g - 1.0 or uy < 0.0 or uy > g - 1.0 or uz < 0.0 or uz > g - 1.0:
            continue
        cx = min(max(int(np.floor(ux)), 0), g - 2)
        cy = min(max(int(np.floor(uy)), 0), g - 2)
        cz = min(max(int(np.floor(uz)), 0), g - 2)
        fx = ux - cx
        fy = uy - cy
        fz = uz - cz
        for dx in range(2):
            wx = fx if dx == 1 else 1.0 - fx
            for dy in range(2):
                wy = fy if dy == 1 else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz == 1 else 1.0 - fz
                    w = wx * wy * wz
                    for k in range(3):
                        out[i, k] += w * values[cx + dx, cy + dy, cz + dz, k]
    return out


@njit(cache=True)
def _tri_sample_posgrad_nb(values, pts, lo, h):
    g = values.shape[0]
    n = pts.shape[0]
    out = np.zeros((n, 3, 3))
    for i in range(n):
        ux = (pts[i, 0] - lo) / h
        uy = (pts[i, 1] - lo) / h
        uz = (pts[i, 2] - lo) / h
        if ux < 0.0 or ux > g - 1.0 or uy < 0.0 or uy > g - 1.0 or uz < 0.0 or uz > g - 1.0:
            continue
        cx = min(max(int(np.floor(ux)), 0), g - 2)
        cy = min(max(int(np.floor(uy)), 0), g - 2)
        cz = min(max(int(np.floor(uz)), 0), g - 2)
        fx = ux - cx
        fy = uy - cy
        fz = uz - cz
        for dx in range(2):
            wx = fx if dx == 1 else 1.0 - fx
            sx = 1.0 if dx == 1 else -1.0
            for dy in range(2):
                wy = fy if dy == 1 else 1.0 - fy
                sy = 1.0 if dy == 1 else -1.0
                for dz in range(2):
                    wz = fz if dz == 1 else 1.0 - fz
                    sz = 1.0 if dz == 1 else -1.0
                    for k in range(3):
                        v = values[cx + dx, cy + dy, cz + dz, k]
                        out[i, k, 0] += sx * wy * wz * v
                        out[i, k, 1] += wx * sy * wz * v
                        out[i, k, 2] += wx * wy * sz * v
        for k in range(3):
            for b in range(3):
                out[i, k, b] /= h
    return out


@njit(cache=True)
def _tri_scatter_nb(cot, pts, lo, h, g):
    n = pts.shape[0]
    grad = np.zeros((g, g, g, 3))
    for i in range(n):
        ux = (pts[i, 0] - lo) / h
        uy = (pts[i, 1] - lo) / h
        uz = (pts[i, 2] - lo) / h
        if ux < 0.0 or ux > g - 1.0 or uy < 0.0 or uy > g - 1.0 or uz < 0.0 or uz > g - 1.0:
            continue
        cx = min(max(int(np.floor(ux)), 0), g - 2)
        cy = min(max(int(np.floor(uy)), 0), g - 2)
        cz = min(max(int(np.floor(uz)), 0), g - 2)
        fx = ux - cx
        fy = uy - cy
        fz = uz - cz
        for dx in range(2):
            wx = fx if dx == 1 else 1.0 - fx
            for dy in range(2):
                wy = fy if dy == 1 else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz == 1 else 1.0 - fz
                    w = wx * wy * wz
                    for k in range(3):
                        grad[cx + dx, cy + dy, cz + dz, k] += w * cot[i, k]
    return grad


def tri_sample_numba(values, pts, lo, h):
    return _tri_sample_nb(values, np.ascontiguousarray(pts), float(lo), float(h))


def tri_sample_posgrad_numba(values, pts, lo, h):
    return _tri_sample_posgrad_nb(values, np.ascontiguousarray(pts), float(lo), float(h))


def tri_scatter_numba(cot, pts, lo, h, g):
    return _tri_scatter_nb(np.ascontiguousarray(cot), np.ascontiguousarray(pts),
                           float(lo), float(h), g)


def _node_coords(g, lo, h):
    ax = lo + h * np.arange(g)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def flow_compose_numpy(u, lo, h):
    """One squaring step: u'(n) = u(n) + sample(u, node_n + u(n))."""
    g = u.shape[0]
    nodes = _node_coords(g, lo, h)
    y = nodes + u.reshape(-1, 3)
    return u + tri_sample_numpy(u, y, lo, h).reshape(u.shape)


def flow_compose_vjp_numpy(u, cot_new, lo, h):
    """Reverse-mode of flow_compose: cotangent on the pre-step field."""
    g = u.shape[0]
    nodes = _node_coords(g, lo, h)
    y = nodes + u.reshape(-1, 3)
    cn = cot_new.reshape(-1, 3)
    cot = cot_new + tri_scatter_numpy(cn, y, lo, h, g)
    dpos = tri_sample_posgrad_numpy(u, y, lo, h)
    cot += np.einsum("nab,na->nb", dpos, cn).reshape(u.shape)
    return cot


def flow_compose_numba(u, lo, h):
    g = u.shape[0]
    nodes = _node_coords(g, lo, h)
    y = nodes + u.reshape(-1, 3)
    return u + tri_sample_numba(u, y, lo, h).reshape(u.shape)


def flow_compose_vjp_numba(u, cot_new, lo, h):
    g = u.shape[0]
    nodes = _node_coords(g, lo, h)
    y = nodes + u.reshape(-1, 3)
    cn = np.ascontiguousarray(cot_new.reshape(-1, 3))
    cot = cot_new + tri_scatter_numba(cn, y, lo, h, g)
    dpos = tri_sample_posgrad_numba(u, y, lo, h)
    cot += np.einsum("nab,na->nb", dpos, cn).reshape(u.shape)
    return cot


# ---------------------------------------------------------------------------
# superquadric surface with taper and bend
#
# Shape parameter order everywhere: (a1, a2, a3, e1, e2, t1, t2, b).
# Per point the pre-bend coordinates are products of univariate factors
#   X = a1*f1(e1)*f2(e2)*(1 + t1*f4(e1)),  Y analogous,  Z = a3*f4(e1)
# with f* = sign(c)*|c|^e for the fixed angle cosines/sines, so first and
# second parameter derivatives stay in closed form through the bend stage.
# ---------------------------------------------------------------------------

def _sgnpow_np(x, e):
    return np.sign(x) * np.abs(x) ** e


def _angle_factors_np(eta, omega, e1, e2):
    ceta, seta = np.cos(eta), np.sin(eta)
    com, som = np.cos(omega), np.sin(omega)
    f1 = _sgnpow_np(ceta, e1)
    f4 = _sgnpow_np(seta, e1)
    f2 = _sgnpow_np(com, e2)
    f3 = _sgnpow_np(som, e2)
    l1 = np.log(np.maximum(np.abs(ceta), _LOG_CLAMP))
    l4 = np.log(np.maximum(np.abs(seta), _LOG_CLAMP))
    l2 = np.log(np.maximum(np.abs(com), _LOG_CLAMP))
    l3 = np.log(np.maximum(np.abs(som), _LOG_CLAMP))
    return f1, f2, f3, f4, l1, l2, l3, l4


def sq_surface_numpy(params, eta, omega):
    a1, a2, a3, e1, e2, t1, t2, b = params
    f1, f2, f3, f4, _, _, _, _ = _angle_factors_np(eta, omega, e1, e2)
    x = a1 * f1 * f2 * (1.0 + t1 * f4)
    y = a2 * f1 * f3 * (1.0 + t2 * f4)
    z = a3 * f4
    if abs(b) >= _BEND_EPS:
        gam = b * z
        cg, sg = np.cos(gam), np.sin(gam)
        omc = 2.0 * np.sin(0.5 * gam) ** 2          # 1 - cos, cancellation-free
        sx = omc / b + x * cg
        sz = sg / b - x * sg
        x, z = sx, sz
    return np.stack([x, y, z], axis=-1)


def sq_surface_jac_numpy(params, eta, omega):
    a1, a2, a3, e1, e2, t1, t2, b = params
    n = eta.shape[0]
    f1, f2, f3, f4, l1, l2, l3, l4 = _angle_factors_np(eta, omega, e1, e2)
    f1e, f4e = f1 * l1, f4 * l4
    f2e, f3e = f2 * l2, f3 * l3
    k1 = 1.0 + t1 * f4
    k2 = 1.0 + t2 * f4
    x = a1 * f1 * f2 * k1
    y = a2 * f1 * f3 * k2
    z = a3 * f4

    gx = np.zeros((n, 8))
    gy = np.zeros((n, 8))
    gz = np.zeros((n, 8))
    gx[:, 0] = f1 * f2 * k1
    gx[:, 3] = a1 * f2 * (f1e * k1 + f1 * t1 * f4e)
    gx[:, 4] = a1 * f1 * k1 * f2e
    gx[:, 5] = a1 * f1 * f2 * f4
    gy[:, 1] = f1 * f3 * k2
    gy[:, 3] = a2 * f3 * (f1e * k2 + f1 * t2 * f4e)
    gy[:, 4] = a2 * f1 * k2 * f3e
    gy[:, 6] = a2 * f1 * f3 * f4
    gz[:, 2] = f4
    gz[:, 3] = a3 * f4e

    s = np.empty((n, 3))
    jac = np.empty((n, 3, 8))
    if abs(b) < _BEND_EPS:
        s[:, 0], s[:, 1], s[:, 2] = x, y, z
        jac[:, 0, :] = gx
        jac[:, 1, :] = gy
        jac[:, 2, :] = gz
        jac[:, 0, 7] = 0.5 * z * z
        jac[:, 2, 7] = -x * z
    else:
        gam = b * z
        cg, sg = np.cos(gam), np.sin(gam)
        omc = 2.0 * np.sin(0.5 * gam) ** 2
        sx = omc / b + x * cg
        sz = sg / b - x * sg
        s[:, 0], s[:, 1], s[:, 2] = sx, y, sz
        sx_x, sx_z = cg, b * sz
        sz_x, sz_z = -sg, (1.0 - b * x) * cg
        sx_b = -omc / (b * b) + sz * z
        sz_b = -sg / (b * b) + (1.0 / b - x) * cg * z
        jac[:, 0, :] = sx_x[:, None] * gx + sx_z[:, None] * gz
        jac[:, 1, :] = gy
        jac[:, 2, :] = sz_x[:, None] * gx + sz_z[:, None] * gz
        jac[:, 0, 7] = sx_b
        jac[:, 2, 7] = sz_b
    jac[:, 1, 7] = 0.0
    return s, jac


def sq_hess_apply_numpy(params, eta, omega, v, u):
    """Per-point rows of sum_c v_c * H(s_c) @ u, H the 8x8 shape Hessian."""
    a1, a2, a3, e1, e2, t1, t2, b = params
    n = eta.shape[0]
    u = np.asarray(u, dtype=np.float64)
    f1, f2, f3, f4, l1, l2, l3, l4 = _angle_factors_np(eta, omega, e1, e2)
    f1e, f4e = f1 * l1, f4 * l4
    f2e, f3e = f2 * l2, f3 * l3
    f1ee, f4ee = f1e * l1, f4e * l4
    f2ee, f3ee = f2e * l2, f3e * l3
    k1 = 1.0 + t1 * f4
    k2 = 1.0 + t2 * f4
    x = a1 * f1 * f2 * k1
    y = a2 * f1 * f3 * k2
    z = a3 * f4

    gx = np.zeros((n, 8))
    gy = np.zeros((n, 8))
    gz = np.zeros((n, 8))
    gx[:, 0] = f1 * f2 * k1
    gx[:, 3] = a1 * f2 * (f1e * k1 + f1 * t1 * f4e)
    gx[:, 4] = a1 * f1 * k1 * f2e
    gx[:, 5] = a1 * f1 * f2 * f4
    gy[:, 1] = f1 * f3 * k2
    gy[:, 3] = a2 * f3 * (f1e * k2 + f1 * t2 * f4e)
    gy[:, 4] = a2 * f1 * k2 * f3e
    gy[:, 6] = a2 * f1 * f3 * f4
    gz[:, 2] = f4
    gz[:, 3] = a3 * f4e

    # Hessians of X, Y, Z applied to u (sparse nonzero pattern written out).
    def hx_u():
        h_a1e1 = f2 * (f1e * k1 + f1 * t1 * f4e)
        h_a1e2 = f1 * k1 * f2e
        h_a1t1 = f1 * f2 * f4
        h_e1e1 = a1 * f2 * (f1ee * k1 + 2.0 * f1e * t1 * f4e + f1 * t1 * f4ee)
        h_e1e2 = a1 * f2e * (f1e * k1 + f1 * t1 * f4e)
        h_e1t1 = a1 * f2 * (f1e * f4 + f1 * f4e)
        h_e2e2 = a1 * f1 * k1 * f2ee
        h_e2t1 = a1 * f1 * f2e * f4
        out = np.zeros((n, 8))
        out[:, 0] = h_a1e1 * u[3] + h_a1e2 * u[4] + h_a1t1 * u[5]
        out[:, 3] = h_a1e1 * u[0] + h_e1e1 * u[3] + h_e1e2 * u[4] + h_e1t1 * u[5]
        out[:, 4] = h_a1e2 * u[0] + h_e1e2 * u[3] + h_e2e2 * u[4] + h_e2t1 * u[5]
        out[:, 5] = h_a1t1 * u[0] + h_e1t1 * u[3] + h_e2t1 * u[4]
        return out

    def hy_u():
        h_a2e1 = f3 * (f1e * k2 + f1 * t2 * f4e)
        h_a2e2 = f1 * k2 * f3e
        h_a2t2 = f1 * f3 * f4
        h_e1e1 = a2 * f3 * (f1ee * k2 + 2.0 * f1e * t2 * f4e + f1 * t2 * f4ee)
        h_e1e2 = a2 * f3e * (f1e * k2 + f1 * t2 * f4e)
        h_e1t2 = a2 * f3 * (f1e * f4 + f1 * f4e)
        h_e2e2 = a2 * f1 * k2 * f3ee
        h_e2t2 = a2 * f1 * f3e * f4
        out = np.zeros((n, 8))
        out[:, 1] = h_a2e1 * u[3] + h_a2e2 * u[4] + h_a2t2 * u[6]
        out[:, 3] = h_a2e1 * u[1] + h_e1e1 * u[3] + h_e1e2 * u[4] + h_e1t2 * u[6]
        out[:, 4] = h_a2e2 * u[1] + h_e1e2 * u[3] + h_e2e2 * u[4] + h_e2t2 * u[6]
        out[:, 6] = h_a2t2 * u[1] + h_e1t2 * u[3] + h_e2t2 * u[4]
        return out

    def hz_u():
        out = np.zeros((n, 8))
        out[:, 2] = f4e * u[3]
        out[:, 3] = f4e * u[2] + a3 * f4ee * u[3]
        return out

    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    if abs(b) < _BEND_EPS:
        sx_x = np.ones(n)
        sx_z = np.zeros(n)
        sz_x = np.zeros(n)
        sz_z = np.ones(n)
        sx_xz = np.zeros(n)
        sx_zz = np.zeros(n)
        sx_xb = np.zeros(n)
        sx_zb = z
        sx_bb = -x * z * z
        sz_xz = np.zeros(n)
        sz_zz = np.zeros(n)
        sz_xb = -z
        sz_zb = -x
        sz_bb = -(z ** 3) / 3.0
    else:
        gam = b * z
        cg, sg = np.cos(gam), np.sin(gam)
        omc = 2.0 * np.sin(0.5 * gam) ** 2
        sz_pt = sg / b - x * sg
        sx_x, sx_z = cg, b * sz_pt
        sz_x, sz_z = -sg, (1.0 - b * x) * cg
        sx_xz = -sg * b
        sx_zz = b * (1.0 - b * x) * cg
        sx_xb = -sg * z
        sx_zb = sz_pt - sg / b + (1.0 - b * x) * cg * z
        sx_bb = 2.0 * omc / b ** 3 - 2.0 * sg * z / b ** 2 \
            + (1.0 - b * x) * cg * z * z / b
        sz_xz = -cg * b
        sz_zz = -(1.0 - b * x) * sg * b
        sz_xb = -cg * z
        sz_zb = -x * cg - (1.0 - b * x) * sg * z
        sz_bb = 2.0 * sg / b ** 3 - 2.0 * cg * z / b ** 2 \
            - (1.0 - b * x) * sg * z * z / b

    wx = vx * sx_x + vz * sz_x
    wz = vx * sx_z + vz * sz_z
    c_xz = vx * sx_xz + vz * sz_xz
    c_zz = vx * sx_zz + vz * sz_zz
    c_xb = vx * sx_xb + vz * sz_xb
    c_zb = vx * sx_zb + vz * sz_zb
    c_bb = vx * sx_bb + vz * sz_bb

    alpha = gx @ u
    beta = gz @ u
    ub = u[7]

    rows = wx[:, None] * hx_u() + vy[:, None] * hy_u() + wz[:, None] * hz_u()
    rows += c_xz[:, None] * (gx * beta[:, None] + gz * alpha[:, None])
    rows += c_zz[:, None] * gz * beta[:, None]
    rows += (c_xb * ub)[:, None] * gx
    rows[:, 7] += c_xb * alpha
    rows += (c_zb * ub)[:, None] * gz
    rows[:, 7] += c_zb * beta
    rows[:, 7] += c_bb * ub
    return rows


@njit(cache=True)
def _sgnpow(x, e):
    if x > 0.0:
        return x ** e
    if x < 0.0:
        return -((-x) ** e)
    return 0.0


@njit(cache=True)
def _clogabs(x):
    ax = abs(x)
    if ax < _LOG_CLAMP:
        ax = _LOG_CLAMP
    return np.log(ax)


@njit(cache=True, parallel=True)
def _sq_surface_nb(params, eta, omega):
    a1, a2, a3, e1, e2, t1, t2, b = (params[0], params[1], params[2], params[3],
                                     params[4], params[5], params[6], params[7])
    n = eta.shape[0]
    out = np.empty((n, 3))
    bend = abs(b) >= _BEND_EPS
    for i in prange(n):
        f1 = _sgnpow(np.cos(eta[i]), e1)
        f4 = _sgnpow(np.sin(eta[i]), e1)
        f2 = _sgnpow(np.cos(omega[i]), e2)
        f3 = _sgnpow(np.sin(omega[i]), e2)
        x = a1 * f1 * f2 * (1.0 + t1 * f4)
        y = a2 * f1 * f3 * (1.0 + t2 * f4)
        z = a3 * f4
        if bend:
            gam = b * z
            cg = np.cos(gam)
            sg = np.sin(gam)
            omc = 2.0 * np.sin(0.5 * gam) ** 2
            sx = omc / b + x * cg
            sz = sg / b - x * sg
            x = sx
            z = sz
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = z
    return out


@njit(cache=True, parallel=True)
def _sq_surface_jac_nb(params, eta, omega):
    a1, a2, a3, e1, e2, t1, t2, b = (params[0], params[1], params[2], params[3],
                                     params[4], params[5], params[6], params[7])
    n = eta.shape[0]
    s = np.empty((n, 3))
    jac = np.zeros((n, 3, 8))
    bend = abs(b) >= _BEND_EPS
    for i in prange(n):
        ce, se = np.cos(eta[i]), np.sin(eta[i])
        co, so = np.cos(omega[i]), np.sin(omega[i])
        f1 = _sgnpow(ce, e1)
        f4 = _sgnpow(se, e1)
        f2 = _sgnpow(co, e2)
        f3 = _sgnpow(so, e2)
        f1e = f1 * _clogabs(ce)
        f4e = f4 * _clogabs(se)
        f2e = f2 * _clogabs(co)
        f3e = f3 * _clogabs(so)
        k1 = 1.0 + t1 * f4
        k2 = 1.0 + t2 * f4
        x = a1 * f1 * f2 * k1
        y = a2 * f1 * f3 * k2
        z = a3 * f4

        gx = np.zeros(8)
        gy = np.zeros(8)
        gz = np.zeros(8)
        gx[0] = f1 * f2 * k1
        gx[3] = a1 * f2 * (f1e * k1 + f1 * t1 * f4e)
        gx[4] = a1 * f1 * k1 * f2e
        gx[5] = a1 * f1 * f2 * f4
        gy[1] = f1 * f3 * k2
        gy[3] = a2 * f3 * (f1e * k2 + f1 * t2 * f4e)
        gy[4] = a2 * f1 * k2 * f3e
        gy[6] = a2 * f1 * f3 * f4
        gz[2] = f4
        gz[3] = a3 * f4e

        if not bend:
            s[i, 0] = x
            s[i, 1] = y
            s[i, 2] = z
            for k in range(8):
                jac[i, 0, k] = gx[k]
                jac[i, 1, k] = gy[k]
                jac[i, 2, k] = gz[k]
            jac[i, 0, 7] = 0.5 * z * z
            jac[i, 2, 7] = -x * z
        else:
            gam = b * z
            cg = np.cos(gam)
            sg = np.sin(gam)
            omc = 2.0 * np.sin(0.5 * gam) ** 2
            sx = omc / b + x * cg
            sz = sg / b - x * sg
            s[i, 0] = sx
            s[i, 1] = y
            s[i, 2] = sz
            sx_x = cg
            sx_z = b * sz
            sz_x = -sg
            sz_z = (1.0 - b * x) * cg
            for k in range(8):
                jac[i, 0, k] = sx_x * gx[k] + sx_z * gz[k]
                jac[i, 1, k] = gy[k]
                jac[i, 2, k] = sz_x * gx[k] + sz_z * gz[k]
            jac[i, 0, 7] = -omc / (b * b) + sz * z
            jac[i, 2, 7] = -sg / (b * b) + (1.0 / b - x) * cg * z
    return s, jac


@njit(cache=True, parallel=True)
def _sq_hess_apply_nb(params, eta, omega, v, u):
    a1, a2, a3, e1, e2, t1, t2, b = (params[0], params[1], params[2], params[3],
                                     params[4], params[5], params[6], params[7])
    n = eta.shape[0]
    rows = np.zeros((n, 8))
    bend = abs(b) >= _BEND_EPS
    for i in prange(n):
        ce, se = np.cos(eta[i]), np.sin(eta[i])
        co, so = np.cos(omega[i]), np.sin(omega[i])
        f1 = _sgnpow(ce, e1)
        f4 = _sgnpow(se, e1)
        f2 = _sgnpow(co, e2)
        f3 = _sgnpow(so, e2)
        l1 = _clogabs(ce)
        l4 = _clogabs(se)
        l2 = _clogabs(co)
        l3 = _clogabs(so)
        f1e, f4e = f1 * l1, f4 * l4
        f2e, f3e = f2 * l2, f3 * l3
        f1ee, f4ee = f1e * l1, f4e * l4
        f2ee, f3ee = f2e * l2, f3e * l3
        k1 = 1.0 + t1 * f4
        k2 = 1.0 + t2 * f4
        x = a1 * f1 * f2 * k1
        z = a3 * f4

        gx = np.zeros(8)
        gy = np.zeros(8)
        gz = np.zeros(8)
        gx[0] = f1 * f2 * k1
        gx[3] = a1 * f2 * (f1e * k1 + f1 * t1 * f4e)
        gx[4] = a1 * f1 * k1 * f2e
        gx[5] = a1 * f1 * f2 * f4
        gy[1] = f1 * f3 * k2
        gy[3] = a2 * f3 * (f1e * k2 + f1 * t2 * f4e)
        gy[4] = a2 * f1 * k2 * f3e
        gy[6] = a2 * f1 * f3 * f4
        gz[2] = f4
        gz[3] = a3 * f4e

        if not bend:
            sx_x = 1.0
            sx_z = 0.0
            sz_x = 0.0
            sz_z = 1.0
            sx_xz = 0.0
            sx_zz = 0.0
            sx_xb = 0.0
            sx_zb = z
            sx_bb = -x * z * z
            sz_xz = 0.0
            sz_zz = 0.0
            sz_xb = -z
            sz_zb = -x
            sz_bb = -(z ** 3) / 3.0
        else:
            gam = b * z
            cg = np.cos(gam)
            sg = np.sin(gam)
            omc = 2.0 * np.sin(0.5 * gam) ** 2
            sz_pt = sg / b - x * sg
            sx_x = cg
            sx_z = b * sz_pt
            sz_x = -sg
            sz_z = (1.0 - b * x) * cg
            sx_xz = -sg * b
            sx_zz = b * (1.0 - b * x) * cg
            sx_xb = -sg * z
            sx_zb = sz_pt - sg / b + (1.0 - b * x) * cg * z
            sx_bb = 2.0 * omc / b ** 3 - 2.0 * sg * z / b ** 2 \
                + (1.0 - b * x) * cg * z * z / b
            sz_xz = -cg * b
            sz_zz = -(1.0 - b * x) * sg * b
            sz_xb = -cg * z
            sz_zb = -x * cg - (1.0 - b * x) * sg * z
            sz_bb = 2.0 * sg / b ** 3 - 2.0 * cg * z / b ** 2 \
                - (1.0 - b * x) * sg * z * z / b

        vx, vy, vz = v[i, 0], v[i, 1], v[i, 2]
        wx = vx * sx_x + vz * sz_x
        wz = vx * sx_z + vz * sz_z
        c_xz = vx * sx_xz + vz * sz_xz
        c_zz = vx * sx_zz + vz * sz_zz
        c_xb = vx * sx_xb + vz * sz_xb
        c_zb = vx * sx_zb + vz * sz_zb
        c_bb = vx * sx_bb + vz * sz_bb

        # H(X) @ u
        h_a1e1 = f2 * (f1e * k1 + f1 * t1 * f4e)
        h_a1e2 = f1 * k1 * f2e
        h_a1t1 = f1 * f2 * f4
        h_e1e1 = a1 * f2 * (f1ee * k1 + 2.0 * f1e * t1 * f4e + f1 * t1 * f4ee)
        h_e1e2 = a1 * f2e * (f1e * k1 + f1 * t1 * f4e)
        h_e1t1 = a1 * f2 * (f1e * f4 + f1 * f4e)
        h_e2e2 = a1 * f1 * k1 * f2ee
        h_e2t1 = a1 * f1 * f2e * f4
        hxu = np.zeros(8)
        hxu[0] = h_a1e1 * u[3] + h_a1e2 * u[4] + h_a1t1 * u[5]
        hxu[3] = h_a1e1 * u[0] + h_e1e1 * u[3] + h_e1e2 * u[4] + h_e1t1 * u[5]
        hxu[4] = h_a1e2 * u[0] + h_e1e2 * u[3] + h_e2e2 * u[4] + h_e2t1 * u[5]
        hxu[5] = h_a1t1 * u[0] + h_e1t1 * u[3] + h_e2t1 * u[4]

        # H(Y) @ u
        h_a2e1 = f3 * (f1e * k2 + f1 * t2 * f4e)
        h_a2e2 = f1 * k2 * f3e
        h_a2t2 = f1 * f3 * f4
        hy_e1e1 = a2 * f3 * (f1ee * k2 + 2.0 * f1e * t2 * f4e + f1 * t2 * f4ee)
        hy_e1e2 = a2 * f3e * (f1e * k2 + f1 * t2 * f4e)
        hy_e1t2 = a2 * f3 * (f1e * f4 + f1 * f4e)
        hy_e2e2 = a2 * f1 * k2 * f3ee
        hy_e2t2 = a2 * f1 * f3e * f4
        hyu = np.zeros(8)
        hyu[1] = h_a2e1 * u[3] + h_a2e2 * u[4] + h_a2t2 * u[6]
        hyu[3] = h_a2e1 * u[1] + hy_e1e1 * u[3] + hy_e1e2 * u[4] + hy_e1t2 * u[6]
        hyu[4] = h_a2e2 * u[1] + hy_e1e2 * u[3] + hy_e2e2 * u[4] + hy_e2t2 * u[6]
        hyu[6] = h_a2t2 * u[1] + hy_e1t2 * u[3] + hy_e2t2 * u[4]

        # H(Z) @ u
        hzu = np.zeros(8)
        hzu[2] = f4e * u[3]
        hzu[3] = f4e * u[2] + a3 * f4ee * u[3]

        alpha = 0.0
        beta = 0.0
        for k in range(8):
            alpha += gx[k] * u[k]
            beta += gz[k] * u[k]
        ub = u[7]

        for k in range(8):
            rows[i, k] = (wx * hxu[k] + vy * hyu[k] + wz * hzu[k]
                          + c_xz * (gx[k] * beta + gz[k] * alpha)
                          + c_zz * gz[k] * beta
                          + c_xb * ub * gx[k]
                          + c_zb * ub * gz[k])
        rows[i, 7] += c_xb * alpha + c_zb * beta + c_bb * ub
    return rows


def sq_surface_numba(params, eta, omega):
    return _sq_surface_nb(np.ascontiguousarray(params, dtype=np.float64),
                          np.ascontiguousarray(eta), np.ascontiguousarray(omega))


def sq_surface_jac_numba(params, eta, omega):
    return _sq_surface_jac_nb(np.ascontiguousarray(params, dtype=np.float64),
                              np.ascontiguousarray(eta), np.ascontiguousarray(omega))


def sq_hess_apply_numba(params, eta, omega, v, u):
    return _sq_hess_apply_nb(np.ascontiguousarray(params, dtype=np.float64),
                             np.ascontiguousarray(eta), np.ascontiguousarray(omega),
                             np.ascontiguousarray(v),
                             np.ascontiguousarray(u, dtype=np.float64))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USING_NUMBA:
    nn_sqdist = nn_sqdist_numba
    tri_sample = tri_sample_numba
    tri_sample_posgrad = tri_sample_posgrad_numba
    tri_scatter = tri_scatter_numba
    flow_compose = flow_compose_numba
    flow_compose_vjp = flow_compose_vjp_numba
    sq_surface = sq_surface_numba
    sq_surface_jac = sq_surface_jac_numba
    sq_hess_apply = sq_hess_apply_numba
else:
    nn_sqdist = nn_sqdist_numpy
    tri_sample = tri_sample_numpy
    tri_sample_posgrad = tri_sample_posgrad_numpy
    tri_scatter = tri_scatter_numpy
    flow_compose = flow_compose_numpy
    flow_compose_vjp = flow_compose_vjp_numpy
    sq_surface = sq_surface_numpy
    sq_surface_jac = sq_surface_jac_numpy
    sq_hess_apply = sq_hess_apply_numpy
