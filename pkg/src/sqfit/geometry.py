"""Superquadric geometry: parametric/implicit surfaces, taper and bend
deformations with exact inverses, quaternion pose and camera transforms,
perspective projection, and the per-point Jacobian blocks used by the
force machinery.

Shape parameter vector order everywhere: (a1, a2, a3, e1, e2, t1, t2, b).
The full per-point model Jacobian is the 3x18 block row
[I | B | R J | R] for translation, rotation quaternion, shape vector, and
local displacement.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, quaternion
from .errors import BehindCamera, BendOutOfRange, TaperSingular

EPS_MIN, EPS_MAX = 0.1, 2.0
TAPER_LIMIT = 0.999          # |t| bound keeping 1 + t*z/a3 > 0 on the body
BEND_EPS = 1e-8              # below this |b| the bend is the identity
SCALE_MIN, SCALE_MAX = 0.01, 2.5
Z_MIN_FACTOR = 1e-4          # camera-space z must exceed this times focal


@dataclass
class GlobalShapeParams:
    """Scale, squareness, taper, and bend of one primitive."""
    a: np.ndarray = field(default_factory=lambda: np.ones(3))
    eps: np.ndarray = field(default_factory=lambda: np.ones(2))
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))
    b: float = 0.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(3).copy()
        self.eps = np.asarray(self.eps, dtype=np.float64).reshape(2).copy()
        self.t = np.asarray(self.t, dtype=np.float64).reshape(2).copy()
        self.b = float(self.b)

    def validate(self):
        if not np.all(self.a > 0):
            raise ValueError("scale lengths must be positive")
        if np.any(self.eps < EPS_MIN) or np.any(self.eps > EPS_MAX):
            raise ValueError(f"squareness must lie in [{EPS_MIN}, {EPS_MAX}]")
        if np.any(np.abs(self.t) >= 1.0):
            raise ValueError("taper coefficients must lie in (-1, 1)")
        if abs(self.b * self.a[2]) > 1.0 + 1e-12:
            raise ValueError("|b * a3| must not exceed 1")

    def vector(self):
        return np.concatenate([self.a, self.eps, self.t, [self.b]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(a=v[0:3], eps=v[3:5], t=v[5:7], b=v[7])


@dataclass
class PrimitivePose:
    c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: quaternion.IDENTITY.copy())

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).reshape(3).copy()
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4).copy()

    def rotation(self):
        return quaternion.to_matrix(self.q)


@dataclass
class CameraParams:
    c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: quaternion.IDENTITY.copy())
    focal: float = 2.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).reshape(3).copy()
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4).copy()
        self.focal = float(self.focal)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")

    def rotation(self):
        return quaternion.to_matrix(self.q)


def default_camera(distance=2.5, focal=2.0):
    """Camera on +z looking down -z (rotation by pi about x maps -z to +z)."""
    q = np.array([0.0, 1.0, 0.0, 0.0])
    return CameraParams(c=np.array([0.0, 0.0, distance]), q=q, focal=focal)


# ---------------------------------------------------------------------------
# sampling grid
# ---------------------------------------------------------------------------

def angle_grid(n):
    """Half-step-offset (eta, omega) grid with roughly 2:1 aspect.

    Offsets keep eta away from the poles and omega away from multiples of
    pi/2, where the squareness exponents are non-smooth.  Returns exactly n
    points.
    """
    best = None
    ideal = np.sqrt(n / 2.0)
    for nh in range(2, int(np.sqrt(n)) + 1):
        if n % nh:
            continue
        nw = n // nh
        if nw % 2:
            continue
        pen = (abs(np.log(nw / (2.0 * nh))), abs(nh - ideal))
        if best is None or pen < best[0]:
            best = (pen, nh, nw)
    if best is not None:
        _, nh, nw = best
        trunc = n
    else:
        nh = max(2, int(round(ideal)))
        nw = -(-n // nh)
        nw += nw % 2
        trunc = n
    eta = -0.5 * np.pi + (np.arange(nh) + 0.5) * np.pi / nh
    omega = -np.pi + (np.arange(nw) + 0.5) * 2.0 * np.pi / nw
    ee, oo = np.meshgrid(eta, omega, indexing="ij")
    return ee.ravel()[:trunc].copy(), oo.ravel()[:trunc].copy()


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------

def _sgnpow(x, e):
    return np.sign(x) * np.abs(x) ** e


def superquadric_surface(gsp, eta, omega):
    """Base superquadric points e(eta, omega), before taper and bend."""
    eta = np.asarray(eta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    ce = _sgnpow(np.cos(eta), gsp.eps[0])
    se = _sgnpow(np.sin(eta), gsp.eps[0])
    co = _sgnpow(np.cos(omega), gsp.eps[1])
    so = _sgnpow(np.sin(omega), gsp.eps[1])
    return np.stack([gsp.a[0] * ce * co, gsp.a[1] * ce * so, gsp.a[2] * se], axis=-1)


def global_surface(gsp, eta, omega):
    """Surface after taper and bend: s(eta, omega)."""
    return kernels.sq_surface(gsp.vector(),
                              np.asarray(eta, dtype=np.float64),
                              np.asarray(omega, dtype=np.float64))


def implicit_value(gsp, pts):
    """Inside-outside function in the pre-taper/bend frame (<1 inside)."""
    pts = np.atleast_2d(pts)
    e1, e2 = gsp.eps
    xa = np.abs(pts[:, 0] / gsp.a[0]) ** (2.0 / e2)
    ya = np.abs(pts[:, 1] / gsp.a[1]) ** (2.0 / e2)
    za = np.abs(pts[:, 2] / gsp.a[2]) ** (2.0 / e1)
    return (xa + ya) ** (e2 / e1) + za


def implicit_gradient(gsp, pts):
    """Gradient of implicit_value; callers keep points off the axes."""
    pts = np.atleast_2d(pts)
    e1, e2 = gsp.eps
    tiny = 1e-300
    xs = pts[:, 0] / gsp.a[0]
    ys = pts[:, 1] / gsp.a[1]
    zs = pts[:, 2] / gsp.a[2]
    xa = np.abs(xs) ** (2.0 / e2)
    ya = np.abs(ys) ** (2.0 / e2)
    ssum = np.maximum(xa + ya, tiny)
    outer = (e2 / e1) * ssum ** (e2 / e1 - 1.0)
    gx = outer * (2.0 / e2) * np.abs(xs) ** (2.0 / e2 - 1.0) * np.sign(xs) / gsp.a[0]
    gy = outer * (2.0 / e2) * np.abs(ys) ** (2.0 / e2 - 1.0) * np.sign(ys) / gsp.a[1]
    gz = (2.0 / e1) * np.abs(zs) ** (2.0 / e1 - 1.0) * np.sign(zs) / gsp.a[2]
    return np.stack([gx, gy, gz], axis=-1)


# ---------------------------------------------------------------------------
# taper / bend point operations
# ---------------------------------------------------------------------------

def _taper_factors(gsp, z):
    k1 = 1.0 + gsp.t[0] * z / gsp.a[2]
    k2 = 1.0 + gsp.t[1] * z / gsp.a[2]
    if np.any(k1 <= 1e-9) or np.any(k2 <= 1e-9):
        raise TaperSingular("taper scale factor vanished")
    return k1, k2


def taper(gsp, pts):
    pts = np.atleast_2d(pts).astype(np.float64)
    k1, k2 = _taper_factors(gsp, pts[:, 2])
    return np.stack([pts[:, 0] * k1, pts[:, 1] * k2, pts[:, 2]], axis=-1)


def taper_inverse(gsp, pts):
    pts = np.atleast_2d(pts).astype(np.float64)
    k1, k2 = _taper_factors(gsp, pts[:, 2])
    return np.stack([pts[:, 0] / k1, pts[:, 1] / k2, pts[:, 2]], axis=-1)


def bend(gsp, pts):
    pts = np.atleast_2d(pts).astype(np.float64)
    b = gsp.b
    if abs(b) < BEND_EPS:
        return pts.copy()
    gam = b * pts[:, 2]
    if np.any(np.abs(gam) >= 0.5 * np.pi):
        raise BendOutOfRange("bend arc angle reached pi/2")
    cg, sg = np.cos(gam), np.sin(gam)
    omc = 2.0 * np.sin(0.5 * gam) ** 2
    x = pts[:, 0]
    return np.stack([omc / b + x * cg, pts[:, 1], sg / b - x * sg], axis=-1)


def bend_inverse(gsp, pts):
    pts = np.atleast_2d(pts).astype(np.float64)
    b = gsp.b
    if abs(b) < BEND_EPS:
        return pts.copy()
    r = 1.0 / b
    xp, zp = pts[:, 0], pts[:, 2]
    gam = np.arctan2(np.sign(b) * zp, np.sign(b) * (r - xp))
    if np.any(np.abs(gam) >= 0.5 * np.pi):
        raise BendOutOfRange("bend arc angle reached pi/2")
    z = gam / b
    sg = np.sin(gam)
    cg = np.cos(gam)
    x = np.where(np.abs(sg) < 1e-6, r - (r - xp) / cg, r - zp / np.where(sg == 0, 1.0, sg))
    return np.stack([x, pts[:, 1], z], axis=-1)


# ---------------------------------------------------------------------------
# rigid transforms and projection
# ---------------------------------------------------------------------------

def world_transform(pose, pts):
    return pose.c + np.atleast_2d(pts) @ pose.rotation().T


def camera_transform(cam, pts):
    return cam.c + np.atleast_2d(pts) @ cam.rotation().T


def _check_in_front(cam, xs):
    zmin = Z_MIN_FACTOR * cam.focal
    bad = np.nonzero(xs[:, 2] < zmin)[0]
    if bad.size:
        raise BehindCamera(bad)


def project(cam, xs):
    xs = np.atleast_2d(xs)
    _check_in_front(cam, xs)
    z = xs[:, 2]
    return np.stack([xs[:, 0] * cam.focal / z, xs[:, 1] * cam.focal / z], axis=-1)


def projection_jacobian(cam, xs):
    """P[n] = d(x_proj)/d(x_cam), shape (n, 2, 3)."""
    xs = np.atleast_2d(xs)
    _check_in_front(cam, xs)
    f = cam.focal
    z = xs[:, 2]
    n = xs.shape[0]
    p = np.zeros((n, 2, 3))
    p[:, 0, 0] = f / z
    p[:, 1, 1] = f / z
    p[:, 0, 2] = -xs[:, 0] * f / z ** 2
    p[:, 1, 2] = -xs[:, 1] * f / z ** 2
    return p


def projection_jacobian_vjp(cam, xs, cot_p):
    """d(sum cot_p : P)/d(x_cam), shape (n, 3)."""
    xs = np.atleast_2d(xs)
    f = cam.focal
    z = xs[:, 2]
    out = np.zeros_like(xs)
    out[:, 0] = -cot_p[:, 0, 2] * f / z ** 2
    out[:, 1] = -cot_p[:, 1, 2] * f / z ** 2
    out[:, 2] = (-(cot_p[:, 0, 0] + cot_p[:, 1, 1]) * f / z ** 2
                 + 2.0 * f / z ** 3 * (cot_p[:, 0, 2] * xs[:, 0]
                                       + cot_p[:, 1, 2] * xs[:, 1]))
    return out


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def shape_jacobian(gsp, eta, omega):
    """Per-point d(global surface)/d(shape vector), shape (n, 3, 8)."""
    _, jac = kernels.sq_surface_jac(gsp.vector(),
                                    np.asarray(eta, dtype=np.float64),
                                    np.asarray(omega, dtype=np.float64))
    return jac


def rotation_jacobian(pose, pts):
    """Per-point B = d(R p)/dq, shape (n, 3, 4)."""
    return quaternion.rotate_jacobian(pose.q, np.atleast_2d(pts))


def model_jacobian(pose, gsp, eta, omega, pts):
    """Per-point 3x18 block matrix [I | B | R J | R].

    Columns: translation (3), rotation quaternion (4), shape vector (8),
    local displacement (3).  pts are the model-frame points p = s + d at
    which the rotation block is linearized.
    """
    pts = np.atleast_2d(pts)
    n = pts.shape[0]
    rot = pose.rotation()
    jac = shape_jacobian(gsp, eta, omega)
    out = np.zeros((n, 3, 18))
    out[:, :, 0:3] = np.eye(3)
    out[:, :, 3:7] = rotation_jacobian(pose, pts)
    out[:, :, 7:15] = np.einsum("rc,nck->nrk", rot, jac)
    out[:, :, 15:18] = rot
    return out


def modified_model_jacobian(cam, pose, gsp, eta, omega, pts, xs):
    """Per-point 2x18 image-space Jacobian P R_cam L."""
    lmat = model_jacobian(pose, gsp, eta, omega, pts)
    p = projection_jacobian(cam, xs)
    pr = np.einsum("nij,jk->nik", p, cam.rotation())
    return np.einsum("nij,njk->nik", pr, lmat)
