"""Diffeomorphic local deformation from a stationary velocity field.

A velocity field lives on a regular cube grid; Gaussian smoothing plus a
magnitude cap keep it well behaved, and scaling-and-squaring integration
turns it into a displacement field whose flow is invertible (integrate the
negated velocities for the inverse).  FlowTape records the integration so
the gradient of anything sampled from the displacement field can be pushed
back to the raw grid values by exact reverse-mode.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import FlowBlowup

DEFAULT_RESOLUTION = 16
DEFAULT_HALF_WIDTH = 2.0
DEFAULT_SIGMA = 1.5
DEFAULT_SS_STEPS = 7
VELOCITY_CAP = 0.25


@dataclass
class VelocityGrid:
    """Raw velocity vectors on a (g, g, g) node grid over [-half, half]^3."""
    resolution: int = DEFAULT_RESOLUTION
    half_width: float = DEFAULT_HALF_WIDTH
    sigma: float = DEFAULT_SIGMA
    values: np.ndarray = None

    def __post_init__(self):
        g = int(self.resolution)
        if g < 2:
            raise ValueError("grid resolution must be at least 2")
        self.resolution = g
        self.half_width = float(self.half_width)
        self.sigma = float(self.sigma)
        if self.sigma <= 0:
            raise ValueError("smoothing sigma must be positive")
        if self.values is None:
            self.values = np.zeros((g, g, g, 3))
        else:
            self.values = np.asarray(self.values, dtype=np.float64)
            if self.values.shape != (g, g, g, 3):
                raise ValueError("velocity values must have shape (g, g, g, 3)")

    @property
    def spacing(self):
        return 2.0 * self.half_width / (self.resolution - 1)

    @property
    def origin(self):
        return -self.half_width

    def copy(self):
        return VelocityGrid(self.resolution, self.half_width, self.sigma,
                            self.values.copy())


@dataclass
class DisplacementField:
    """Integrated displacement on the same node layout as its grid."""
    resolution: int
    half_width: float
    values: np.ndarray

    @property
    def spacing(self):
        return 2.0 * self.half_width / (self.resolution - 1)

    @property
    def origin(self):
        return -self.half_width


@lru_cache(maxsize=32)
def _smooth_matrix(g, sigma):
    """Per-axis smoothing operator: truncated Gaussian rows, renormalized."""
    radius = int(np.ceil(2.0 * sigma))
    idx = np.arange(g)
    diff = idx[:, None] - idx[None, :]
    w = np.exp(-0.5 * (diff / sigma) ** 2)
    w[np.abs(diff) > radius] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    return w


def _apply_axis(mat, vals, axis):
    return np.moveaxis(np.tensordot(mat, np.moveaxis(vals, axis, 0), axes=(1, 0)), 0, axis)


def smooth(grid, cap=VELOCITY_CAP):
    """Separable Gaussian smoothing followed by a component clamp."""
    w = _smooth_matrix(grid.resolution, grid.sigma)
    vals = grid.values
    for axis in range(3):
        vals = _apply_axis(w, vals, axis)
    vals = np.clip(vals, -cap, cap)
    return VelocityGrid(grid.resolution, grid.half_width, grid.sigma, vals)


def _smooth_forward_with_mask(grid, cap):
    w = _smooth_matrix(grid.resolution, grid.sigma)
    vals = grid.values
    for axis in range(3):
        vals = _apply_axis(w, vals, axis)
    mask = np.abs(vals) < cap
    return np.clip(vals, -cap, cap), mask


def _smooth_adjoint(grid, cot):
    w = _smooth_matrix(grid.resolution, grid.sigma)
    for axis in (2, 1, 0):
        cot = _apply_axis(w.T, cot, axis)
    return cot


class FlowTape:
    """Forward scaling-and-squaring integration with a reverse-mode tape."""

    def __init__(self, grid, steps=DEFAULT_SS_STEPS, negate=False, cap=VELOCITY_CAP):
        if steps < 0:
            raise ValueError("step count must be non-negative")
        self.grid = grid
        self.steps = int(steps)
        self.cap = cap
        # zero fields flow to the identity; skip the integration entirely
        # (the reverse pass collapses to the smoothing adjoint there too)
        self._zero = not np.any(grid.values)
        if self._zero:
            self._mask = None
            self._negate = negate
            self._levels = []
            self.field = DisplacementField(grid.resolution, grid.half_width,
                                           np.zeros_like(grid.values))
            return
        smoothed, self._mask = _smooth_forward_with_mask(grid, cap)
        if negate:
            smoothed = -smoothed
        self._negate = negate
        lo, h = grid.origin, grid.spacing
        u = smoothed / 2.0 ** self.steps
        self._levels = []
        for _ in range(self.steps):
            self._levels.append(u)
            u = kernels.flow_compose(u, lo, h)
            if np.max(np.abs(u)) > grid.half_width:
                raise FlowBlowup("integrated displacement left the grid domain")
        self.field = DisplacementField(grid.resolution, grid.half_width, u)

    def displacement_at(self, pts):
        if self._zero:
            return np.zeros((np.atleast_2d(pts).shape[0], 3))
        return kernels.tri_sample(self.field.values, np.atleast_2d(pts),
                                  self.grid.origin, self.grid.spacing)

    def posgrad_at(self, pts):
        if self._zero:
            return np.zeros((np.atleast_2d(pts).shape[0], 3, 3))
        return kernels.tri_sample_posgrad(self.field.values, np.atleast_2d(pts),
                                          self.grid.origin, self.grid.spacing)

    def backward(self, cot_field):
        """Cotangent on the final field -> gradient w.r.t. raw grid values."""
        cot = cot_field
        if self._zero:
            if self._negate:
                cot = -cot
            return _smooth_adjoint(self.grid, cot)
        lo, h = self.grid.origin, self.grid.spacing
        for u in reversed(self._levels):
            cot = kernels.flow_compose_vjp(u, cot, lo, h)
        cot = cot / 2.0 ** self.steps
        if self._negate:
            cot = -cot
        cot = np.where(self._mask, cot, 0.0)
        return _smooth_adjoint(self.grid, cot)

    def scatter_points(self, pts, cotangents):
        """Cotangent of per-point displacement samples -> final-field layout."""
        return kernels.tri_scatter(np.atleast_2d(cotangents), np.atleast_2d(pts),
                                   self.grid.origin, self.grid.spacing,
                                   self.grid.resolution)


def integrate_svf(grid, steps=DEFAULT_SS_STEPS):
    """Displacement field of the unit-time flow of the (smoothed) velocity."""
    return FlowTape(grid, steps).field


def inverse_displacement(grid, steps=DEFAULT_SS_STEPS):
    """Displacement field of the inverse flow (negated velocities)."""
    return FlowTape(grid, steps, negate=True).field


def displacement_at(fld, pts):
    """Trilinear displacement samples; zero outside the grid domain."""
    return kernels.tri_sample(fld.values, np.atleast_2d(pts), fld.origin, fld.spacing)


def grid_gradient(grid, pts, cotangents, steps=DEFAULT_SS_STEPS):
    """Gradient of sum_n cot_n . d(p_n) w.r.t. the raw grid values.

    Exact reverse-mode through sampling, every squaring step, the velocity
    cap, and the Gaussian smoothing.
    """
    tape = FlowTape(grid, steps)
    cot_field = tape.scatter_points(pts, cotangents)
    return tape.backward(cot_field)


def interior_jacobian_determinants(fld):
    """det(I + Du) of the warp at all interior cell centers."""
    g = fld.resolution
    h = fld.spacing
    ax = fld.origin + h * (np.arange(g - 1) + 0.5)
    cx, cy, cz = np.meshgrid(ax[1:-1], ax[1:-1], ax[1:-1], indexing="ij")
    centers = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)
    du = kernels.tri_sample_posgrad(fld.values, centers, fld.origin, h)
    return np.linalg.det(np.eye(3) + du)
