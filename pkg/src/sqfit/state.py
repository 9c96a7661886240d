"""Model state: primitive parameter bundles and the fit-state container."""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import flowfield, geometry, quaternion


@dataclass
class PrimitiveParams:
    """Full parameter set of one primitive: pose, global shape, local field."""
    pose: geometry.PrimitivePose = field(default_factory=geometry.PrimitivePose)
    shape: geometry.GlobalShapeParams = field(default_factory=geometry.GlobalShapeParams)
    grid: flowfield.VelocityGrid = field(default_factory=flowfield.VelocityGrid)

    def copy(self):
        return PrimitiveParams(
            pose=geometry.PrimitivePose(self.pose.c.copy(), self.pose.q.copy()),
            shape=geometry.GlobalShapeParams(self.shape.a, self.shape.eps,
                                             self.shape.t, self.shape.b),
            grid=self.grid.copy(),
        )


@dataclass
class FitState:
    """Primitives plus camera, normalization, and the running loss trace."""
    primitives: list
    camera: geometry.CameraParams = None
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    iteration: int = 0
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)

    @property
    def n_prim(self):
        return len(self.primitives)

    def copy(self):
        cam = None
        if self.camera is not None:
            cam = geometry.CameraParams(self.camera.c.copy(), self.camera.q.copy(),
                                        self.camera.focal)
        return FitState([p.copy() for p in self.primitives], cam,
                        self.center.copy(), self.scale, self.iteration,
                        list(self.loss_trace))


@lru_cache(maxsize=64)
def cached_angle_grid(n):
    eta, omega = geometry.angle_grid(n)
    eta.setflags(write=False)
    omega.setflags(write=False)
    return eta, omega


def surface_points(prim, n=1000, ss_steps=flowfield.DEFAULT_SS_STEPS):
    """World-frame surface samples of one primitive (global + local deform)."""
    eta, omega = cached_angle_grid(n)
    s = geometry.global_surface(prim.shape, eta, omega)
    d = flowfield.displacement_at(flowfield.integrate_svf(prim.grid, ss_steps), s)
    return geometry.world_transform(prim.pose, s + d)


@dataclass
class SurfacePointBatch:
    """All stages of the point chain for one primitive and one camera."""
    eta: np.ndarray
    omega: np.ndarray
    s: np.ndarray
    p: np.ndarray
    x: np.ndarray
    x_cam: np.ndarray = None
    x_proj: np.ndarray = None


def surface_point_batch(prim, n=1000, camera=None,
                        ss_steps=flowfield.DEFAULT_SS_STEPS):
    eta, omega = cached_angle_grid(n)
    s = geometry.global_surface(prim.shape, eta, omega)
    d = flowfield.displacement_at(flowfield.integrate_svf(prim.grid, ss_steps), s)
    p = s + d
    x = geometry.world_transform(prim.pose, p)
    batch = SurfacePointBatch(eta=eta, omega=omega, s=s, p=p, x=x)
    if camera is not None:
        batch.x_cam = geometry.camera_transform(camera, x)
        batch.x_proj = geometry.project(camera, batch.x_cam)
    return batch


def identity_primitive(center=(0.0, 0.0, 0.0), radius=0.15,
                       grid_resolution=flowfield.DEFAULT_RESOLUTION,
                       grid_sigma=flowfield.DEFAULT_SIGMA):
    """Small sphere primitive with identity rotation and zero local field."""
    return PrimitiveParams(
        pose=geometry.PrimitivePose(c=np.asarray(center, dtype=np.float64),
                                    q=quaternion.IDENTITY.copy()),
        shape=geometry.GlobalShapeParams(a=np.full(3, radius), eps=np.ones(2),
                                         t=np.zeros(2), b=0.0),
        grid=flowfield.VelocityGrid(resolution=grid_resolution, sigma=grid_sigma),
    )
