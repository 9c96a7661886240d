"""Finite-difference verification of every analytic gradient and Jacobian.

Used by the test suite and by the `gradcheck` CLI subcommand.  Errors are
normalized max deviations: max_i |a_i - b_i| / max(max|a|, max|b|, floor).
"""

import time

import numpy as np

from . import dynamics, flowfield, geometry, quaternion
from .state import PrimitiveParams, cached_angle_grid

FD_STEP = 1e-6
_FLOOR = 1e-8


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), _FLOOR)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def random_primitive(rng, grid_res=4, grid_amp=0.25):
    shape = geometry.GlobalShapeParams(
        a=rng.uniform(0.2, 0.6, 3),
        eps=rng.uniform(0.3, 1.7, 2),
        t=rng.uniform(-0.6, 0.6, 2),
        b=float(rng.uniform(0.1, 0.8) * rng.choice([-1.0, 1.0])),
    )
    pose = geometry.PrimitivePose(c=rng.uniform(-0.3, 0.3, 3),
                                  q=quaternion.random_unit(rng))
    grid = flowfield.VelocityGrid(
        resolution=grid_res, sigma=1.0,
        values=grid_amp * rng.uniform(-1.0, 1.0, (grid_res,) * 3 + (3,)))
    return PrimitiveParams(pose=pose, shape=shape, grid=grid)


def random_camera(rng):
    base = geometry.default_camera()
    return geometry.CameraParams(
        c=base.c + 0.05 * rng.standard_normal(3),
        q=quaternion.normalize(base.q + 0.05 * rng.standard_normal(4)),
        focal=base.focal)


def _pack_config(prims, camera):
    parts = []
    for p in prims:
        parts += [p.pose.c, p.pose.q, p.shape.vector(), p.grid.values.ravel()]
    parts += [camera.c, camera.q]
    return np.concatenate(parts)


def _unpack_config(vec, template, camera):
    prims = []
    o = 0
    for p in template:
        gsz = p.grid.values.size
        c = vec[o:o + 3]
        q = vec[o + 3:o + 7]
        sh = vec[o + 7:o + 15]
        gv = vec[o + 15:o + 15 + gsz].reshape(p.grid.values.shape)
        o += 15 + gsz
        prims.append(PrimitiveParams(
            pose=geometry.PrimitivePose(c=c, q=q),
            shape=geometry.GlobalShapeParams.from_vector(sh),
            grid=flowfield.VelocityGrid(p.grid.resolution, p.grid.half_width,
                                        p.grid.sigma, gv)))
    cam = geometry.CameraParams(c=vec[o:o + 3], q=vec[o + 3:o + 7],
                                focal=camera.focal)
    return prims, cam


def check_fitting_loss(seed=0, n_configs=20, n_samples=64, n_target=120,
                       ss_steps=4):
    """FD sweep of the fitting-loss gradient over random configurations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_configs):
        n_prim = 1 + k % 2
        with_sil = k % 3 == 0
        prims = [random_primitive(rng) for _ in range(n_prim)]
        target = rng.uniform(-0.7, 0.7, (n_target, 3))
        camera = random_camera(rng)
        sil = rng.uniform(-0.5, 0.5, (80, 2)) if with_sil else None
        weights = dynamics.LossWeights()
        kwargs = dict(n_samples=n_samples, ss_steps=ss_steps,
                      optimize_camera=True, want_grad=True)

        def loss_of(vec):
            ps, cam = _unpack_config(vec, prims, camera)
            parts, _ = dynamics.evaluate_fitting(
                ps, target, weights, cam, sil, want_grad=False,
                n_samples=n_samples, ss_steps=ss_steps)
            return parts.fitting(weights)

        _, grad = dynamics.evaluate_fitting(prims, target, weights, camera,
                                            sil, **kwargs)
        gvec = []
        for g in grad.primitives:
            gvec += [g.c, g.q, g.shape, g.grid.ravel()]
        gvec += [grad.cam_c, grad.cam_q]
        gvec = np.concatenate(gvec)
        if sil is None:
            # the camera blocks only receive gradient from the image terms
            gvec[-7:] = 0.0

        x0 = _pack_config(prims, camera)
        fd = np.zeros_like(x0)
        for i in range(x0.size):
            xp = x0.copy()
            xm = x0.copy()
            xp[i] += FD_STEP
            xm[i] -= FD_STEP
            fd[i] = (loss_of(xp) - loss_of(xm)) / (2.0 * FD_STEP)
        worst = max(worst, rel_err(gvec, fd))
    return worst


def check_shape_jacobian(seed=0, n_configs=40):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        p = random_primitive(rng)
        eta = rng.uniform(-1.4, 1.4, 16)
        omega = rng.uniform(-3.1, 3.1, 16)
        jac = geometry.shape_jacobian(p.shape, eta, omega)
        vec = p.shape.vector()
        fd = np.zeros_like(jac)
        for k in range(8):
            vp, vm = vec.copy(), vec.copy()
            vp[k] += FD_STEP
            vm[k] -= FD_STEP
            sp = geometry.global_surface(geometry.GlobalShapeParams.from_vector(vp),
                                         eta, omega)
            sm = geometry.global_surface(geometry.GlobalShapeParams.from_vector(vm),
                                         eta, omega)
            fd[:, :, k] = (sp - sm) / (2.0 * FD_STEP)
        worst = max(worst, rel_err(jac, fd))
    return worst


def check_rotation_jacobian(seed=0, n_configs=40):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        q = quaternion.random_unit(rng)
        pts = rng.standard_normal((12, 3))
        b = quaternion.rotate_jacobian(q, pts)
        fd = np.zeros_like(b)
        for k in range(4):
            qp, qm = q.copy(), q.copy()
            qp[k] += FD_STEP
            qm[k] -= FD_STEP
            fd[:, :, k] = (quaternion.rotate(qp, pts)
                           - quaternion.rotate(qm, pts)) / (2.0 * FD_STEP)
        worst = max(worst, rel_err(b, fd))
    return worst


def check_projection_jacobian(seed=0, n_configs=40):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        cam = random_camera(rng)
        xs = np.column_stack([rng.uniform(-0.6, 0.6, 10),
                              rng.uniform(-0.6, 0.6, 10),
                              rng.uniform(1.5, 3.5, 10)])
        p = geometry.projection_jacobian(cam, xs)
        fd = np.zeros_like(p)
        for k in range(3):
            xp, xm = xs.copy(), xs.copy()
            xp[:, k] += FD_STEP
            xm[:, k] -= FD_STEP
            fd[:, :, k] = (geometry.project(cam, xp)
                           - geometry.project(cam, xm)) / (2.0 * FD_STEP)
        worst = max(worst, rel_err(p, fd))
    return worst


def check_modified_jacobian(seed=0, n_configs=10):
    """FD of the image chain w.r.t. the pose/shape/displacement vector."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        prim = random_primitive(rng)
        cam = random_camera(rng)
        eta, omega = cached_angle_grid(24)
        s = geometry.global_surface(prim.shape, eta, omega)
        d0 = 0.05 * rng.standard_normal(s.shape)

        def chain(c, q, shape_vec, d):
            gsp = geometry.GlobalShapeParams.from_vector(shape_vec)
            p = geometry.global_surface(gsp, eta, omega) + d
            pose = geometry.PrimitivePose(c=c, q=q)
            x = geometry.world_transform(pose, p)
            return geometry.project(cam, geometry.camera_transform(cam, x))

        p_pts = s + d0
        xs = geometry.camera_transform(
            cam, geometry.world_transform(prim.pose, p_pts))
        lsig = geometry.modified_model_jacobian(cam, prim.pose, prim.shape,
                                                eta, omega, p_pts, xs)
        x0 = np.concatenate([prim.pose.c, prim.pose.q, prim.shape.vector()])
        fd = np.zeros_like(lsig)
        for k in range(15):
            xp, xm = x0.copy(), x0.copy()
            xp[k] += FD_STEP
            xm[k] -= FD_STEP
            fp = chain(xp[0:3], xp[3:7], xp[7:15], d0)
            fm = chain(xm[0:3], xm[3:7], xm[7:15], d0)
            fd[:, :, k] = (fp - fm) / (2.0 * FD_STEP)
        for k in range(3):
            dp = d0.copy()
            dm = d0.copy()
            dp[:, k] += FD_STEP
            dm[:, k] -= FD_STEP
            fp = chain(x0[0:3], x0[3:7], x0[7:15], dp)
            fm = chain(x0[0:3], x0[3:7], x0[7:15], dm)
            fd[:, :, 15 + k] = (fp - fm) / (2.0 * FD_STEP)
        worst = max(worst, rel_err(lsig, fd))
    return worst


def check_grid_gradient(seed=0, n_configs=4, grid_res=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        vals = 0.2 * rng.uniform(-1.0, 1.0, (grid_res,) * 3 + (3,))
        grid = flowfield.VelocityGrid(resolution=grid_res, sigma=1.0, values=vals)
        pts = rng.uniform(-1.5, 1.5, (24, 3))
        cot = rng.standard_normal((24, 3))
        grad = flowfield.grid_gradient(grid, pts, cot)

        def value(v):
            g = flowfield.VelocityGrid(grid_res, grid.half_width, grid.sigma, v)
            fld = flowfield.integrate_svf(g)
            return float(np.sum(cot * flowfield.displacement_at(fld, pts)))

        fd = np.zeros_like(grad)
        it = np.nditer(vals, flags=["multi_index"])
        while not it.finished:
            mi = it.multi_index
            vp, vm = vals.copy(), vals.copy()
            vp[mi] += FD_STEP
            vm[mi] -= FD_STEP
            fd[mi] = (value(vp) - value(vm)) / (2.0 * FD_STEP)
            it.iternext()
        worst = max(worst, rel_err(grad, fd))
    return worst


SUITES = (
    ("fitting_loss", check_fitting_loss),
    ("shape_jacobian", check_shape_jacobian),
    ("rotation_jacobian", check_rotation_jacobian),
    ("projection_jacobian", check_projection_jacobian),
    ("modified_model_jacobian", check_modified_jacobian),
    ("grid_gradient", check_grid_gradient),
)


def run(seed=0, tolerance=1e-4, out=print):
    """Run every FD suite; returns (worst error, per-suite dict)."""
    results = {}
    t0 = time.time()
    for name, fn in SUITES:
        t = time.time()
        err = fn(seed=seed)
        results[name] = err
        out(f"{name:26s} max rel err {err:.3e}  "
            f"[{'ok' if err < tolerance else 'FAIL'}] ({time.time() - t:.1f}s)")
    worst = max(results.values())
    out(f"{'overall':26s} max rel err {worst:.3e}  "
        f"[{'ok' if worst < tolerance else 'FAIL'}] ({time.time() - t0:.1f}s)")
    return worst, results
