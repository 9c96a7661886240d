"""Multi-primitive dynamic fitting by first-order optimization.

Replaces a learned parameter estimator with direct per-instance
optimization: k-means-seeded sphere primitives, Adam updates from the
fitting-loss gradients, box projection of the shape constraints after every
step, and a staged schedule (pose and scale first, then taper/bend, then
the local velocity field) so the local field refines detail instead of
absorbing global misalignment.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics, flowfield, geometry, quaternion
from .errors import EmptyTarget
from .state import FitState, PrimitiveParams, identity_primitive, surface_points

DEFAULT_TARGET_SAMPLES = 2000
DEFAULT_PRIMITIVE_SAMPLES = 1000
DEFAULT_EVAL_SAMPLES = 100_000


@dataclass
class FitConfig:
    n_prim: int = 1
    iterations: int = 2000
    seed: int = 0
    step_pose: float = 1e-2
    step_shape: float = 1e-2
    step_grid: float = 5e-3
    step_camera: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stage_fractions: tuple = (0.6, 0.2, 0.2)
    weights: dynamics.LossWeights = field(default_factory=dynamics.LossWeights)
    samples_per_primitive: int = DEFAULT_PRIMITIVE_SAMPLES
    ss_steps: int = flowfield.DEFAULT_SS_STEPS
    grid_resolution: int = flowfield.DEFAULT_RESOLUTION
    grid_sigma: float = flowfield.DEFAULT_SIGMA
    focal_length: float = 2.0
    camera_distance: float = 2.5
    optimize_camera: bool = False
    init_radius: float = 0.15
    early_stop_rel: float = 1e-6
    early_stop_window: int = 50
    reverse_mode: str = "auto"
    probe_orientations: bool = True
    reseed_interval: int = 75
    reseed_hole_dist: float = 0.15

    def validate(self):
        if self.n_prim < 1:
            raise ValueError("need at least one primitive")
        if self.iterations < 0:
            raise ValueError("iteration count must be non-negative")
        for name in ("step_pose", "step_shape", "step_grid", "step_camera"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.weights.validate()

    def resolved_reverse_mode(self):
        if self.reverse_mode != "auto":
            return self.reverse_mode
        return "assigned" if self.n_prim > 1 else "per_primitive"


def normalize_points(points):
    """Center on the bounding box and scale the widest extent to 1."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float(np.max(hi - lo))
    scale = 1.0 / extent if extent > 0 else 1.0
    return (points - center) * scale, center, scale


def _kmeans(points, k, rng, iters=50):
    """k-means++ seeding plus Lloyd refinement; deterministic given rng."""
    n = points.shape[0]
    centers = np.empty((k, 3))
    centers[0] = points[rng.integers(n)]
    for j in range(1, k):
        _, d2 = dynamics.nearest_neighbor(points, centers[:j])
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = points[rng.choice(n, p=probs)]
    for _ in range(iters):
        assign, _ = dynamics.nearest_neighbor(points, centers)
        new_centers = centers.copy()
        for j in range(k):
            sel = assign == j
            if np.any(sel):
                new_centers[j] = points[sel].mean(axis=0)
        if np.abs(new_centers - centers).max() < 1e-12:
            centers = new_centers
            break
        centers = new_centers
    return centers


def initialize(target_points, n_prim, seed=0, config=None):
    """Normalized fit state: small spheres at k-means seeds, default camera."""
    cfg = config if config is not None else FitConfig(n_prim=n_prim, seed=seed)
    points = np.atleast_2d(np.asarray(target_points, dtype=np.float64))
    if points.shape[0] == 0:
        raise EmptyTarget("target has no points")
    normalized, center, scale = normalize_points(points)
    rng = np.random.default_rng(seed)
    seeds = _kmeans(normalized, n_prim, rng)
    prims = [identity_primitive(seeds[j], radius=cfg.init_radius,
                                grid_resolution=cfg.grid_resolution,
                                grid_sigma=cfg.grid_sigma)
             for j in range(n_prim)]
    camera = geometry.default_camera(cfg.camera_distance, cfg.focal_length)
    state = FitState(primitives=prims, camera=camera, center=center, scale=scale)
    return state, normalized


# stage -> which parameter groups move; squareness joins in stage 2 so that
# stage 1 fits pure ellipsoids, whose axis assignment the orientation probe
# can permute exactly
_STAGE_GROUPS = {
    1: ("pose", "scale"),
    2: ("pose", "scale", "eps", "taper_bend"),
    3: ("pose", "scale", "eps", "taper_bend", "grid"),
}


class _Adam:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, g, lr, b1, b2, eps):
        self.t += 1
        self.m = b1 * self.m + (1.0 - b1) * g
        self.v = b2 * self.v + (1.0 - b2) * g * g
        mh = self.m / (1.0 - b1 ** self.t)
        vh = self.v / (1.0 - b2 ** self.t)
        return lr * mh / (np.sqrt(vh) + eps)


class Optimizer:
    """Adam moments for every parameter block of a fit state."""

    def __init__(self, state):
        self.prim = [{"c": _Adam(3), "q": _Adam(4), "shape": _Adam(8),
                      "grid": _Adam(p.grid.values.shape)}
                     for p in state.primitives]
        self.cam_c = _Adam(3)
        self.cam_q = _Adam(4)


def _project_constraints(prim):
    sh = prim.shape
    sh.a = np.clip(sh.a, geometry.SCALE_MIN, geometry.SCALE_MAX)
    sh.eps = np.clip(sh.eps, geometry.EPS_MIN, geometry.EPS_MAX)
    sh.t = np.clip(sh.t, -geometry.TAPER_LIMIT, geometry.TAPER_LIMIT)
    bmax = 1.0 / sh.a[2]
    sh.b = float(np.clip(sh.b, -bmax, bmax))
    prim.pose.q = quaternion.normalize(prim.pose.q)
    np.clip(prim.grid.values, -flowfield.VELOCITY_CAP, flowfield.VELOCITY_CAP,
            out=prim.grid.values)


def apply_update(state, grad, config, opt, stage):
    """One Adam step on the groups active in the given stage, then projection."""
    groups = _STAGE_GROUPS[stage]
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    for prim, g, adam in zip(state.primitives, grad.primitives, opt.prim):
        if "pose" in groups:
            prim.pose.c -= adam["c"].update(g.c, config.step_pose, b1, b2, eps)
            prim.pose.q -= adam["q"].update(g.q, config.step_pose, b1, b2, eps)
        if "scale" in groups:
            step = adam["shape"].update(g.shape, config.step_shape, b1, b2, eps)
            vec = prim.shape.vector()
            vec[0:3] -= step[0:3]
            if "eps" in groups:
                vec[3:5] -= step[3:5]
            if "taper_bend" in groups:
                vec[5:8] -= step[5:8]
            prim.shape = geometry.GlobalShapeParams.from_vector(vec)
        if "grid" in groups:
            prim.grid.values -= adam["grid"].update(g.grid, config.step_grid,
                                                    b1, b2, eps)
        _project_constraints(prim)
    if config.optimize_camera and grad.cam_c is not None:
        state.camera.c -= opt.cam_c.update(grad.cam_c, config.step_camera, b1, b2, eps)
        state.camera.q -= opt.cam_q.update(grad.cam_q, config.step_camera, b1, b2, eps)
        state.camera.q = quaternion.normalize(state.camera.q)


def _coverage_reseed(state, target_points, config, opt):
    """Teleport the most redundant primitive to the worst coverage hole.

    k-means-style rescue for multi-primitive fits: when some target region
    is far from every primitive while another primitive is cheap to merge
    into its neighbors, restart that primitive as a fresh seed sphere at
    the hole.  Returns True when a primitive moved.
    """
    pts = [surface_points(p, min(256, config.samples_per_primitive),
                          config.ss_steps) for p in state.primitives]
    merged = np.concatenate(pts, axis=0)
    _, rsq = dynamics.nearest_neighbor(target_points, merged)
    hole = int(np.argmax(rsq))
    hole_d2 = rsq[hole]
    if (hole_d2 < config.reseed_hole_dist ** 2
            or hole_d2 < 4.0 * float(np.mean(rsq))):
        return False
    # merge cost of primitive j: extra reverse cost of serving its targets
    # with the remaining primitives
    best_j, best_cost = None, None
    for j in range(state.n_prim):
        others = np.concatenate([p for i, p in enumerate(pts) if i != j], axis=0)
        _, rsq_wo = dynamics.nearest_neighbor(target_points, others)
        cost = float(np.mean(rsq_wo) - np.mean(rsq))
        if best_cost is None or cost < best_cost:
            best_j, best_cost = j, cost
    fresh = identity_primitive(target_points[hole], radius=config.init_radius,
                               grid_resolution=config.grid_resolution,
                               grid_sigma=config.grid_sigma)
    state.primitives[best_j] = fresh
    opt.prim[best_j] = {"c": _Adam(3), "q": _Adam(4), "shape": _Adam(8),
                        "grid": _Adam(fresh.grid.values.shape)}
    return True


def _stage_of(iteration, config):
    n = config.iterations
    s1 = int(config.stage_fractions[0] * n)
    s2 = s1 + int(config.stage_fractions[1] * n)
    if iteration < s1:
        return 1, s1
    if iteration < s2:
        return 2, s2
    return 3, n


def step(state, target_points, config, opt=None, sil_points=None):
    """Single optimizer update; returns the objective value of the old state."""
    if opt is None:
        opt = Optimizer(state)
    stage, _ = _stage_of(state.iteration, config)
    value, parts, grad = _objective(state, target_points, config, sil_points)
    apply_update(state, grad, config, opt, stage)
    state.iteration += 1
    state.loss_trace.append(value)
    return value, parts, opt


def _objective(state, target_points, config, sil_points):
    """Fit-time objective: the weighted fitting terms with the generalized
    and image forces in their mean-squared flavor (same units as the
    Chamfer term, so the shipped weights balance at every residual scale),
    plus the 2D cycle term when a silhouette is present."""
    w = config.weights
    icc_coef = w.icc if sil_points is not None else 0.0
    parts, grad = dynamics.evaluate_fitting(
        state.primitives, target_points, w, state.camera, sil_points,
        n_samples=config.samples_per_primitive, ss_steps=config.ss_steps,
        reverse_mode=config.resolved_reverse_mode(),
        optimize_camera=config.optimize_camera,
        coef_scale=w.f, icc_coef=icc_coef, want_grad=True, gen_form="mean_sq")
    value = dynamics.total_loss(parts.fitting(w), 0.0, parts.icc, w)
    return value, parts, grad


def _stalled(trace, start, window, rel):
    if len(trace) - start <= window:
        return False
    prev_best = min(trace[start:-window])
    cur_best = min(trace[-window:])
    return prev_best - cur_best < rel * max(abs(prev_best), 1e-30)


def _cube_orientations():
    """The 24 proper cube rotations as (axis permutation, quaternion)."""
    from itertools import permutations, product
    parity = {p: s for p, s in zip(permutations(range(3)),
                                   (1, -1, -1, 1, 1, -1))}
    out = []
    for perm in permutations(range(3)):
        for signs in product((1, -1), repeat=3):
            if parity[perm] * signs[0] * signs[1] * signs[2] != 1:
                continue
            mat = np.zeros((3, 3))
            for i in range(3):
                mat[i, perm[i]] = signs[i]
            out.append((perm, quaternion.from_matrix(mat)))
    return out


_CUBE_ORIENTATIONS = None


def _reoriented(prim, perm, q_c):
    """Same surface, model axes relabelled by the cube rotation (ellipsoids)."""
    new = prim.copy()
    new.pose.q = quaternion.normalize(quaternion.multiply(prim.pose.q,
                                                          quaternion.conjugate(q_c)))
    new.shape.a = prim.shape.a[list(perm)]
    return new


def _probe_orientations(state, target_points, config, probe_iters=12,
                        probe_samples=288):
    """Short taper/bend probes over cube re-orientations of each primitive.

    Bending curves the model z-axis and tapering scales x/y along z, so the
    stage-1 ellipsoid's axis assignment decides whether they can express the
    target; try the 24 relabellings and keep the one whose short shape-only
    fit gets lowest.  Each primitive probes against its nearest-target
    subset with the others frozen.
    """
    global _CUBE_ORIENTATIONS
    if _CUBE_ORIENTATIONS is None:
        _CUBE_ORIENTATIONS = _cube_orientations()
    w = replace(config.weights, sigma=0.0)  # probes are geometric, no camera
    for pi, prim in enumerate(state.primitives):
        if state.n_prim > 1:
            pts = [surface_points(p, min(256, config.samples_per_primitive),
                                  config.ss_steps) for p in state.primitives]
            assign, _ = dynamics.nearest_neighbor(
                target_points, np.concatenate(pts, axis=0))
            sizes = np.concatenate([[0], np.cumsum([len(p) for p in pts])])
            sel = (assign >= sizes[pi]) & (assign < sizes[pi + 1])
            local_target = target_points[sel]
            if local_target.shape[0] < 20:
                continue
        else:
            local_target = target_points
        best = None
        for perm, q_c in _CUBE_ORIENTATIONS:
            cand = _reoriented(prim, perm, q_c)
            adam = _Adam(8)
            value = None
            for _ in range(probe_iters):
                _, _, grad = dynamics.dynamic_fitting_loss(
                    [cand], local_target, w, n_samples=probe_samples,
                    ss_steps=config.ss_steps, coef_scale=1.0,
                    gen_form="mean_sq")
                vec = cand.shape.vector()
                vec -= adam.update(grad.primitives[0].shape, config.step_shape,
                                   config.beta1, config.beta2, config.adam_eps)
                cand.shape = geometry.GlobalShapeParams.from_vector(vec)
                _project_constraints(cand)
            value, _, _ = dynamics.dynamic_fitting_loss(
                [cand], local_target, w, n_samples=probe_samples,
                ss_steps=config.ss_steps, want_grad=False, gen_form="mean_sq")
            if best is None or value < best[0]:
                best = (value, cand)
        state.primitives[pi] = best[1]


def fit(target_points, config, sil_points=None, state=None):
    """Staged fitting run; returns the final state and its loss trace.

    target_points must already live in the normalized frame (see
    initialize, which produces both the state and the normalized points).
    Each stage ends early once the loss stalls, handing over to the next
    stage so taper/bend and the local field still get their turns.
    """
    config.validate()
    if state is None:
        raise ValueError("fit needs an initialized state")
    opt = Optimizer(state)
    stage_start = len(state.loss_trace)
    current_stage = None
    while state.iteration < config.iterations:
        stage, stage_end = _stage_of(state.iteration, config)
        if stage != current_stage:
            if current_stage == 1 and stage >= 2 and config.probe_orientations:
                _probe_orientations(state, target_points, config)
                opt = Optimizer(state)
            current_stage = stage
            stage_start = len(state.loss_trace)
        if (stage == 1 and state.n_prim > 1 and config.reseed_interval > 0
                and state.iteration > 0
                and state.iteration % config.reseed_interval == 0):
            if _coverage_reseed(state, target_points, config, opt):
                stage_start = len(state.loss_trace)
        value, parts, _ = step(state, target_points, config, opt, sil_points)
        if _stalled(state.loss_trace, stage_start, config.early_stop_window,
                    config.early_stop_rel):
            if stage == 3 or stage_end >= config.iterations:
                break
            state.iteration = stage_end
    return state


def fitted_surface_points(state, n_per_prim=DEFAULT_PRIMITIVE_SAMPLES,
                          ss_steps=flowfield.DEFAULT_SS_STEPS):
    return [surface_points(p, n_per_prim, ss_steps) for p in state.primitives]


def cycle_refit(state, config, mask_size=128):
    """Re-fit the model from its own rendered silhouette and compare.

    Renders the fitted state through its camera, re-runs a short fit from a
    fresh initialization against the silhouette-only objective (image force
    term plus the 2D cycle term), and reports the per-primitive Chamfer
    between the re-fit and original surfaces plus the final 2D residual.
    """
    from . import modelio

    if state.camera is None:
        raise ValueError("cycle diagnostic needs a fitted camera")
    mask = modelio.render_silhouette(state, state.camera, size=mask_size,
                                     n_per_prim=config.samples_per_primitive,
                                     ss_steps=config.ss_steps)
    sil = modelio.silhouette_points(mask)

    refit = FitState(
        primitives=[identity_primitive((0.0, 0.0, 0.0), radius=config.init_radius,
                                       grid_resolution=config.grid_resolution,
                                       grid_sigma=config.grid_sigma)
                    for _ in range(state.n_prim)],
        camera=geometry.CameraParams(state.camera.c.copy(), state.camera.q.copy(),
                                     state.camera.focal),
        center=state.center.copy(), scale=state.scale)
    cycle_cfg = replace(
        config,
        iterations=max(1, config.iterations // 4),
        weights=replace(config.weights, ext=0.0, gen=0.0),
        probe_orientations=False,
        reseed_interval=0,
        optimize_camera=False,
    )
    # the 3D target plays no role in a silhouette-only refit; a far dummy
    # point keeps the disabled Chamfer/force terms well defined
    dummy_target = np.zeros((1, 3))
    fit(dummy_target, cycle_cfg, sil_points=sil, state=refit)

    orig_pts = fitted_surface_points(state, config.samples_per_primitive,
                                     config.ss_steps)
    refit_pts = fitted_surface_points(refit, config.samples_per_primitive,
                                      config.ss_steps)
    gcc = dynamics.gcc_loss(refit_pts, orig_pts, config.weights.gamma_hat)
    merged = np.concatenate(refit_pts, axis=0)
    proj = geometry.project(state.camera,
                            geometry.camera_transform(state.camera, merged))
    icc = dynamics.icc_loss(proj, sil)
    return refit, gcc, icc
