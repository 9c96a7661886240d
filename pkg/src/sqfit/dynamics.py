"""Force and loss computations for dynamic fitting, with exact gradients.

The external force on a surface point is its residual to the nearest target
point; pulled back through the per-point model Jacobian blocks it becomes a
generalized force with one sub-vector per sub-transformation (translation,
rotation, shape, local displacement).  The fitting loss combines the
bi-directional Chamfer term, the block norms of the generalized forces, and
an image-space variant built through the camera rotation and the projection
Jacobian.  Gradients are accumulated by hand-written reverse mode, including
the second-order terms from differentiating through the Jacobian blocks
themselves, and match central finite differences on every parameter block.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import flowfield, geometry, kernels, quaternion
from .errors import EmptySet, NonFiniteLoss
from .state import cached_angle_grid

_KDTREE_THRESHOLD = 2e7   # query*ref pair count above which the tree wins


@dataclass
class LossWeights:
    """Fitting-loss term weights and force strengths."""
    ext: float = 0.5
    gen: float = 0.3
    sigma: float = 0.2
    f: float = 0.6
    gcc: float = 0.2
    icc: float = 0.2
    gamma: float = 1.0
    gamma_hat: float = 1.0

    def validate(self):
        for name in ("ext", "gen", "sigma", "f", "gcc", "icc", "gamma", "gamma_hat"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def nearest_neighbor(query, ref):
    """Exact nearest neighbor: (indices into ref, squared distances).

    Brute-force kernels below a size threshold (lowest index wins ties),
    cKDTree above it.
    """
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if query.shape[0] == 0 or ref.shape[0] == 0:
        raise EmptySet("nearest neighbor needs non-empty point sets")
    if query.shape[0] * ref.shape[0] > _KDTREE_THRESHOLD and ref.shape[1] == 3:
        dist, idx = cKDTree(ref).query(query, k=1)
        return idx.astype(np.int64), dist ** 2
    return kernels.nn_sqdist(query, ref)


def chamfer(a, b):
    """Bi-directional Chamfer distance: mean squared nearest distances, both ways."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySet("chamfer distance needs non-empty point sets")
    _, sq_ab = nearest_neighbor(a, b)
    _, sq_ba = nearest_neighbor(b, a)
    return float(np.mean(sq_ab) + np.mean(sq_ba))


def external_loss(primitive_points, target, gamma=1.0):
    """Mean per-primitive bi-directional Chamfer against the target, times gamma."""
    if not primitive_points:
        raise EmptySet("no primitives")
    return gamma / len(primitive_points) * sum(chamfer(m, target)
                                               for m in primitive_points)


def icc_loss(rendered_points, silhouette_points):
    """Image-level cycle-consistency: 2D bi-directional Chamfer."""
    return chamfer(rendered_points, silhouette_points)


def gcc_loss(refit_points, original_points, gamma_hat=1.0):
    """Per-primitive Chamfer between re-fit and original surfaces, by index."""
    if len(refit_points) != len(original_points):
        raise ValueError("primitive counts differ between refit and original")
    if not refit_points:
        raise EmptySet("no primitives")
    return gamma_hat / len(refit_points) * sum(
        chamfer(mh, m) for mh, m in zip(refit_points, original_points))


def total_loss(fitting, gcc, icc, weights):
    """Overall objective: w_f * L_f + w_gcc * L_gcc + w_icc * L_icc.

    Pass zero for terms without inputs (no silhouette, no cycle pass).
    """
    return weights.f * fitting + weights.gcc * gcc + weights.icc * icc


@dataclass
class ForceBatch:
    """Per surface point residuals toward the target, plus the reverse set."""
    f: np.ndarray              # (m, 3) residuals x -> matched target
    fwd_idx: np.ndarray        # (m,) matched target index per surface point
    rev_idx: np.ndarray        # (n,) matched surface-point index per target
    rev_residual: np.ndarray   # (n, 3) residuals target -> matched point


def force_batch(points, target):
    """External forces between one primitive's surface points and the target."""
    fwd_idx, _ = nearest_neighbor(points, target)
    rev_idx, _ = nearest_neighbor(target, points)
    return ForceBatch(f=target[fwd_idx] - points, fwd_idx=fwd_idx,
                      rev_idx=rev_idx, rev_residual=points[rev_idx] - target)


@dataclass
class GeneralizedForce:
    """Force pulled back into parameter space, one block per sub-transform."""
    f_c: np.ndarray            # (3,)
    f_theta: np.ndarray        # (4,)
    f_s: np.ndarray            # (8,)
    f_d: np.ndarray            # (m, 3) per-point displacement block

    def block_norms(self):
        return (np.linalg.norm(self.f_c), np.linalg.norm(self.f_theta),
                np.linalg.norm(self.f_s), np.linalg.norm(self.f_d))

    def norm_sum(self):
        return float(sum(self.block_norms()))


def generalized_force(f, model_jac):
    """Sum of per-point row products f^T L, split into the four blocks."""
    f = np.atleast_2d(f)
    if f.shape[0] != model_jac.shape[0]:
        raise ValueError("force batch and Jacobian batch sizes differ")
    full = np.einsum("nc,nck->nk", f, model_jac)
    return GeneralizedForce(f_c=full[:, 0:3].sum(axis=0),
                            f_theta=full[:, 3:7].sum(axis=0),
                            f_s=full[:, 7:15].sum(axis=0),
                            f_d=full[:, 15:18])


def generalized_loss(forces):
    """Sum of the four block norms over all primitives."""
    return float(sum(gf.norm_sum() for gf in forces))


def _gen_value(gf, form, m):
    if form == "norm":
        return gf.norm_sum()
    return float((gf.f_c @ gf.f_c + gf.f_theta @ gf.f_theta + gf.f_s @ gf.f_s
                  + np.sum(gf.f_d * gf.f_d)) / m ** 2)


@dataclass
class PrimitiveGradient:
    c: np.ndarray
    q: np.ndarray
    shape: np.ndarray
    grid: np.ndarray


@dataclass
class StateGradient:
    primitives: list
    cam_c: np.ndarray = None
    cam_q: np.ndarray = None


@dataclass
class LossParts:
    ext: float = 0.0
    gen: float = 0.0
    sigma: float = 0.0
    icc: float = 0.0

    def fitting(self, w):
        return w.ext * self.ext + w.gen * self.gen + w.sigma * self.sigma


def _unit(v):
    n = np.linalg.norm(v)
    if n < 1e-300:
        return np.zeros_like(v), 0.0
    return v / n, n


def _block_value_and_cot(block, form, m):
    """Scalar contribution of one generalized-force block and its cotangent.

    form "norm": the sum-of-block-norms loss as defined.  form "mean_sq":
    squared norms of the per-point-mean forces, which carry the same units
    as the Chamfer term; the fitter uses this flavor so the force
    regularizer stays subordinate at every residual scale.
    """
    if form == "norm":
        u, n = _unit(block)
        return n, u
    return float(block @ block.ravel() if block.ndim == 1
                 else np.sum(block * block)) / m ** 2, 2.0 * block / m ** 2


class _PrimitiveForward:
    """Forward chain of one primitive, keeping what backward needs."""

    def __init__(self, prim, n_samples, ss_steps, want_grad):
        self.prim = prim
        self.eta, self.omega = cached_angle_grid(n_samples)
        self.params8 = prim.shape.vector()
        self.s, self.jac = kernels.sq_surface_jac(self.params8, self.eta, self.omega)
        self.tape = flowfield.FlowTape(prim.grid, ss_steps)
        d = self.tape.displacement_at(self.s)
        self.du = self.tape.posgrad_at(self.s) if want_grad else None
        self.p = self.s + d
        self.rot = prim.pose.rotation()
        self.x = prim.pose.c + self.p @ self.rot.T
        self.bmat = None

    def rotation_jacobian(self):
        if self.bmat is None:
            self.bmat = quaternion.rotate_jacobian(self.prim.pose.q, self.p)
        return self.bmat


def _block_force(f, fwd):
    """Generalized-force blocks from per-point world-frame forces."""
    f_rot = f @ fwd.rot
    return GeneralizedForce(
        f_c=f.sum(axis=0),
        f_theta=np.einsum("nck,nc->k", fwd.rotation_jacobian(), f),
        f_s=np.einsum("nck,nc->k", fwd.jac, f_rot),
        f_d=f_rot,
    )


def _block_norm_backward(fwd, f, gf, coef, acc, cot_f_out, form="norm"):
    """Backward of coef * (block reduction of gf), gf built from forces f.

    Writes the cotangent on f into cot_f_out and adds the structural pieces
    (second derivatives through B, J, and R) to the accumulators.
    """
    m = f.shape[0]
    _, uc = _block_value_and_cot(gf.f_c, form, m)
    _, ut = _block_value_and_cot(gf.f_theta, form, m)
    _, us = _block_value_and_cot(gf.f_s, form, m)
    if form == "norm":
        nd = np.linalg.norm(gf.f_d)
        ud = gf.f_d / nd if nd > 1e-300 else np.zeros_like(gf.f_d)
    else:
        ud = 2.0 * gf.f_d / m ** 2

    bmat = fwd.rotation_jacobian()
    j_us = np.einsum("nck,k->nc", fwd.jac, us)          # (n,3) model frame
    cot_f_out += coef * (uc[None, :] + bmat @ ut + (j_us + ud) @ fwd.rot.T)
    acc["grad_q"] += coef * quaternion.rotate_hess_apply(fwd.prim.pose.q, fwd.p, f, ut)
    acc["grad_shape"] += coef * kernels.sq_hess_apply(
        fwd.params8, fwd.eta, fwd.omega, f @ fwd.rot, us).sum(axis=0)
    acc["cot_rot"] += coef * (f.T @ (j_us + ud))
    acc["cot_p"] += coef * quaternion.b_linear_vjp_p(fwd.prim.pose.q, f, ut)


def evaluate_fitting(primitives, target, weights, camera=None, sil_points=None,
                     *, n_samples=1000, ss_steps=flowfield.DEFAULT_SS_STEPS,
                     reverse_mode="per_primitive", optimize_camera=False,
                     coef_scale=1.0, icc_coef=0.0, want_grad=True,
                     check_finite=True, gen_form="norm"):
    """Fitting-loss terms and (optionally) gradients for all parameters.

    reverse_mode selects how the target->model Chamfer direction is routed:
    "per_primitive" matches every target point against each primitive
    separately (the loss definition); "union" matches each target point only
    against the pooled surface points of all primitives; "assigned" also
    pools the match but averages per assigned subset, so every part exerts
    full-strength coverage forces on the primitive responsible for it.
    Multi-primitive fitting uses "assigned" so primitives specialize to
    parts instead of each being dragged toward the whole target.

    coef_scale multiplies the gradient of the fitting terms and icc_coef is
    the absolute gradient weight of the 2D cycle term, so a caller
    optimizing  w_f * L_f + w_icc * L_icc  passes coef_scale=w_f,
    icc_coef=w_icc.
    """
    if reverse_mode not in ("per_primitive", "union", "assigned"):
        raise ValueError(f"unknown reverse mode {reverse_mode!r}")
    n_prim = len(primitives)
    if n_prim == 0:
        raise EmptySet("no primitives")
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if target.shape[0] == 0:
        raise EmptySet("empty target")
    n_target = target.shape[0]
    use_sigma = sil_points is not None and (weights.sigma > 0 or icc_coef > 0)

    fwds = [_PrimitiveForward(p, n_samples, ss_steps, want_grad)
            for p in primitives]

    # --- external Chamfer term ------------------------------------------
    fwd_matches = []
    fwd_means = []
    for fw in fwds:
        idx, sq = nearest_neighbor(fw.x, target)
        fwd_matches.append(idx)
        fwd_means.append(np.mean(sq))
    if reverse_mode == "per_primitive":
        rev_matches = []
        rev_means = []
        for fw in fwds:
            ridx, rsq = nearest_neighbor(target, fw.x)
            rev_matches.append(ridx)
            rev_means.append(np.mean(rsq))
        l_ext = weights.gamma / n_prim * (sum(fwd_means) + sum(rev_means))
    else:
        x_all = np.concatenate([fw.x for fw in fwds], axis=0)
        ridx_all, rsq_all = nearest_neighbor(target, x_all)
        offsets_fwd = np.concatenate([[0], np.cumsum([fw.x.shape[0] for fw in fwds])])
        if reverse_mode == "union":
            l_ext = weights.gamma * (sum(fwd_means) / n_prim + np.mean(rsq_all))
        else:
            assign = np.searchsorted(offsets_fwd, ridx_all, side="right") - 1
            rev_counts = np.bincount(assign, minlength=n_prim)
            rev_sum = np.bincount(assign, weights=rsq_all, minlength=n_prim)
            rev_means_assigned = np.where(rev_counts > 0,
                                          rev_sum / np.maximum(rev_counts, 1), 0.0)
            l_ext = weights.gamma / n_prim * (sum(fwd_means)
                                              + rev_means_assigned.sum())

    # --- generalized force term ------------------------------------------
    forces = [target[idx] - fw.x for fw, idx in zip(fwds, fwd_matches)]
    gen_forces = [_block_force(f, fw) for f, fw in zip(forces, fwds)]
    l_gen = float(sum(_gen_value(gf, gen_form, f.shape[0])
                      for gf, f in zip(gen_forces, forces)))

    # --- image terms -------------------------------------------------------
    l_sigma = 0.0
    l_icc = 0.0
    sigma_data = []
    if use_sigma:
        if camera is None:
            raise ValueError("image losses need a camera")
        sil = np.atleast_2d(np.asarray(sil_points, dtype=np.float64))
        rot_cam = camera.rotation()
        xproj_all = []
        for fw in fwds:
            x_cam = camera.c + fw.x @ rot_cam.T
            x_proj = geometry.project(camera, x_cam)
            p_jac = geometry.projection_jacobian(camera, x_cam)
            sidx, _ = nearest_neighbor(x_proj, sil)
            g = sil[sidx] - x_proj
            pg = np.einsum("nij,ni->nj", p_jac, g)
            h = pg @ rot_cam
            gf_img = _block_force(h, fw)
            l_sigma += _gen_value(gf_img, gen_form, h.shape[0]) / n_prim
            sigma_data.append((x_cam, x_proj, p_jac, g, pg, h, gf_img))
            xproj_all.append(x_proj)
        if icc_coef > 0:
            xp_all = np.concatenate(xproj_all, axis=0)
            icc_fwd_idx, isq = nearest_neighbor(xp_all, sil)
            icc_rev_idx, rsq2 = nearest_neighbor(sil, xp_all)
            l_icc = float(np.mean(isq) + np.mean(rsq2))

    parts = LossParts(ext=float(l_ext), gen=float(l_gen), sigma=float(l_sigma),
                      icc=float(l_icc))
    if check_finite:
        for name in ("ext", "gen", "sigma", "icc"):
            if not np.isfinite(getattr(parts, name)):
                raise NonFiniteLoss(name)
    if not want_grad:
        return parts, None

    # --- backward -----------------------------------------------------------
    ce = coef_scale * weights.ext
    cg = coef_scale * weights.gen
    cs = coef_scale * weights.sigma / n_prim
    grads = []
    cam_c_grad = np.zeros(3)
    cam_rot_cot = np.zeros((3, 3))
    offsets = np.concatenate([[0], np.cumsum([fw.x.shape[0] for fw in fwds])])

    for pi, fw in enumerate(fwds):
        m = fw.x.shape[0]
        acc = {
            "cot_p": np.zeros((m, 3)),
            "cot_rot": np.zeros((3, 3)),
            "grad_q": np.zeros(4),
            "grad_shape": np.zeros(8),
        }
        cot_x = np.zeros((m, 3))

        # external term, forward direction
        cot_x += (ce * weights.gamma / n_prim) * (2.0 / m) \
            * (fw.x - target[fwd_matches[pi]])
        # external term, reverse direction
        if reverse_mode == "per_primitive":
            ridx = rev_matches[pi]
            delta = fw.x[ridx] - target
            np.add.at(cot_x, ridx,
                      (ce * weights.gamma / n_prim) * (2.0 / n_target) * delta)
        elif reverse_mode == "union":
            sel = (ridx_all >= offsets[pi]) & (ridx_all < offsets[pi + 1])
            local = ridx_all[sel] - offsets[pi]
            delta = fw.x[local] - target[sel]
            np.add.at(cot_x, local, ce * weights.gamma * (2.0 / n_target) * delta)
        else:
            sel = (ridx_all >= offsets[pi]) & (ridx_all < offsets[pi + 1])
            local = ridx_all[sel] - offsets[pi]
            count = local.shape[0]
            if count:
                delta = fw.x[local] - target[sel]
                np.add.at(cot_x, local,
                          (ce * weights.gamma / n_prim) * (2.0 / count) * delta)

        # generalized block norms
        cot_f = np.zeros((m, 3))
        _block_norm_backward(fw, forces[pi], gen_forces[pi], cg, acc, cot_f,
                             gen_form)
        cot_x -= cot_f                               # f = target - x

        # image block norms and the projection chain
        if use_sigma:
            x_cam, x_proj, p_jac, g, pg, h, gf_img = sigma_data[pi]
            cot_h = np.zeros((m, 3))
            _block_norm_backward(fw, h, gf_img, cs, acc, cot_h, gen_form)
            rch = cot_h @ rot_cam.T                  # R_cam cot_h per point
            cot_g = np.einsum("nij,nj->ni", p_jac, rch)
            cot_pjac = g[:, :, None] * rch[:, None, :]
            cam_rot_cot += pg.T @ cot_h
            cot_xproj = -cot_g                       # g = sil - x_proj
            if icc_coef > 0:
                lo, hi = offsets[pi], offsets[pi + 1]
                n_all = offsets[-1]
                cot_xproj = cot_xproj + icc_coef * (2.0 / n_all) \
                    * (x_proj - sil[icc_fwd_idx[lo:hi]])
                sel2 = (icc_rev_idx >= lo) & (icc_rev_idx < hi)
                local2 = icc_rev_idx[sel2] - lo
                extra = np.zeros_like(cot_xproj)
                np.add.at(extra, local2, icc_coef * (2.0 / sil.shape[0])
                          * (x_proj[local2] - sil[sel2]))
                cot_xproj = cot_xproj + extra
            cot_xcam = (np.einsum("nij,ni->nj", p_jac, cot_xproj)
                        + geometry.projection_jacobian_vjp(camera, x_cam, cot_pjac))
            cam_c_grad += cot_xcam.sum(axis=0)
            cam_rot_cot += cot_xcam.T @ fw.x
            cot_x += cot_xcam @ rot_cam

        # world chain
        grad_c = cot_x.sum(axis=0)
        acc["cot_rot"] += cot_x.T @ fw.p
        cot_p = acc["cot_p"] + cot_x @ fw.rot
        grad_q = acc["grad_q"] + quaternion.matrix_vjp(fw.prim.pose.q, acc["cot_rot"])
        cot_s = cot_p + np.einsum("nab,na->nb", fw.du, cot_p)
        grad_shape = acc["grad_shape"] + np.einsum("nck,nc->k", fw.jac, cot_s)
        grad_grid = fw.tape.backward(fw.tape.scatter_points(fw.s, cot_p))
        grads.append(PrimitiveGradient(c=grad_c, q=grad_q, shape=grad_shape,
                                       grid=grad_grid))

    grad = StateGradient(primitives=grads)
    if optimize_camera and camera is not None:
        grad.cam_c = cam_c_grad
        grad.cam_q = quaternion.matrix_vjp(camera.q, cam_rot_cot)
    return parts, grad


def dynamic_fitting_loss(primitives, target, weights, camera=None,
                         sil_points=None, want_grad=True, **kwargs):
    """Weighted fitting loss w_ext L_ext + w_gen L_gen + w_sigma L_sigma."""
    parts, grad = evaluate_fitting(primitives, target, weights, camera,
                                   sil_points, want_grad=want_grad, **kwargs)
    return parts.fitting(weights), parts, grad


def image_loss(primitives, camera, sil_points, n_samples=1000,
               ss_steps=flowfield.DEFAULT_SS_STEPS):
    """Norm of the image-space generalized forces, averaged over primitives."""
    if camera is None:
        raise ValueError("image loss needs a camera")
    sil = np.atleast_2d(np.asarray(sil_points, dtype=np.float64))
    if sil.shape[0] == 0:
        raise EmptySet("empty silhouette point set")
    rot_cam = camera.rotation()
    total = 0.0
    for prim in primitives:
        fw = _PrimitiveForward(prim, n_samples, ss_steps, want_grad=False)
        x_cam = camera.c + fw.x @ rot_cam.T
        x_proj = geometry.project(camera, x_cam)
        p_jac = geometry.projection_jacobian(camera, x_cam)
        sidx, _ = nearest_neighbor(x_proj, sil)
        g = sil[sidx] - x_proj
        h = np.einsum("nij,ni->nj", p_jac, g) @ rot_cam
        total += _block_force(h, fw).norm_sum()
    return total / len(primitives)
