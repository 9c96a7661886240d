"""Evaluation: Monte-Carlo volumetric IoU through inverted deformation
chains, unsquared Chamfer distance, and report assembly."""

from dataclasses import dataclass, field

import numpy as np

from . import dynamics, flowfield, geometry
from .errors import DegenerateUnion, EmptySet
from .state import surface_points

BOUNDS_PAD = 0.10


@dataclass
class EvalConfig:
    n_points: int = 100_000
    seed: int = 0
    bounds: float = 0.5 * (1.0 + BOUNDS_PAD)   # half-width of the sample box

    def validate(self):
        if self.n_points < 1:
            raise ValueError("need at least one sample point")


def _inside_one(prim, pts, inv_field):
    """Inside test for one primitive: invert the full deformation chain."""
    rot = prim.pose.rotation()
    p = (pts - prim.pose.c) @ rot                     # R^T (x - c)
    p = p + flowfield.displacement_at(inv_field, p)   # inverse local flow
    sh = prim.shape
    ok = np.ones(pts.shape[0], dtype=bool)
    # inverse bend, classifying out-of-range arc angles as outside
    b = sh.b
    if abs(b) >= geometry.BEND_EPS:
        r = 1.0 / b
        sb = np.sign(b)
        gam = np.arctan2(sb * p[:, 2], sb * (r - p[:, 0]))
        ok &= np.abs(gam) < 0.5 * np.pi
        z = np.where(ok, gam / b, 0.0)
        sg, cg = np.sin(gam), np.cos(gam)
        safe_sg = np.where(np.abs(sg) < 1e-6, 1.0, sg)
        x = np.where(np.abs(sg) < 1e-6,
                     r - (r - p[:, 0]) / cg,
                     r - p[:, 2] / safe_sg)
        p = np.stack([x, p[:, 1], z], axis=-1)
    # inverse taper, vanishing scale factors classified outside
    k1 = 1.0 + sh.t[0] * p[:, 2] / sh.a[2]
    k2 = 1.0 + sh.t[1] * p[:, 2] / sh.a[2]
    ok &= (k1 > 1e-9) & (k2 > 1e-9)
    k1 = np.where(ok, k1, 1.0)
    k2 = np.where(ok, k2, 1.0)
    p = np.stack([p[:, 0] / k1, p[:, 1] / k2, p[:, 2]], axis=-1)
    return ok & (geometry.implicit_value(sh, p) < 1.0)


def inside_union(state, pts, inv_fields=None,
                 ss_steps=flowfield.DEFAULT_SS_STEPS):
    """True where a point lies inside any primitive of the state."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if inv_fields is None:
        inv_fields = [flowfield.inverse_displacement(p.grid, ss_steps)
                      for p in state.primitives]
    out = np.zeros(pts.shape[0], dtype=bool)
    for prim, fld in zip(state.primitives, inv_fields):
        out |= _inside_one(prim, pts, fld)
    return out


def iou(state, occupancy_oracle, cfg=None,
        ss_steps=flowfield.DEFAULT_SS_STEPS):
    """Monte-Carlo intersection-over-union of the state against an oracle.

    The oracle maps an (n, 3) array in the normalized frame to booleans.
    """
    cfg = cfg if cfg is not None else EvalConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    pts = rng.uniform(-cfg.bounds, cfg.bounds, (cfg.n_points, 3))
    a = inside_union(state, pts, ss_steps=ss_steps)
    b = np.asarray(occupancy_oracle(pts), dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise DegenerateUnion("both occupancy fields are empty on the sample")
    return float(np.count_nonzero(a & b) / union)


def chamfer_l1(a, b):
    """Bi-directional mean of unsquared nearest distances."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySet("chamfer distance needs non-empty point sets")
    _, sq_ab = dynamics.nearest_neighbor(a, b)
    _, sq_ba = dynamics.nearest_neighbor(b, a)
    return float(np.mean(np.sqrt(sq_ab)) + np.mean(np.sqrt(sq_ba)))


def mesh_occupancy(verts, faces, eps=1e-9):
    """Ray-parity occupancy of a triangle mesh, +x rays with a 3-ray
    majority vote to survive edge grazing."""
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    v0 = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - v0
    e2 = verts[faces[:, 2]] - v0
    jitters = (np.zeros(3), np.array([0.0, 3.1e-5, 1.7e-5]),
               np.array([0.0, -2.3e-5, 2.9e-5]))

    def parity(origins):
        # Moeller-Trumbore specialized to direction +x
        inside = np.zeros(origins.shape[0], dtype=np.int64)
        block = max(1, int(4_000_000 // max(1, len(faces))))
        d = np.array([1.0, 0.0, 0.0])
        pvec = np.cross(d, e2)                       # (f, 3)
        det = np.einsum("fk,fk->f", e1, pvec)
        good = np.abs(det) > eps
        inv_det = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
        for lo in range(0, origins.shape[0], block):
            o = origins[lo:lo + block]
            tvec = o[:, None, :] - v0[None, :, :]     # (n, f, 3)
            u = np.einsum("nfk,fk->nf", tvec, pvec) * inv_det
            qvec = np.cross(tvec, e1[None, :, :])
            v = qvec[:, :, 0] * inv_det               # q . d with d = +x
            t = np.einsum("nfk,fk->nf", qvec, e2) * inv_det
            hit = (good[None, :] & (u >= 0.0) & (v >= 0.0)
                   & (u + v <= 1.0) & (t > eps))
            inside[lo:lo + block] = hit.sum(axis=1) % 2
        return inside

    def oracle(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        votes = sum(parity(pts + j) for j in jitters)
        return votes >= 2

    return oracle


@dataclass
class FitReport:
    """Metrics and traces of one fitting run."""
    n_prim: int
    chamfer: float
    chamfer_l1: float
    iou: float = None
    gcc: float = None
    icc: float = None
    prim_points: list = field(default_factory=list)
    prim_centers: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)


def report(state, target_points, cfg=None, occupancy_oracle=None,
           n_per_prim=1000, ss_steps=flowfield.DEFAULT_SS_STEPS,
           gcc=None, icc=None):
    """Assemble the evaluation report for a fitted state."""
    samples = [surface_points(p, n_per_prim, ss_steps) for p in state.primitives]
    merged = np.concatenate(samples, axis=0)
    rep = FitReport(
        n_prim=state.n_prim,
        chamfer=dynamics.chamfer(merged, target_points),
        chamfer_l1=chamfer_l1(merged, target_points),
        prim_points=[s.shape[0] for s in samples],
        prim_centers=[p.pose.c.copy() for p in state.primitives],
        loss_trace=list(state.loss_trace),
        gcc=gcc,
        icc=icc,
    )
    if occupancy_oracle is not None:
        rep.iou = iou(state, occupancy_oracle, cfg, ss_steps=ss_steps)
    return rep
