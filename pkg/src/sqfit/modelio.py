"""File formats and rendering: OBJ/XYZ targets, PGM silhouette masks,
JSON model files with bit-exact round-trip, and point-splat silhouettes."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import flowfield, geometry
from .errors import (BehindCamera, EmptyMesh, EmptySilhouette, ParseError,
                     VersionMismatch)
from .state import FitState, PrimitiveParams, surface_points

MODEL_FORMAT = "sqfit-model"
MODEL_VERSION = 1


@dataclass
class TargetShape:
    """Normalized target points plus the recorded normalization."""
    points: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    mask: "SilhouetteMask" = None
    camera: geometry.CameraParams = None


@dataclass
class SilhouetteMask:
    """Binary mask; foreground is 255, stored as plain-text PGM (P2)."""
    pixels: np.ndarray     # (h, w) uint8, values in {0, 255}

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def parse_obj(text):
    """Vertices and triangles of a Wavefront OBJ (fans for larger faces)."""
    verts = []
    faces = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ParseError("vertex needs three coordinates", line=ln)
            try:
                verts.append([float(v) for v in rest[:3]])
            except ValueError:
                raise ParseError("bad vertex coordinate", line=ln) from None
        elif tag == "f":
            if len(rest) < 3:
                raise ParseError("face needs at least three vertices", line=ln)
            idx = []
            for token in rest:
                head = token.split("/")[0]
                try:
                    k = int(head)
                except ValueError:
                    raise ParseError(f"bad face index {token!r}", line=ln) from None
                if k < 0:
                    k = len(verts) + k
                else:
                    k = k - 1
                if k < 0 or k >= len(verts):
                    raise ParseError(f"face index {token!r} out of range", line=ln)
                idx.append(k)
            for i in range(1, len(idx) - 1):
                faces.append([idx[0], idx[i], idx[i + 1]])
    if not faces:
        raise EmptyMesh("no faces in mesh")
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def parse_xyz(text):
    pts = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        cols = line.split()
        if len(cols) != 3:
            raise ParseError("expected three coordinates per line", line=ln)
        try:
            pts.append([float(c) for c in cols])
        except ValueError:
            raise ParseError("bad coordinate", line=ln) from None
    if not pts:
        raise ParseError("no points in file")
    return np.asarray(pts, dtype=np.float64)


def sample_mesh_surface(verts, faces, n, seed=0):
    """Area-weighted uniform surface samples, exactly n points."""
    v0 = verts[faces[:, 0]]
    v1 = verts[faces[:, 1]]
    v2 = verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    total = areas.sum()
    if total <= 0:
        raise EmptyMesh("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(areas)
    tri = np.searchsorted(cum, rng.random(n) * total)
    tri = np.minimum(tri, len(faces) - 1)
    u = rng.random((n, 1))
    v = rng.random((n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    return v0[tri] + u * (v1[tri] - v0[tri]) + v * (v2[tri] - v0[tri])


def load_target(path, n_samples=2000, seed=0):
    """Target point cloud from an OBJ mesh (surface-sampled) or XYZ list.

    Points are normalized to the unit cube centered at the origin; the
    normalization is recorded on the returned TargetShape.
    """
    from .fitter import normalize_points
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if os.path.splitext(path)[1].lower() == ".obj":
        verts, faces = parse_obj(text)
        raw = sample_mesh_surface(verts, faces, n_samples, seed)
    else:
        raw = parse_xyz(text)
    pts, center, scale = normalize_points(raw)
    return TargetShape(points=pts, center=center, scale=scale)


# ---------------------------------------------------------------------------
# PGM masks
# ---------------------------------------------------------------------------

def save_pgm(mask, path):
    px = mask.pixels
    lines = [f"{' '.join(str(int(v)) for v in row)}" for row in px]
    body = f"P2\n{mask.width} {mask.height}\n255\n" + "\n".join(lines) + "\n"
    _atomic_write(path, body)


def load_pgm(path):
    with open(path, "r", encoding="utf-8") as fh:
        tokens = []
        for raw in fh:
            tokens.extend(raw.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise ParseError("not a plain PGM (P2) file", line=1)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.asarray([int(t) for t in tokens[4:]], dtype=np.int64)
    except (ValueError, IndexError):
        raise ParseError("malformed PGM header or data") from None
    if vals.size != w * h:
        raise ParseError(f"expected {w * h} pixels, found {vals.size}")
    if maxval != 255 or not np.all(np.isin(vals, (0, 255))):
        raise ParseError("mask must be binary with maxval 255")
    return SilhouetteMask(pixels=vals.reshape(h, w).astype(np.uint8))


# ---------------------------------------------------------------------------
# silhouettes
# ---------------------------------------------------------------------------

def render_silhouette(state, camera=None, size=128, n_per_prim=1000,
                      splat_radius=1.5,
                      ss_steps=flowfield.DEFAULT_SS_STEPS):
    """Point-splat silhouette: mark pixels whose center lies within
    splat_radius pixels of a projected surface sample."""
    cam = camera if camera is not None else state.camera
    if cam is None:
        raise ValueError("rendering needs a camera")
    pixels = np.zeros((size, size), dtype=np.uint8)
    if state.primitives:
        pts = np.concatenate([surface_points(p, n_per_prim, ss_steps)
                              for p in state.primitives], axis=0)
        proj = geometry.project(cam, geometry.camera_transform(cam, pts))
        px = (proj[:, 0] + 1.0) * 0.5 * size - 0.5
        py = (1.0 - proj[:, 1]) * 0.5 * size - 0.5
        base_c = np.floor(px).astype(np.int64)
        base_r = np.floor(py).astype(np.int64)
        reach = int(np.ceil(splat_radius))
        r2 = splat_radius ** 2
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                rr = base_r + dr
                cc = base_c + dc
                ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
                ok &= (rr - py) ** 2 + (cc - px) ** 2 <= r2
                pixels[rr[ok], cc[ok]] = 255
    return SilhouetteMask(pixels=pixels)


def silhouette_points(mask):
    """Foreground pixel centers in normalized [-1, 1]^2 image coordinates
    (x right, y up; row 0 is the y = +1 side)."""
    rows, cols = np.nonzero(mask.pixels)
    if rows.size == 0:
        raise EmptySilhouette("mask has no foreground pixels")
    x = 2.0 * (cols + 0.5) / mask.width - 1.0
    y = 1.0 - 2.0 * (rows + 0.5) / mask.height
    return np.stack([x, y], axis=-1)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def _grid_to_json(grid):
    flat = np.transpose(grid.values, (2, 1, 0, 3)).reshape(-1, 3)
    return {
        "resolution": grid.resolution,
        "half_width": grid.half_width,
        "sigma": grid.sigma,
        "values": [list(map(float, row)) for row in flat],
    }


def _grid_from_json(obj):
    g = int(obj["resolution"])
    flat = np.asarray(obj["values"], dtype=np.float64)
    if flat.shape != (g ** 3, 3):
        raise ParseError("velocity grid has wrong number of values")
    vals = np.transpose(flat.reshape(g, g, g, 3), (2, 1, 0, 3))
    return flowfield.VelocityGrid(resolution=g, half_width=float(obj["half_width"]),
                                  sigma=float(obj["sigma"]), values=vals)


def save_model(state, path):
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "normalization": {"center": list(map(float, state.center)),
                          "scale": float(state.scale)},
        "camera": None if state.camera is None else {
            "c": list(map(float, state.camera.c)),
            "q": list(map(float, state.camera.q)),
            "focal": float(state.camera.focal),
        },
        "primitives": [{
            "c": list(map(float, p.pose.c)),
            "q": list(map(float, p.pose.q)),
            "a": list(map(float, p.shape.a)),
            "eps": list(map(float, p.shape.eps)),
            "t": list(map(float, p.shape.t)),
            "b": float(p.shape.b),
            "grid": _grid_to_json(p.grid),
        } for p in state.primitives],
    }
    _atomic_write(path, json.dumps(doc, indent=1) + "\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad model file: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ParseError("not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatch(f"model version {doc.get('version')} "
                              f"(expected {MODEL_VERSION})")
    try:
        cam = None
        if doc["camera"] is not None:
            cam = geometry.CameraParams(c=doc["camera"]["c"], q=doc["camera"]["q"],
                                        focal=doc["camera"]["focal"])
        prims = []
        for p in doc["primitives"]:
            prims.append(PrimitiveParams(
                pose=geometry.PrimitivePose(c=p["c"], q=p["q"]),
                shape=geometry.GlobalShapeParams(a=p["a"], eps=p["eps"],
                                                 t=p["t"], b=p["b"]),
                grid=_grid_from_json(p["grid"]),
            ))
        norm = doc["normalization"]
        return FitState(primitives=prims, camera=cam, center=norm["center"],
                        scale=norm["scale"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad model file: {exc}") from None


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return "none"
    return repr(float(v))


def write_report(report, path):
    """Structured-text report plus a short summary table."""
    lines = ["# sqfit report"]
    lines.append(f"n_primitives = {report.n_prim}")
    lines.append(f"iou = {_fmt(report.iou)}")
    lines.append(f"chamfer = {_fmt(report.chamfer)}")
    lines.append(f"chamfer_l1 = {_fmt(report.chamfer_l1)}")
    lines.append(f"gcc = {_fmt(report.gcc)}")
    lines.append(f"icc = {_fmt(report.icc)}")
    for i, (count, center) in enumerate(zip(report.prim_points, report.prim_centers)):
        cstr = " ".join(repr(float(v)) for v in center)
        lines.append(f"primitive[{i}].points = {count}")
        lines.append(f"primitive[{i}].center = {cstr}")
    trace = " ".join(repr(float(v)) for v in report.loss_trace)
    lines.append(f"loss_trace = {trace}")
    lines.append("")
    lines.append("metric      value")
    lines.append(f"iou         {report.iou if report.iou is None else f'{report.iou:.4f}'}")
    lines.append(f"chamfer_l1  {report.chamfer_l1:.6f}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
