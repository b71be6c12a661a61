"""Triangle meshes, rigid landmark alignment, facial detail transfer,
seam smoothing, and linear shape bases.

All operations treat vertex topology as fixed: they return new vertex arrays
with the same count and never touch the face list.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import io
from .errors import (
    AlignmentDegenerateError,
    DimensionError,
    FormatError,
    IncompleteCorrespondenceError,
    TopologyError,
    ValidationError,
)

FIXED, REPLACEABLE, TRANSITION = 0, 1, 2
LABEL_NAMES = {"fixed": FIXED, "replaceable": REPLACEABLE, "transition": TRANSITION}
LANDMARK_COUNTS = {"alignment-7": 7, "eyes-20": 20, "mouth-28": 28}


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    normals: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DimensionError(f"vertices must be (V, 3), got {v.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise TopologyError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise TopologyError("degenerate face (repeated vertex index)")
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64)
            if n.shape != v.shape:
                raise DimensionError("normals must match vertices")
            object.__setattr__(self, "normals", n)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "Mesh":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise TopologyError(f"vertex count changed: {vertices.shape} vs {self.vertices.shape}")
        return replace(self, vertices=vertices, normals=None)

    def edges(self) -> np.ndarray:
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def adjacency(self) -> sp.csr_matrix:
        e = self.edges()
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def vertex_normals(self) -> np.ndarray:
        v, f = self.vertices, self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        n = np.zeros_like(v)
        for k in range(3):
            np.add.at(n, f[:, k], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True)
class LandmarkSet:
    indices: np.ndarray
    role: str = "alignment-7"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        object.__setattr__(self, "indices", idx)
        if self.role not in LANDMARK_COUNTS:
            raise ValidationError(f"unknown landmark role {self.role!r}")
        if len(idx) != LANDMARK_COUNTS[self.role]:
            raise ValidationError(
                f"{self.role} landmark set needs {LANDMARK_COUNTS[self.role]} indices, got {len(idx)}"
            )

    def points(self, mesh: Mesh) -> np.ndarray:
        if self.indices.min() < 0 or self.indices.max() >= mesh.n_vertices:
            raise ValidationError("landmark index out of range for mesh")
        return mesh.vertices[self.indices]


@dataclass(frozen=True)
class RegionMask:
    labels: np.ndarray  # per-vertex FIXED / REPLACEABLE / TRANSITION
    rings: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8).ravel()
        if labels.size and not np.isin(labels, (FIXED, REPLACEABLE, TRANSITION)).all():
            raise ValidationError("mask labels must be fixed/replaceable/transition")
        object.__setattr__(self, "labels", labels)

    @property
    def fixed(self):
        return self.labels == FIXED

    @property
    def replaceable(self):
        return self.labels == REPLACEABLE

    @property
    def transition(self):
        return self.labels == TRANSITION

    def check(self, mesh: Mesh) -> None:
        if len(self.labels) != mesh.n_vertices:
            raise DimensionError(f"mask has {len(self.labels)} labels for {mesh.n_vertices} vertices")
        if not self.transition.any():
            return
        adj = mesh.adjacency()
        touch = adj @ self.transition.astype(float) > 0
        for name, region in (("fixed", self.fixed), ("replaceable", self.replaceable)):
            if region.any() and not (touch & region).any():
                raise ValidationError(f"transition region is not adjacent to the {name} region")


def _grow(adj: sp.csr_matrix, seed: np.ndarray, allowed: np.ndarray, hops: int) -> np.ndarray:
    out = seed & allowed
    for _ in range(hops):
        out = out | ((adj @ out.astype(float) > 0) & allowed)
    return out


def make_region_mask(mesh: Mesh, replaceable, rings: int = 3) -> RegionMask:
    """Label vertices given the replaceable (face) set.

    The transition band takes ``rings`` edge rings on each side of the border
    between the replaceable set and the rest of the head.
    """
    inside = np.zeros(mesh.n_vertices, dtype=bool)
    inside[np.asarray(replaceable, dtype=np.int64)] = True
    labels = np.where(inside, REPLACEABLE, FIXED).astype(np.int8)
    if rings > 0 and inside.any() and not inside.all():
        adj = mesh.adjacency()
        near_out = adj @ (~inside).astype(float) > 0
        near_in = adj @ inside.astype(float) > 0
        band = _grow(adj, inside & near_out, inside, rings - 1)
        band |= _grow(adj, ~inside & near_in, ~inside, rings - 1)
        labels[band] = TRANSITION
    return RegionMask(labels, rings)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    rmse: float | None = None

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise DimensionError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) <= 0:
            raise ValidationError("rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def rigid_align(source, target, with_scale: bool = False) -> RigidTransform:
    """Least-squares rigid (optionally similarity) transform mapping source onto target.

    Closed-form Kabsch/Umeyama via SVD of the cross-covariance, with the
    reflection fix so the result is a proper rotation. The residual RMSE is
    stored on the returned transform.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DimensionError(f"point sets must both be (K, 3), got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise AlignmentDegenerateError("need at least 3 point pairs")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise AlignmentDegenerateError("source points are coincident or collinear")
    if np.linalg.svd(xd, compute_uv=False)[1] <= 1e-9 * max(sv[0], 1e-300):
        raise AlignmentDegenerateError("target points are coincident or collinear")

    u, s, vt = np.linalg.svd(xd.T @ xs)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = (u * d) @ vt
    scale = float((s * d).sum() / (xs**2).sum()) if with_scale else 1.0
    trans = mu_d - scale * rot @ mu_s
    resid = scale * src @ rot.T + trans - dst
    rmse = float(np.sqrt((resid**2).sum(1).mean()))
    return RigidTransform(rot, trans, scale, rmse)


@dataclass(frozen=True)
class Correspondence:
    """Barycentric anchors on the detail mesh, one per replaceable vertex."""

    vertex_ids: np.ndarray  # (K,) vertex index on the initial mesh
    face_ids: np.ndarray  # (K,) face index on the detail mesh
    bary: np.ndarray  # (K, 3)

    def __post_init__(self):
        object.__setattr__(self, "vertex_ids", np.asarray(self.vertex_ids, dtype=np.int64).ravel())
        object.__setattr__(self, "face_ids", np.asarray(self.face_ids, dtype=np.int64).ravel())
        object.__setattr__(self, "bary", np.asarray(self.bary, dtype=np.float64).reshape(-1, 3))
        if not (len(self.vertex_ids) == len(self.face_ids) == len(self.bary)):
            raise DimensionError("correspondence arrays differ in length")

    def positions(self, detail: Mesh) -> np.ndarray:
        if len(self.face_ids) and self.face_ids.max() >= len(detail.faces):
            raise ValidationError("correspondence face index out of range for detail mesh")
        tri = detail.vertices[detail.faces[self.face_ids]]  # (K, 3, 3)
        return np.einsum("kj,kjd->kd", self.bary, tri)


def closest_point_on_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to p; all arrays (M, 3).

    Returns (points, barycentric weights). Voronoi-region case analysis; the
    earlier regions take precedence when several masks fire.
    """
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 1 / 3)
        w = np.where(denom != 0, vc / denom, 1 / 3)
        bary = np.stack([1 - v - w, v, w], axis=1)

        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        cases = [
            (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), np.stack([0 * t, 1 - t, t], 1),
        ]
        t = d2 / (d2 - d6)
        cases += [(vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - t, 0 * t, t], 1)]
        cases += [(d6 >= 0) & (d5 <= d6), np.tile([0.0, 0.0, 1.0], (len(p), 1))]
        t = d1 / (d1 - d3)
        cases += [(vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - t, t, 0 * t], 1)]
        cases += [(d3 >= 0) & (d4 <= d3), np.tile([0.0, 1.0, 0.0], (len(p), 1))]
        cases += [(d1 <= 0) & (d2 <= 0), np.tile([1.0, 0.0, 0.0], (len(p), 1))]
    for k in range(0, len(cases), 2):
        bary = np.where(cases[k][:, None], cases[k + 1], bary)
    pts = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return pts, bary


def project_correspondence(initial: Mesh, detail: Mesh, vertex_ids, k: int = 16) -> Correspondence:
    """Anchor each listed initial vertex at its nearest point on the detail surface.

    Candidates are the ``k`` triangles with the nearest centroids, which is
    exact for reasonably uniform tessellations.
    """
    ids = np.asarray(vertex_ids, dtype=np.int64).ravel()
    if len(ids) == 0:
        return Correspondence(ids, ids.copy(), np.zeros((0, 3)))
    tri = detail.vertices[detail.faces]
    k = min(k, len(detail.faces))
    _, cand = cKDTree(tri.mean(1)).query(initial.vertices[ids], k=k)
    cand = np.asarray(cand).reshape(len(ids), k)
    q = np.repeat(initial.vertices[ids], k, axis=0)
    flat = cand.ravel()
    pts, bary = closest_point_on_triangles(q, tri[flat, 0], tri[flat, 1], tri[flat, 2])
    d2 = ((pts - q) ** 2).sum(1).reshape(len(ids), k)
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(ids)) * k + best
    return Correspondence(ids, flat[rows], bary[rows])


def transfer_details(initial: Mesh, detail: Mesh, mask: RegionMask, correspondence: Correspondence) -> Mesh:
    """Move replaceable vertices onto their anchors on the (pre-aligned) detail mesh.

    Every other vertex is copied through unchanged.
    """
    mask.check(initial)
    targets = np.flatnonzero(mask.replaceable)
    lookup = {int(v): k for k, v in enumerate(correspondence.vertex_ids)}
    missing = [int(v) for v in targets if int(v) not in lookup]
    if missing:
        raise IncompleteCorrespondenceError(
            f"{len(missing)} replaceable vertices lack a correspondence (first: {missing[:5]})"
        )
    out = initial.vertices.copy()
    if len(targets):
        rows = np.array([lookup[int(v)] for v in targets])
        out[targets] = correspondence.positions(detail)[rows]
    return initial.with_vertices(out)


def umbrella_laplacian(mesh: Mesh, adj: sp.csr_matrix | None = None) -> np.ndarray:
    """Per-vertex ``mean(neighbours) - v``; isolated vertices get zero."""
    adj = mesh.adjacency() if adj is None else adj
    deg = np.asarray(adj.sum(1)).ravel()
    mean = (adj @ mesh.vertices) / np.where(deg > 0, deg, 1)[:, None]
    return np.where(deg[:, None] > 0, mean - mesh.vertices, 0.0)


def max_laplacian(mesh: Mesh, region) -> float:
    lap = umbrella_laplacian(mesh)[np.asarray(region)]
    return float(np.linalg.norm(lap, axis=1).max()) if len(lap) else 0.0


def smooth_transition(mesh: Mesh, mask: RegionMask, iterations: int = 10, lam: float = 0.5) -> Mesh:
    """Umbrella-operator relaxation restricted to transition vertices.

    Each iteration updates all transition vertices simultaneously from the
    previous iterate: v <- v + lam * (mean(neighbours) - v).
    """
    if not 0 <= lam <= 1:
        raise ValidationError("lambda must lie in [0, 1]")
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    mask.check(mesh)
    band = mask.transition
    if iterations == 0 or lam == 0 or not band.any():
        return mesh.with_vertices(mesh.vertices.copy())
    adj = mesh.adjacency()
    deg = np.asarray(adj.sum(1)).ravel()[band]
    rows = adj[band]
    v = mesh.vertices.copy()
    for _ in range(iterations):
        mean = (rows @ v) / deg[:, None]
        v[band] += lam * (mean - v[band])
    return mesh.with_vertices(v)


@dataclass(frozen=True)
class ShapeBasisSet:
    base: np.ndarray  # (R, 3) region vertices sampled from the triplane
    bases: np.ndarray  # (K, R, 3)
    coefficients: np.ndarray  # (K,)

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64)
        bases = np.asarray(self.bases, dtype=np.float64)
        coef = np.asarray(self.coefficients, dtype=np.float64).ravel()
        if bases.ndim != 3 or bases.shape[1:] != base.shape:
            raise DimensionError(f"basis fields {bases.shape} do not match region {base.shape}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "coefficients", coef)

    def with_coefficients(self, alpha) -> "ShapeBasisSet":
        return replace(self, coefficients=alpha)


def sample_triplane(grid, v, u) -> np.ndarray:
    """Gather ``grid[v, u, :]`` for integer pixel coordinates."""
    grid = np.asarray(grid, dtype=np.float64)
    return grid[np.asarray(v, dtype=np.int64), np.asarray(u, dtype=np.int64), :]


def apply_shape_basis(basis: ShapeBasisSet) -> np.ndarray:
    """Region vertices ``base + sum_i alpha_i * S_i``."""
    alpha = basis.coefficients
    if len(alpha) != len(basis.bases):
        raise DimensionError(f"{len(alpha)} coefficients for {len(basis.bases)} bases")
    return basis.base + np.tensordot(alpha, basis.bases, axes=(0, 0))


def synthetic_shape_bases(region_vertices, n_bases: int = 80, seed: int = 0, amplitude: float = 0.01) -> np.ndarray:
    """Seeded smooth displacement fields over a vertex region.

    Each field is a sum of a few Gaussian bumps with random 3D directions, so
    neighbouring vertices move coherently like a real morphable-model basis.
    """
    pts = np.asarray(region_vertices, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lo, hi = pts.min(0), pts.max(0)
    extent = float(np.linalg.norm(hi - lo)) or 1.0
    out = np.zeros((n_bases, len(pts), 3))
    for i in range(n_bases):
        for _ in range(3):
            centre = lo + rng.random(3) * (hi - lo)
            width = extent * (0.1 + 0.3 * rng.random())
            direction = rng.normal(size=3)
            w = np.exp(-((pts - centre) ** 2).sum(1) / (2 * width**2))
            out[i] += w[:, None] * direction
        out[i] *= amplitude / max(np.abs(out[i]).max(), 1e-12)
    return out


# -- file formats ---------------------------------------------------------------


def read_obj(path) -> Mesh:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    verts, faces = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise FormatError(f"{path}:{lineno}: only triangles are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def format_obj(mesh: Mesh, precision: int = 9, comments=()) -> str:
    # rounding first, then +0.0, keeps tiny negatives from printing as "-0.000"
    v = np.round(mesh.vertices, precision) + 0.0
    lines = [f"# {c}" for c in comments]
    lines += [f"v {x:.{precision}f} {y:.{precision}f} {z:.{precision}f}" for x, y, z in v]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def write_obj(path, mesh: Mesh, precision: int = 9, comments=()) -> None:
    Path(path).write_text(format_obj(mesh, precision, comments))


def read_landmarks(path) -> dict[str, LandmarkSet]:
    """``{"schema": "rigforge.landmarks/1", "sets": {name: {"role", "indices"}}}``"""
    doc = io.read_json(path, "rigforge.landmarks")
    return {name: LandmarkSet(s["indices"], s.get("role", "alignment-7")) for name, s in doc["sets"].items()}


def write_landmarks(path, sets: dict[str, LandmarkSet]) -> None:
    io.write_json(path, {
        "schema": "rigforge.landmarks/1",
        "sets": {k: {"role": s.role, "indices": s.indices.tolist()} for k, s in sets.items()},
    })


def read_mask(path, mesh: Mesh | None = None) -> RegionMask:
    """Either explicit ``labels`` (names or ints) or a ``replaceable`` index list plus ``rings``."""
    doc = io.read_json(path, "rigforge.mask")
    if "labels" in doc:
        labels = [LABEL_NAMES[x] if isinstance(x, str) else int(x) for x in doc["labels"]]
        return RegionMask(np.array(labels), int(doc.get("rings", 0)))
    if "replaceable" in doc:
        if mesh is None:
            raise ValidationError("mask given as a replaceable set needs the mesh to derive rings")
        return make_region_mask(mesh, doc["replaceable"], int(doc.get("rings", 3)))
    raise FormatError(f"{path}: mask needs 'labels' or 'replaceable'")


def write_mask(path, mask: RegionMask) -> None:
    io.write_json(path, {"schema": "rigforge.mask/1", "rings": mask.rings, "labels": mask.labels.tolist()})


def read_correspondence(path) -> Correspondence:
    doc = io.read_json(path, "rigforge.correspondence")
    return Correspondence(doc["vertex_ids"], doc["face_ids"], np.array(doc["bary"]).reshape(-1, 3))


def write_correspondence(path, corr: Correspondence) -> None:
    io.write_json(path, {
        "schema": "rigforge.correspondence/1",
        "vertex_ids": corr.vertex_ids.tolist(),
        "face_ids": corr.face_ids.tolist(),
        "bary": corr.bary.tolist(),
    })


def read_shape_basis(path) -> ShapeBasisSet:
    doc = io.read_json(path, "rigforge.shape-basis")
    base = np.array(doc["base"], dtype=np.float64).reshape(-1, 3)
    bases = np.array(doc["bases"], dtype=np.float64).reshape(-1, len(base), 3)
    coef = doc.get("coefficients", [0.0] * len(bases))
    return ShapeBasisSet(base, bases, coef)


def write_shape_basis(path, basis: ShapeBasisSet) -> None:
    io.write_json(path, {
        "schema": "rigforge.shape-basis/1",
        "base": basis.base.tolist(),
        "bases": basis.bases.tolist(),
        "coefficients": basis.coefficients.tolist(),
    })
