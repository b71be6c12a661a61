"""Joint trees, forward kinematics, linear blend skinning and skeleton calibration.

The numpy path (``forward_kinematics``, ``lbs_deform``) is the reference
forward model. Calibration re-expresses the same forward model in torch so
the leaf-joint parameters can be fitted by reverse-mode autodiff; only leaf
joints move, so their parents' absolute transforms are constants there.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import io, quat
from .errors import BindingError, DimensionError, MapError, SkeletonError, TopologyError, ValidationError
from .mesh import Mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SkeletonRig:
    names: tuple[str, ...]
    parents: np.ndarray  # parents[j] < j, root has -1
    translations: np.ndarray  # (J, 3) local translation relative to parent
    rotations: np.ndarray  # (J, 4) local unit quaternion (w, x, y, z)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64).ravel()
        t = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "translations", t)
        object.__setattr__(self, "rotations", q)
        n = len(self.names)
        if not (len(parents) == len(t) == len(q) == n) or n == 0:
            raise DimensionError("rig arrays must all have one entry per joint")
        if len(set(self.names)) != n:
            raise SkeletonError("joint names must be unique")
        if (parents == -1).sum() != 1 or parents[0] != -1:
            raise TopologyError("rig needs exactly one root, stored first")
        if np.any(parents[1:] >= np.arange(1, n)) or np.any(parents[1:] < 0):
            raise TopologyError("joints must be topologically ordered (parent index < child index)")
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1) > 1e-9):
            raise ValidationError("local rotations must be unit quaternions (1e-9)")

    @classmethod
    def from_nodes(cls, nodes) -> "SkeletonRig":
        """Build from ``{"name", "parent", "translation", "rotation"}`` dicts in any order.

        Sorts parents before children, otherwise keeping input order; raises on cycles, dangling parents, or
        multiple roots.
        """
        by_name = {}
        for node in nodes:
            if node["name"] in by_name:
                raise SkeletonError(f"duplicate joint {node['name']!r}")
            by_name[node["name"]] = node
        roots = [n for n, d in by_name.items() if d.get("parent") is None]
        if len(roots) != 1:
            raise TopologyError(f"rig needs exactly one root, found {len(roots)}")
        children: dict[str, list[str]] = {n: [] for n in by_name}
        for name, d in by_name.items():
            p = d.get("parent")
            if p is not None:
                if p not in by_name:
                    raise TopologyError(f"joint {name!r} has unknown parent {p!r}")
                children[p].append(name)
        # Kahn's algorithm, releasing ready joints in input order so already-sorted files keep their order
        rank = {n: i for i, n in enumerate(by_name)}
        order, ready = [], [(rank[roots[0]], roots[0])]
        while ready:
            _, name = heapq.heappop(ready)
            order.append(name)
            for c in children[name]:
                heapq.heappush(ready, (rank[c], c))
        if len(order) != len(by_name):
            missing = sorted(set(by_name) - set(order))
            raise TopologyError(f"cycle detected among joints {missing[:5]}")
        index = {n: i for i, n in enumerate(order)}
        parents = [-1 if by_name[n].get("parent") is None else index[by_name[n]["parent"]] for n in order]
        t = [by_name[n].get("translation", [0.0, 0.0, 0.0]) for n in order]
        q = [by_name[n].get("rotation", [1.0, 0.0, 0.0, 0.0]) for n in order]
        return cls(tuple(order), np.array(parents), np.array(t, dtype=float), np.array(q, dtype=float))

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SkeletonError(f"unknown joint {name!r}") from None

    def leaves(self) -> np.ndarray:
        has_child = np.zeros(self.n_joints, dtype=bool)
        has_child[self.parents[1:]] = True
        return np.flatnonzero(~has_child)

    def local_matrices(self) -> np.ndarray:
        return quat.rigid(self.rotations, self.translations)


def forward_kinematics(rig: SkeletonRig) -> np.ndarray:
    """Absolute 4x4 transform of every joint: abs(child) = abs(parent) @ local(child)."""
    local = rig.local_matrices()
    out = np.empty_like(local)
    for j, p in enumerate(rig.parents):
        out[j] = local[j] if p < 0 else out[p] @ local[j]
    return out


@dataclass(frozen=True)
class SkinBinding:
    weights: np.ndarray  # (V, J) dense, rows sum to 1
    rest: np.ndarray  # (J, 4, 4) absolute joint transforms at bind time

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        rest = np.asarray(self.rest, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rest", rest)
        if w.ndim != 2 or rest.shape != (w.shape[1], 4, 4):
            raise DimensionError(f"weights {w.shape} and rest {rest.shape} disagree")
        if np.any(w < 0):
            raise BindingError("skin weights must be non-negative")
        sums = w.sum(1)
        if np.any(sums == 0):
            raise BindingError(f"unbound vertices: {np.flatnonzero(sums == 0)[:5].tolist()}")
        if np.any(np.abs(sums - 1) > 1e-6):
            raise BindingError("per-vertex skin weights must sum to 1 (1e-6)")

    def skinning_matrices(self, pose: np.ndarray) -> np.ndarray:
        pose = np.asarray(pose, dtype=np.float64)
        if pose.shape != self.rest.shape:
            raise BindingError(f"pose covers {len(pose)} joints, binding needs {len(self.rest)}")
        return pose @ quat.invert_rigid(self.rest)


def lbs_deform(vertices, binding: SkinBinding, pose) -> np.ndarray:
    """Linear blend skinning: v' = sum_j w_j (pose_j rest_j^-1) v."""
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) != len(binding.weights):
        raise BindingError(f"{len(v)} vertices but binding has {len(binding.weights)}")
    blended = np.einsum("vj,jab->vab", binding.weights, binding.skinning_matrices(pose)[:, :3, :])
    return np.einsum("vab,vb->va", blended[:, :, :3], v) + blended[:, :, 3]


def vertex_loss(current, target):
    """Sum of squared per-vertex distances. Works on numpy arrays and torch tensors."""
    if tuple(current.shape) != tuple(target.shape):
        raise TopologyError(f"vertex arrays differ: {tuple(current.shape)} vs {tuple(target.shape)}")
    return ((current - target) ** 2).sum()


@dataclass(frozen=True)
class OverlapMap:
    joints: np.ndarray  # joint indices (leaves)
    vertices: np.ndarray  # vertex index M(i) for each

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.int64).ravel()
        v = np.asarray(self.vertices, dtype=np.int64).ravel()
        if len(j) != len(v):
            raise MapError("overlap map joint and vertex lists differ in length")
        if len(set(v.tolist())) != len(v) or len(set(j.tolist())) != len(j):
            raise MapError("overlap map must be injective")
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "vertices", v)

    def check(self, rig: SkeletonRig, mesh: Mesh | None = None, bind_tol: float | None = 1e-4) -> None:
        if len(self.joints) == 0:
            return
        if self.joints.max() >= rig.n_joints:
            raise MapError("overlap map references a joint absent from the rig")
        leaves = set(rig.leaves().tolist())
        bad = [rig.names[j] for j in self.joints if j not in leaves]
        if bad:
            raise MapError(f"overlap joints must be leaves: {bad[:5]}")
        if mesh is not None:
            if self.vertices.max() >= mesh.n_vertices:
                raise MapError("overlap map references a vertex outside the mesh")
            if bind_tol is not None:
                gap = np.linalg.norm(forward_kinematics(rig)[self.joints, :3, 3] - mesh.vertices[self.vertices], axis=1)
                if gap.max() >= bind_tol:
                    raise MapError(f"overlap joint sits {gap.max():.3g} from its vertex (tolerance {bind_tol})")


def overlap_loss(joint_positions, vertices, overlap: OverlapMap):
    """Sum over mapped leaves of squared distance between joint and its vertex.

    ``joint_positions`` is (J, 3) for the current pose, ``vertices`` the current
    deformed mesh. Works on numpy arrays and torch tensors.
    """
    if len(overlap.joints) == 0:
        return vertices.sum() * 0.0
    if overlap.joints.max() >= len(joint_positions):
        raise MapError("overlap joint missing from pose")
    j = overlap.joints
    v = overlap.vertices
    if isinstance(joint_positions, torch.Tensor):
        j, v = torch.as_tensor(j), torch.as_tensor(v)
    return ((joint_positions[j] - vertices[v]) ** 2).sum()


# -- calibration ---------------------------------------------------------------


@dataclass
class CalibrationConfig:
    lr: float = 1e-2
    max_iters: int = 2000
    tol: float = 1e-6  # relative change between accepted steps
    loss_floor: float = 1e-14
    optimize_translations: bool = True
    optimize_rotations: bool = False
    step_clamp: float | None = 0.02  # max translation change per joint per step
    step_halving: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class CalibrationResult:
    rig: SkeletonRig
    residual: np.ndarray  # (V, 3) rest-space blendshape, zero outside the mask
    loss_v: float
    loss_s: float
    loss_total: float
    skeleton_loss_v: float  # L_v after the skeleton fit, before the residual
    initial_loss_v: float
    iterations: int
    converged: bool
    trace: list[float] = field(default_factory=list)


def _rodrigues(omega: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for axis-angle vectors (..., 3); smooth through zero."""
    theta2 = (omega**2).sum(-1, keepdim=True)[..., None]
    small = theta2 < 1e-10
    safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe)
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / safe)
    x, y, z = omega.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(omega.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=omega.dtype).expand_as(k)
    return eye + a * k + b * (k @ k)


class LeafModel:
    """Differentiable forward model with only leaf-joint parameters free.

    Parameters are each leaf's local translation and an axis-angle increment
    applied after its current local rotation.
    """

    def __init__(self, rig: SkeletonRig, binding: SkinBinding, rest_vertices, overlap: OverlapMap):
        self.rig = rig
        self.binding = binding
        self.overlap = overlap
        self.leaves = rig.leaves()
        glob = forward_kinematics(rig)
        dt = torch.float64
        self.parent_abs = torch.tensor(glob[rig.parents[self.leaves]], dtype=dt)
        fixed = np.ones(rig.n_joints, dtype=bool)
        fixed[self.leaves] = False
        self.fixed_idx = np.flatnonzero(fixed)
        self.fixed_abs = torch.tensor(glob[fixed], dtype=dt)
        self.rest_inv = torch.tensor(quat.invert_rigid(binding.rest), dtype=dt)
        self.weights = torch.tensor(binding.weights, dtype=dt)
        self.rest_vertices = torch.tensor(np.asarray(rest_vertices), dtype=dt)
        self.order = torch.as_tensor(np.argsort(np.concatenate([self.fixed_idx, self.leaves])))

    def pose(self, translations, base_rot, omega) -> torch.Tensor:
        rot = base_rot @ _rodrigues(omega)
        local = torch.zeros((len(self.leaves), 4, 4), dtype=torch.float64)
        local[:, :3, :3] = rot
        local[:, :3, 3] = translations
        local[:, 3, 3] = 1.0
        leaf_abs = self.parent_abs @ local
        return torch.cat([self.fixed_abs, leaf_abs])[self.order]

    def deform(self, pose: torch.Tensor, rest_vertices=None) -> torch.Tensor:
        v = self.rest_vertices if rest_vertices is None else rest_vertices
        skin = (pose @ self.rest_inv)[:, :3, :]
        blended = torch.einsum("vj,jab->vab", self.weights, skin)
        return torch.einsum("vab,vb->va", blended[:, :, :3], v) + blended[:, :, 3]

    def losses(self, translations, base_rot, omega, target):
        pose = self.pose(translations, base_rot, omega)
        verts = self.deform(pose)
        lv = vertex_loss(verts, target)
        ls = overlap_loss(pose[:, :3, 3], verts, self.overlap)
        return lv, ls


def total_loss(rig: SkeletonRig, binding: SkinBinding, rest_vertices, target, overlap: OverlapMap) -> float:
    """L_v + L_s evaluated through the numpy forward path."""
    pose = forward_kinematics(rig)
    verts = lbs_deform(rest_vertices, binding, pose)
    return float(vertex_loss(verts, target) + overlap_loss(pose[:, :3, 3], verts, overlap))


def leaf_loss_and_grad(rig, binding, rest_vertices, target, overlap, translations, omega):
    """L_total and its autodiff gradient w.r.t. leaf translations and rotation increments."""
    model = LeafModel(rig, binding, rest_vertices, overlap)
    t = torch.tensor(translations, dtype=torch.float64, requires_grad=True)
    w = torch.tensor(omega, dtype=torch.float64, requires_grad=True)
    base = torch.tensor(quat.to_matrix(rig.rotations[model.leaves]))
    lv, ls = model.losses(t, base, w, torch.tensor(np.asarray(target)))
    loss = lv + ls
    loss.backward()
    return float(loss.detach()), t.grad.numpy().copy(), w.grad.numpy().copy()


def _residual_blendshape(model: LeafModel, pose: torch.Tensor, deformed, target, mask) -> np.ndarray:
    """Rest-space offsets r with LBS(rest + r) == target on masked vertices.

    LBS is affine in the rest position, so r solves the per-vertex blended
    3x3 linear part against the remaining error.
    """
    skin = (pose @ model.rest_inv)[:, :3, :3]
    blended = torch.einsum("vj,jab->vab", model.weights, skin).numpy()
    err = np.asarray(target) - deformed
    r = np.linalg.solve(blended, err[..., None])[..., 0]
    r[~mask] = 0.0
    return r


def calibrate_skeleton(
    rig: SkeletonRig,
    binding: SkinBinding,
    neutral: Mesh,
    target: Mesh,
    overlap: OverlapMap,
    config: CalibrationConfig | None = None,
    residual_mask=None,
) -> CalibrationResult:
    """Fit leaf joints of a neutral rig to a target mesh, then absorb what is left.

    Stage one runs Adam on L_v + L_s over leaf parameters only; with
    ``step_halving`` a step that raises the loss is rejected and the learning
    rate halved, so the recorded trace never increases. Stage two turns the
    remaining vertex error inside ``residual_mask`` into a rest-space
    blendshape for the neutral mesh.
    """
    cfg = config or CalibrationConfig()
    if neutral.n_vertices != target.n_vertices:
        raise TopologyError("neutral and target meshes must share topology")
    overlap.check(rig, neutral, bind_tol=None)
    mask = np.ones(neutral.n_vertices, dtype=bool) if residual_mask is None else np.asarray(residual_mask, bool)

    model = LeafModel(rig, binding, neutral.vertices, overlap)
    leaves = model.leaves
    tgt = torch.tensor(target.vertices)
    trans = torch.tensor(rig.translations[leaves])
    base_rot = torch.tensor(quat.to_matrix(rig.rotations[leaves]))
    leaf_q = rig.rotations[leaves].copy()
    omega = torch.zeros((len(leaves), 3), dtype=torch.float64)
    m = torch.zeros((len(leaves), 6), dtype=torch.float64)
    v = torch.zeros_like(m)
    free = torch.tensor([cfg.optimize_translations] * 3 + [cfg.optimize_rotations] * 3, dtype=torch.float64)

    def evaluate(t, w, grad=False):
        if grad:
            t = t.clone().requires_grad_(True)
            w = w.clone().requires_grad_(True)
        lv, ls = model.losses(t, base_rot, w, tgt)
        loss = lv + ls
        if not grad:
            return float(loss), float(lv)
        loss.backward()
        return float(loss.detach()), torch.cat([t.grad, w.grad], 1)

    with torch.no_grad():
        loss, initial_lv = evaluate(trans, omega)
    trace = [loss]
    lr, step_count, it = cfg.lr, 0, 0
    converged = loss <= cfg.loss_floor
    while not converged and it < cfg.max_iters:
        it += 1
        _, g = evaluate(trans, omega, grad=True)
        g = g * free
        step_count += 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g**2
        mhat = m / (1 - cfg.beta1**step_count)
        vhat = v / (1 - cfg.beta2**step_count)
        step = lr * mhat / (torch.sqrt(vhat) + cfg.eps)
        dt, dw = step[:, :3], step[:, 3:]
        if cfg.step_clamp is not None:
            norm = torch.linalg.norm(dt, dim=1, keepdim=True)
            dt = dt * torch.clamp(cfg.step_clamp / torch.clamp(norm, min=1e-300), max=1.0)
        new_t = trans - dt
        new_w = omega - dw
        with torch.no_grad():
            new_loss, _ = evaluate(new_t, new_w)
        if not np.isfinite(new_loss):
            log.warning("calibration produced a non-finite loss at iteration %d", it)
            break
        if cfg.step_halving and new_loss > loss:
            lr *= 0.5
            trace.append(loss)
            if lr < 1e-12:
                break
            continue
        rel = (loss - new_loss) / max(loss, 1e-300)
        trans = new_t
        if cfg.optimize_rotations:
            # fold the increment into the stored quaternion so omega stays near zero
            leaf_q = quat.normalize(quat.multiply(leaf_q, quat.from_axis_angle(new_w.numpy())))
            base_rot = torch.tensor(quat.to_matrix(leaf_q))
        loss = new_loss
        trace.append(loss)
        if loss <= cfg.loss_floor or 0 <= rel < cfg.tol:
            converged = True
    if not converged:
        log.info("calibration stopped after %d iterations at loss %.3g", it, loss)

    t_np = rig.translations.copy()
    q_np = rig.rotations.copy()
    t_np[leaves] = trans.numpy()
    q_np[leaves] = leaf_q
    fitted = replace(rig, translations=t_np, rotations=q_np)

    with torch.no_grad():
        pose = model.pose(trans, base_rot, omega)
        deformed = model.deform(pose).numpy()
    skeleton_lv = float(vertex_loss(deformed, target.vertices))
    residual = _residual_blendshape(model, pose, deformed, target.vertices, mask)
    pose_np = forward_kinematics(fitted)
    final = lbs_deform(neutral.vertices + residual, binding, pose_np)
    lv = float(vertex_loss(final, target.vertices))
    ls = float(overlap_loss(pose_np[:, :3, 3], final, overlap))
    return CalibrationResult(
        rig=fitted,
        residual=residual,
        loss_v=lv,
        loss_s=ls,
        loss_total=lv + ls,
        skeleton_loss_v=skeleton_lv,
        initial_loss_v=initial_lv,
        iterations=it,
        converged=converged,
        trace=trace,
    )


# -- file formats ---------------------------------------------------------------


def read_rig(path) -> tuple[SkeletonRig, SkinBinding, OverlapMap]:
    """One document holding joints, sparse skin weights and the overlap table.

    ``skin.rest`` (absolute bind transforms) is optional; when missing the
    rig's own FK at load time is the bind pose.
    """
    doc = io.read_json(path, "rigforge.rig")
    try:
        rig = SkeletonRig.from_nodes(doc["joints"])
        skin = doc["skin"]
        weights = np.zeros((int(skin["n_vertices"]), rig.n_joints))
        for vi, entries in enumerate(skin["weights"]):
            for name, w in entries:
                weights[vi, rig.index(name)] = w
        rest = np.array(skin["rest"], dtype=float).reshape(-1, 4, 4) if "rest" in skin else forward_kinematics(rig)
        if "rest" in skin and isinstance(skin.get("rest_names"), list):
            order = [skin["rest_names"].index(n) for n in rig.names]
            rest = rest[order]
        binding = SkinBinding(weights, rest)
        overlap = OverlapMap(
            [rig.index(e["joint"]) for e in doc.get("overlap", [])],
            [int(e["vertex"]) for e in doc.get("overlap", [])],
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed rig document ({exc!r})") from exc
    return rig, binding, overlap


def rig_document(rig: SkeletonRig, binding: SkinBinding, overlap: OverlapMap) -> dict:
    weights = []
    for row in binding.weights:
        nz = np.flatnonzero(row)
        weights.append([[rig.names[j], float(row[j])] for j in nz])
    return {
        "schema": "rigforge.rig/1",
        "joints": joints_document(rig),
        "skin": {
            "n_vertices": len(binding.weights),
            "weights": weights,
            "rest_names": list(rig.names),
            "rest": binding.rest.tolist(),
        },
        "overlap": [{"joint": rig.names[j], "vertex": int(v)} for j, v in zip(overlap.joints, overlap.vertices)],
    }


def joints_document(rig: SkeletonRig) -> list[dict]:
    return [
        {
            "name": name,
            "parent": None if p < 0 else rig.names[p],
            "translation": rig.translations[j].tolist(),
            "rotation": rig.rotations[j].tolist(),
        }
        for j, (name, p) in enumerate(zip(rig.names, rig.parents))
    ]


def result_document(result: CalibrationResult, tol: float = 0.0) -> dict:
    nz = np.flatnonzero(np.abs(result.residual).max(1) > tol)
    return {
        "schema": "rigforge.calibration/1",
        "joints": joints_document(result.rig),
        "residual": [[int(i), *result.residual[i].tolist()] for i in nz],
        "losses": {
            "L_v": result.loss_v,
            "L_s": result.loss_s,
            "L_total": result.loss_total,
            "skeleton_L_v": result.skeleton_loss_v,
            "initial_L_v": result.initial_loss_v,
        },
        "iterations": result.iterations,
        "converged": result.converged,
        "trace": result.trace,
    }
