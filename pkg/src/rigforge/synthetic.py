"""Seeded synthetic data standing in for captured assets.

Every generator takes an explicit seed and is deterministic given it.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import quat
from .mesh import Mesh, make_region_mask
from .skeleton import OverlapMap, SkeletonRig, SkinBinding, forward_kinematics, lbs_deform


def grid_mesh(n: int = 25, size: float = 2.0, height=None) -> Mesh:
    """Regular n x n triangulated grid over [-size/2, size/2]^2.

    ``height`` maps (x, y) arrays to z; defaults to a flat plane.
    """
    xs = np.linspace(-size / 2, size / 2, n)
    x, y = np.meshgrid(xs, xs, indexing="xy")
    z = np.zeros_like(x) if height is None else height(x, y)
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], 1)
    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return Mesh(verts, faces)


def dome(x, y):
    return 0.3 * (1 - 0.5 * (x**2 + y**2))


def face_patch(n: int = 25) -> Mesh:
    return grid_mesh(n, 2.0, dome)


def random_quat(rng, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return quat.from_axis_angle(axis * rng.uniform(0, max_angle))


def face_rig(mesh: Mesh, n_leaves: int = 8, seed: int = 0, sigma: float = 0.3):
    """A small face-like rig bound to ``mesh``.

    Root below the surface, a spine of three joints, three branch joints, and
    ``n_leaves`` leaves sitting exactly on mesh vertices (the overlap set).
    Each leaf's vertex is bound to that leaf alone so it rides with the joint.
    Returns (rig, binding, overlap).
    """
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    names = ["root", "spine0", "spine1", "branch_l", "branch_r", "branch_c"]
    parents = [-1, 0, 1, 2, 2, 2]
    anchors = np.array([
        [0.0, -0.6, -0.6], [0.0, -0.3, -0.4], [0.0, 0.0, -0.3],
        [-0.5, 0.1, -0.1], [0.5, 0.1, -0.1], [0.0, 0.5, -0.1],
    ])
    # leaves spread over the interior, each on a vertex
    interior = np.flatnonzero((np.abs(v[:, 0]) < 0.8) & (np.abs(v[:, 1]) < 0.8))
    chosen = []
    for _ in range(n_leaves):
        if not chosen:
            k = interior[rng.integers(len(interior))]
        else:
            d = np.min(np.linalg.norm(v[interior, None, :2] - v[chosen][None, :, :2], axis=2), axis=1)
            k = interior[int(np.argmax(d + 1e-3 * rng.random(len(d))))]
        chosen.append(int(k))
    for i, k in enumerate(chosen):
        names.append(f"leaf{i}")
        branch = 3 + int(np.argmin(np.linalg.norm(anchors[3:6, :2] - v[k, :2], axis=1)))
        parents.append(branch)
    n = len(names)
    abs_rot = np.zeros((n, 4))
    abs_pos = np.zeros((n, 3))
    abs_pos[:6] = anchors
    abs_pos[6:] = v[chosen]
    for j in range(n):
        abs_rot[j] = random_quat(rng, 0.4)
    # convert absolute placement to locals
    local_t = np.zeros((n, 3))
    local_q = np.zeros((n, 4))
    for j, p in enumerate(parents):
        if p < 0:
            local_t[j], local_q[j] = abs_pos[j], abs_rot[j]
        else:
            pinv = quat.invert_rigid(quat.rigid(abs_rot[p], abs_pos[p]))
            local = pinv @ quat.rigid(abs_rot[j], abs_pos[j])
            local_t[j] = local[:3, 3]
            local_q[j] = quat.normalize(quat.multiply(
                np.array([abs_rot[p][0], *-abs_rot[p][1:]]), abs_rot[j]))
    rig = SkeletonRig(tuple(names), np.array(parents), local_t, quat.normalize(local_q))
    rest = forward_kinematics(rig)
    pos = rest[:, :3, 3]

    d2 = ((v[:, None, :] - pos[None, 1:, :]) ** 2).sum(-1)
    w = np.exp(-d2 / (2 * sigma**2))
    w[:, 5:] *= 3.0  # leaves dominate their neighbourhood
    keep = np.argsort(-w, axis=1)[:, :4]
    sparse = np.zeros_like(w)
    np.put_along_axis(sparse, keep, np.take_along_axis(w, keep, 1), 1)
    weights = np.zeros((len(v), n))
    weights[:, 1:] = sparse / sparse.sum(1, keepdims=True)
    for i, k in enumerate(chosen):
        weights[k] = 0.0
        weights[k, 6 + i] = 1.0
    binding = SkinBinding(weights, rest)
    overlap = OverlapMap(np.arange(6, n), np.array(chosen))
    return rig, binding, overlap


def perturb_leaves(rig: SkeletonRig, seed: int = 0, max_offset: float = 0.05, n: int | None = None):
    """Displace leaf local translations by at most ``max_offset``; returns (rig, displaced leaf ids)."""
    rng = np.random.default_rng(seed)
    leaves = rig.leaves()
    pick = leaves if n is None else np.sort(rng.choice(leaves, size=n, replace=False))
    t = rig.translations.copy()
    for j in pick:
        d = rng.normal(size=3)
        t[j] += d / np.linalg.norm(d) * rng.uniform(0.3, 1.0) * max_offset
    return replace(rig, translations=t), pick


def calibration_fixture(seed: int = 0, n: int = 25, n_leaves: int = 8, n_moved: int = 5, bump: float = 0.0):
    """Neutral mesh, rig, and a target skinned from leaf-perturbed joints (plus optional bump)."""
    neutral = face_patch(n)
    rig, binding, overlap = face_rig(neutral, n_leaves=n_leaves, seed=seed)
    moved, picked = perturb_leaves(rig, seed=seed + 1, n=n_moved)
    target = lbs_deform(neutral.vertices, binding, forward_kinematics(moved))
    if bump:
        v = neutral.vertices
        target = target + bump * np.exp(-((v[:, 0] - 0.2) ** 2 + (v[:, 1] + 0.3) ** 2) / 0.02)[:, None] * np.array([0, 0, 1.0])
    return neutral, neutral.with_vertices(target), rig, binding, overlap, moved, picked


def detail_fixture(n: int = 41, seed: int = 0, offset: float = 0.02, wrinkle: float = 0.004):
    """Bump fixture for detail transfer.

    Returns (initial mesh, detail mesh in a rotated frame, landmark ids, face
    vertex ids, the transform that maps detail back). The detail mesh equals
    the initial surface plus an offset and fine wrinkles inside the face disc,
    so transferring it leaves a step along the seam.
    """
    rng = np.random.default_rng(seed)
    initial = grid_mesh(n, 2.0, dome)
    v = initial.vertices
    r = np.hypot(v[:, 0], v[:, 1])
    face = np.flatnonzero(r < 0.6)
    extra = offset + wrinkle * np.sin(25 * v[:, 0]) * np.cos(19 * v[:, 1])
    detailed = v.copy()
    detailed[:, 2] += extra
    # the detail mesh is only trustworthy on the face; elsewhere it drifts
    detailed[r >= 0.6, 2] += 0.05 * (r[r >= 0.6] - 0.6)
    landmark_pos = [(0, 0), (-0.3, 0.2), (0.3, 0.2), (-0.2, -0.3), (0.2, -0.3), (0, 0.4), (0, -0.45)]
    landmarks = [int(np.argmin(np.hypot(v[:, 0] - x, v[:, 1] - y))) for x, y in landmark_pos]
    rot = quat.to_matrix(random_quat(rng, 0.8))
    shift = rng.normal(size=3)
    detail = initial.with_vertices(detailed @ rot.T + shift)
    return initial, detail, landmarks, face, (rot, shift)


def detail_mask(initial: Mesh, face, rings: int = 3):
    return make_region_mask(initial, face, rings)


# -- speech-driven face ------------------------------------------------------------


def smooth_signals(rng, frames: int, dim: int, rate: float = 50.0) -> np.ndarray:
    """Band-limited random signals: a few sinusoids per channel, 0.5-4 Hz."""
    t = np.arange(frames)[:, None] / rate
    out = np.zeros((frames, dim))
    for _ in range(4):
        freq = rng.uniform(0.5, 4.0, dim)
        phase = rng.uniform(0, 2 * np.pi, dim)
        out += rng.normal(size=dim) * np.sin(2 * np.pi * freq * t + phase)
    return out / 2.0


def face_dataset(n_tracks: int = 40, frames: int = 200, feature_dim: int = 16, n_controls: int = 20,
                 seed: int = 0, rate: float = 50.0, scale: float = 0.06):
    """Feature/coefficient pairs from a fixed ground-truth linear map plus clamp.

    Returns (features, targets, (W, b)).
    """
    from .face import AudioFeatureTrack, RigCoefficientTrack

    rng = np.random.default_rng(seed)
    w = rng.normal(size=(feature_dim, n_controls)) * scale
    b = rng.uniform(0.35, 0.65, n_controls)
    feats, targets = [], []
    for _ in range(n_tracks):
        f = smooth_signals(rng, frames, feature_dim, rate)
        feats.append(AudioFeatureTrack(f, rate))
        targets.append(RigCoefficientTrack(np.clip(f @ w + b, 0.0, 1.0), rate))
    return feats, targets, (w, b)


# -- gesture clip library ----------------------------------------------------------


def motion_skeleton():
    from .motion import MotionSkeleton

    names = ["hips", "spine", "chest", "neck", "head",
             "l_shoulder", "l_arm", "l_forearm", "l_hand",
             "r_shoulder", "r_arm", "r_forearm", "r_hand",
             "l_upleg", "r_upleg"]
    parents = [-1, 0, 1, 2, 3, 2, 5, 6, 7, 2, 9, 10, 11, 0, 0]
    offsets = [[0, 0, 0], [0, 0.1, 0], [0, 0.15, 0], [0, 0.15, 0], [0, 0.1, 0],
               [0.05, 0.1, 0], [0.12, 0, 0], [0.25, 0, 0], [0.22, 0, 0],
               [-0.05, 0.1, 0], [-0.12, 0, 0], [-0.25, 0, 0], [-0.22, 0, 0],
               [0.1, -0.05, 0], [-0.1, -0.05, 0]]
    return MotionSkeleton(names, parents, offsets)


def _gesture(rng, canon, frames, amp=0.6):
    j = len(canon)
    t = np.linspace(0, 1, frames)[:, None]
    env = np.sin(np.pi * t) ** 2  # zero at both ends so clips start and end on the canonical pose
    axes = rng.normal(size=(j, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    wiggle = np.sin(2 * np.pi * rng.uniform(0.5, 2.0, j) * t + rng.uniform(0, 2 * np.pi, j))
    angle = amp * rng.uniform(0.2, 1.0, j) * env * wiggle
    delta = quat.from_axis_angle(angle[..., None] * axes[None])
    return quat.normalize(quat.multiply(np.broadcast_to(canon, delta.shape), delta))


def _slerp(a, b, s):
    d = np.sum(a * b, -1, keepdims=True)
    b = np.where(d < 0, -b, b)
    d = np.abs(d).clip(max=1.0)
    theta = np.arccos(d)
    sin = np.sin(theta)
    small = sin < 1e-9
    wa = np.where(small, 1 - s, np.sin((1 - s) * theta) / np.where(small, 1, sin))
    wb = np.where(small, s, np.sin(s * theta) / np.where(small, 1, sin))
    return quat.normalize(wa * a + wb * b)


def clip_library(seed: int = 0, n_categories: int = 5, clips_per_category: int = 20, dim: int = 768,
                 fps: float = 30.0, pose_jitter: float = 0.005, emb_noise: float = 0.3):
    """Gesture library: per-category clips sharing a canonical start/end pose.

    Clip ends carry up to ``pose_jitter`` rad of per-joint noise (inside the
    lint tolerance) so edge costs are small but not all zero. Adjacency comes
    from simulated animator sequences plus a cycle per category. One or two
    transition clips per ordered category pair.
    """
    from .motion import MotionClip, MotionLibrary

    rng = np.random.default_rng(seed)
    skel = motion_skeleton()
    j = skel.n_joints
    root0 = np.array([0.0, 0.9, 0.0])
    canon = {c: quat.normalize(np.stack([random_quat(rng, 0.5) for _ in range(j)])) for c in range(1, n_categories + 1)}
    centres = {c: rng.normal(size=dim) for c in canon}
    clips = {}
    adjacency = []
    for c in canon:
        ids = []
        for k in range(clips_per_category):
            cid = f"c{c}_{k:03d}"
            frames = int(fps * rng.uniform(2.0, 3.0))
            rot = _gesture(rng, canon[c], frames)
            for f in (0, -1):
                rot[f] = quat.normalize(quat.multiply(rot[f], np.stack([random_quat(rng, pose_jitter) for _ in range(j)])))
            t = np.linspace(0, 1, frames)[:, None]
            root = root0 + 0.02 * np.sin(np.pi * t) ** 2 * rng.normal(size=3)
            emb = centres[c] + emb_noise * rng.normal(size=dim) * np.sqrt(1.0)
            clips[cid] = MotionClip(cid, rot, root, emb, category=c)
            ids.append(cid)
        perm = rng.permutation(len(ids))
        adjacency += [(ids[perm[i]], ids[perm[(i + 1) % len(ids)]]) for i in range(len(ids))]
        for _ in range(3):
            seq = rng.choice(len(ids), size=10)
            adjacency += [(ids[a], ids[b]) for a, b in zip(seq[:-1], seq[1:])]
    for a in canon:
        for b in canon:
            if a == b:
                continue
            for k in range(1 + int(rng.integers(2))):
                cid = f"t{a}{b}_{k}"
                frames = int(fps * rng.uniform(1.0, 1.5))
                s = (np.sin(np.linspace(0, np.pi / 2, frames)) ** 2)[:, None, None]
                rot = _slerp(canon[a][None], canon[b][None], s)
                clips[cid] = MotionClip(cid, rot, np.tile(root0, (frames, 1)), 0.5 * (centres[a] + centres[b]),
                                        transition=(a, b))
    # canonical end poses are the unjittered ones
    return MotionLibrary(skel, clips, fps, sorted(set(adjacency)), canon)


def audio_for_path(library, path, seed: int = 0, noise: float = 0.3) -> np.ndarray:
    """Audio embeddings near the embeddings of a known clip path."""
    rng = np.random.default_rng(seed)
    emb = np.stack([library.clips[c].embedding for c in path])
    return emb + noise * rng.normal(size=emb.shape)


def random_graph_problem(seed: int, max_nodes: int = 6, dim: int = 8, max_len: int = 5):
    """Small random single-category library plus audio for brute-force checks."""
    from .motion import MotionClip, MotionLibrary, MotionSkeleton

    rng = np.random.default_rng(seed)
    n_nodes = int(rng.integers(2, max_nodes + 1))
    n = int(rng.integers(1, max_len + 1))
    skel = MotionSkeleton(["root", "a", "b"], [-1, 0, 1], [[0, 0, 0], [0, 1, 0], [0, 1, 0]])
    clips = {}
    for k in range(n_nodes):
        frames = int(rng.integers(2, 5))
        rot = quat.normalize(np.stack([np.stack([random_quat(rng, 0.3) for _ in range(3)]) for _ in range(frames)]))
        clips[f"n{k}"] = MotionClip(f"n{k}", rot, np.zeros((frames, 3)), rng.normal(size=dim), category=1)
    ids = sorted(clips)
    adjacency = [(a, b) for a in ids for b in ids if rng.random() < 0.6]
    lib = MotionLibrary(skel, clips, 30.0, adjacency)
    audio = rng.normal(size=(n, dim))
    return lib, audio
