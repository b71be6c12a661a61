"""Motion graphs over captured gesture clips and Viterbi clip selection.

Nodes are clips; a directed edge (a, b) means b was observed following a.
Each edge costs ``lam1 * T_p + lam2 * T_r`` comparing a's last pose with b's
first pose. Given one audio embedding per window, ``viterbi_path`` picks the
clip sequence minimising embedding mismatch plus edge costs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, quat
from .errors import CompositionError, GraphError, InfeasiblePathError, SkeletonError, ValidationError

log = logging.getLogger(__name__)

ANGLE_TOL = 0.02  # rad, max per-joint deviation from the category's canonical pose
ROOT_TOL = 0.01


@dataclass(frozen=True)
class MotionSkeleton:
    names: tuple[str, ...]
    parents: np.ndarray
    offsets: np.ndarray  # (J, 3) rest offset from parent

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", np.asarray(self.parents, dtype=np.int64))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3))
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, len(self.parents))):
            raise SkeletonError("motion skeleton must be topologically ordered with the root first")

    @property
    def n_joints(self):
        return len(self.names)

    def positions(self, rotations) -> np.ndarray:
        """Root-relative joint positions for local rotations (..., J, 4)."""
        rot = np.asarray(rotations, dtype=np.float64)
        glob = np.empty_like(rot)
        pos = np.zeros(rot.shape[:-1] + (3,))
        for j, p in enumerate(self.parents):
            if p < 0:
                glob[..., j, :] = rot[..., j, :]
            else:
                glob[..., j, :] = quat.multiply(glob[..., p, :], rot[..., j, :])
                pos[..., j, :] = pos[..., p, :] + quat.rotate(glob[..., p, :], self.offsets[j])
        return pos


@dataclass(frozen=True)
class Pose:
    positions: np.ndarray  # (J, 3) root-relative
    rotations: np.ndarray  # (J, 4)


@dataclass
class MotionClip:
    id: str
    rotations: np.ndarray  # (F, J, 4) local joint rotations
    root: np.ndarray  # (F, 3) root translation
    embedding: np.ndarray  # (D,)
    category: int | None = None
    transition: tuple[int, int] | None = None

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root = np.asarray(self.root, dtype=np.float64).reshape(-1, 3)
        self.embedding = np.asarray(self.embedding, dtype=np.float64).ravel()
        if self.rotations.ndim != 3 or self.rotations.shape[2] != 4 or len(self.rotations) == 0:
            raise ValidationError(f"clip {self.id}: rotations must be (F>0, J, 4)")
        if len(self.root) != len(self.rotations):
            raise ValidationError(f"clip {self.id}: root track length differs from rotations")
        if (self.category is None) == (self.transition is None):
            raise ValidationError(f"clip {self.id}: give exactly one of category or transition")
        if self.transition is not None:
            self.transition = (int(self.transition[0]), int(self.transition[1]))

    @property
    def n_frames(self):
        return len(self.rotations)

    def pose(self, skeleton: MotionSkeleton, frame: int) -> Pose:
        rot = self.rotations[frame]
        return Pose(skeleton.positions(rot), rot)


@dataclass
class MotionLibrary:
    skeleton: MotionSkeleton
    clips: dict[str, MotionClip]
    fps: float
    adjacency: list[tuple[str, str]] = field(default_factory=list)
    canonical: dict[int, np.ndarray] = field(default_factory=dict)  # category -> (J, 4)

    @property
    def embedding_dim(self) -> int:
        return len(next(iter(self.clips.values())).embedding)

    def transitions(self, a: int, b: int) -> list[str]:
        return sorted(c.id for c in self.clips.values() if c.transition == (a, b))


def pose_costs(end: Pose, start: Pose) -> tuple[float, float]:
    """(T_p, T_r): summed squared position gaps and squared geodesic joint angles."""
    if end.positions.shape != start.positions.shape or end.rotations.shape != start.rotations.shape:
        raise SkeletonError("poses must cover the same joints")
    tp = float(((end.positions - start.positions) ** 2).sum())
    tr = float((quat.geodesic_angle(end.rotations, start.rotations) ** 2).sum())
    return tp, tr


def lint_library(library: MotionLibrary, angle_tol: float = ANGLE_TOL, root_tol: float = ROOT_TOL) -> list[str]:
    """Problems that make a library unusable, one line each; empty when clean."""
    issues = []
    dims = {len(c.embedding) for c in library.clips.values()}
    if len(dims) > 1:
        issues.append(f"mixed embedding dimensions {sorted(dims)}")
    j = library.skeleton.n_joints
    canon_root = {}
    for cat in sorted({c.category for c in library.clips.values() if c.category is not None}):
        members = sorted(cid for cid, c in library.clips.items() if c.category == cat)
        if cat not in library.canonical:
            library.canonical[cat] = library.clips[members[0]].rotations[0]
        canon_root[cat] = library.clips[members[0]].root[0]
    for cid in sorted(library.clips):
        clip = library.clips[cid]
        if clip.rotations.shape[1] != j:
            issues.append(f"{cid}: {clip.rotations.shape[1]} joints, skeleton has {j}")
            continue
        if clip.category is None:
            continue
        canon = library.canonical[clip.category]
        for label, frame in (("start", 0), ("end", -1)):
            ang = quat.geodesic_angle(clip.rotations[frame], canon).max()
            off = np.linalg.norm(clip.root[frame] - canon_root[clip.category])
            if ang > angle_tol:
                issues.append(f"{cid}: {label} pose {ang:.4f} rad from category {clip.category} canonical pose")
            if off > root_tol:
                issues.append(f"{cid}: {label} root {off:.4f} from category {clip.category} canonical root")
    return issues


@dataclass
class MotionGraph:
    ids: list[str]  # node order; sorted so index order is id order
    categories: list[int | None]
    src: np.ndarray  # edge arrays
    dst: np.ndarray
    weight: np.ndarray
    embeddings: np.ndarray  # (nodes, D)
    lam1: float
    lam2: float

    def index(self, clip_id: str) -> int:
        try:
            return self.ids.index(clip_id)
        except ValueError:
            raise GraphError(f"unknown clip {clip_id!r}") from None

    def edge_weight(self, a: str, b: str) -> float | None:
        ia, ib = self.index(a), self.index(b)
        hit = np.flatnonzero((self.src == ia) & (self.dst == ib))
        return float(self.weight[hit[0]]) if len(hit) else None


def _legal(a: MotionClip, b: MotionClip) -> bool:
    if a.category is not None and b.category is not None:
        return a.category == b.category
    if a.transition is not None and b.category is not None:
        return a.transition[1] == b.category
    if a.category is not None and b.transition is not None:
        return b.transition[0] == a.category
    return a.transition[1] == b.transition[0]


def build_graph(library: MotionLibrary, adjacency=None, lam1: float = 1.0, lam2: float = 1.0) -> MotionGraph:
    """One weighted edge per observed continuation pair (duplicates collapse)."""
    if lam1 < 0 or lam2 < 0:
        raise ValidationError("edge-cost weights must be non-negative")
    pairs = library.adjacency if adjacency is None else adjacency
    ids = sorted(library.clips)
    index = {cid: i for i, cid in enumerate(ids)}
    seen, src, dst, w = set(), [], [], []
    skel = library.skeleton
    for a, b in pairs:
        if a not in index or b not in index:
            raise GraphError(f"adjacency references unknown clip in ({a!r}, {b!r})")
        if (a, b) in seen:
            continue
        ca, cb = library.clips[a], library.clips[b]
        if not _legal(ca, cb):
            raise GraphError(f"edge {a}->{b} joins incompatible categories")
        seen.add((a, b))
        tp, tr = pose_costs(ca.pose(skel, -1), cb.pose(skel, 0))
        src.append(index[a])
        dst.append(index[b])
        w.append(lam1 * tp + lam2 * tr)
    order = np.lexsort((np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)))
    emb = np.stack([library.clips[c].embedding for c in ids])
    return MotionGraph(
        ids=ids,
        categories=[library.clips[c].category for c in ids],
        src=np.array(src, dtype=np.int64)[order],
        dst=np.array(dst, dtype=np.int64)[order],
        weight=np.array(w, dtype=np.float64)[order],
        embeddings=emb,
        lam1=lam1,
        lam2=lam2,
    )


def emission_costs(audio, node_embeddings, metric: str = "sqeuclidean") -> np.ndarray:
    """(n, nodes) matrix of C_a between each audio window and each clip embedding."""
    a = np.asarray(audio, dtype=np.float64)
    e = np.asarray(node_embeddings, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != e.shape[1]:
        raise ValidationError(f"audio embeddings {a.shape} do not match clip embedding dim {e.shape[1]}")
    if metric == "sqeuclidean":
        return ((a[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1, keepdims=True)
        ne = np.linalg.norm(e, axis=1, keepdims=True)
        return 1.0 - (a / np.where(na > 0, na, 1)) @ (e / np.where(ne > 0, ne, 1)).T
    raise ValidationError(f"unknown embedding metric {metric!r}")


@dataclass
class ViterbiResult:
    path: list[str]
    cost: float
    emission: list[float]  # C_a per step
    transition: list[float]  # T per step boundary (n - 1 entries)
    relaxations: int  # edge relaxations performed, n-1 times the edge count


def viterbi_path(graph: MotionGraph, audio, category: int | None, metric: str = "sqeuclidean") -> ViterbiResult:
    """Minimum-cost clip sequence within one category, one clip per audio window.

    Dynamic programme over the category subgraph's edge list, so each step
    costs O(E). Ties go to the lowest clip id, both for the final node and at
    every backtrack step.
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 2 or len(audio) == 0:
        raise ValidationError("need at least one audio embedding window")
    nodes = np.flatnonzero([c == category for c in graph.categories])
    if len(nodes) == 0:
        raise GraphError(f"category {category} has no clips")
    keep = np.isin(graph.src, nodes) & np.isin(graph.dst, nodes)
    src, dst, w = graph.src[keep], graph.dst[keep], graph.weight[keep]  # sorted by (dst, src)
    emit = np.full((len(audio), len(graph.ids)), np.inf)
    emit[:, nodes] = emission_costs(audio, graph.embeddings[nodes], metric)

    n, n_nodes = len(audio), len(graph.ids)
    back = np.full((n, n_nodes), -1, dtype=np.int64)
    cost = emit[0].copy()
    relax = 0
    if len(dst):
        starts = np.flatnonzero(np.r_[True, dst[1:] != dst[:-1]])
        targets = dst[starts]
    for t in range(1, n):
        new = np.full(n_nodes, np.inf)
        if len(dst):
            cand = cost[src] + w
            relax += len(cand)
            best = np.minimum.reduceat(cand, starts)
            # first edge in each (dst, src)-sorted group hitting the minimum = lowest predecessor id
            hit = np.flatnonzero((cand == best[np.searchsorted(starts, np.arange(len(cand)), "right") - 1]) & np.isfinite(cand))
            grp = np.searchsorted(starts, hit, "right") - 1
            first = hit[np.r_[True, grp[1:] != grp[:-1]]] if len(hit) else hit
            gsel = np.searchsorted(starts, first, "right") - 1
            new[targets[gsel]] = best[gsel]
            back[t, targets[gsel]] = src[first]
        cost = new + emit[t]
        if not np.isfinite(cost).any():
            raise InfeasiblePathError(t, f"no clip in category {category} can follow step {t - 1} (step {t} of {n})")
    last = int(np.argmin(cost))
    total = float(cost[last])
    path = [last]
    for t in range(n - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()
    ids = [graph.ids[i] for i in path]
    emission = [float(emit[t, i]) for t, i in enumerate(path)]
    trans = [graph.edge_weight(a, b) for a, b in zip(ids, ids[1:])]
    return ViterbiResult(ids, total, emission, trans, relax)


def path_cost(graph: MotionGraph, audio, path, metric: str = "sqeuclidean") -> float:
    """Total cost of a given clip sequence; inf if it uses a missing edge."""
    idx = [graph.index(p) for p in path]
    emit = emission_costs(np.asarray(audio)[: len(idx)], graph.embeddings[idx], metric)
    total = float(np.trace(emit))
    for a, b in zip(path, path[1:]):
        w = graph.edge_weight(a, b)
        if w is None:
            return float("inf")
        total += w
    return total


@dataclass
class MotionTrack:
    rotations: np.ndarray  # (F, J, 4)
    root: np.ndarray  # (F, 3)
    fps: float
    segments: list[tuple[str, int, int]]  # (clip id, first frame, frame count)

    @property
    def n_frames(self):
        return len(self.rotations)

    @property
    def duration(self):
        return self.n_frames / self.fps


def compose_track(library: MotionLibrary, path, graph: MotionGraph | None = None, seed: int = 0) -> MotionTrack:
    """Concatenate clip frames along ``path``.

    Consecutive clips of one category must share a graph edge (when a graph
    is given). Where the category changes, a transition clip for that
    (from, to) pair is drawn with the seeded generator and spliced in.
    """
    if len(path) == 0:
        raise CompositionError("empty clip path")
    rng = np.random.default_rng(seed)
    seq = []
    for i, cid in enumerate(path):
        if cid not in library.clips:
            raise CompositionError(f"unknown clip {cid!r}")
        if i:
            prev = library.clips[path[i - 1]]
            cur = library.clips[cid]
            if prev.category is not None and cur.category is not None and prev.category != cur.category:
                options = library.transitions(prev.category, cur.category)
                if not options:
                    raise CompositionError(f"no transition clip for {prev.category}->{cur.category}")
                seq.append(options[int(rng.integers(len(options)))])
            elif graph is not None and graph.edge_weight(path[i - 1], cid) is None:
                raise CompositionError(f"no edge {path[i - 1]}->{cid}")
        seq.append(cid)
    rots, roots, segments, start = [], [], [], 0
    for cid in seq:
        clip = library.clips[cid]
        rots.append(clip.rotations)
        roots.append(clip.root)
        segments.append((cid, start, clip.n_frames))
        start += clip.n_frames
    return MotionTrack(np.concatenate(rots), np.concatenate(roots), library.fps, segments)


def junction_jumps(track: MotionTrack) -> list[float]:
    """Max per-joint rotation jump (rad) across each clip junction."""
    out = []
    for _, first, _ in track.segments[1:]:
        out.append(float(quat.geodesic_angle(track.rotations[first - 1], track.rotations[first]).max()))
    return out


def plan_segments(n_windows: int, categories, seed: int = 0, min_len: int = 4, max_len: int = 8, start=None):
    """Random category schedule for long audio: [(category, windows), ...]."""
    rng = np.random.default_rng(seed)
    cats = sorted(categories)
    cur = cats[int(rng.integers(len(cats)))] if start is None else start
    out, left = [], n_windows
    while left > 0:
        k = min(left, int(rng.integers(min_len, max_len + 1)))
        out.append((cur, k))
        left -= k
        others = [c for c in cats if c != cur]
        if others:
            cur = others[int(rng.integers(len(others)))]
    return out


@dataclass
class ComposeResult:
    track: MotionTrack
    path: list[str]
    cost: float
    steps: list[dict]


def compose_from_audio(library, graph, audio, segments, seed: int = 0, metric: str = "sqeuclidean") -> ComposeResult:
    """Run Viterbi per (category, windows) segment and splice the result.

    ``steps`` lists, for every audio window, the chosen clip, its C_a term,
    and the edge cost from the previous window's clip (zero at segment
    starts, where a transition clip is inserted instead).
    """
    audio = np.asarray(audio, dtype=np.float64)
    if sum(k for _, k in segments) != len(audio):
        raise ValidationError("segment lengths must add up to the number of audio windows")
    path, steps, total, at = [], [], 0.0, 0
    for category, k in segments:
        try:
            res = viterbi_path(graph, audio[at:at + k], category, metric)
        except InfeasiblePathError as exc:
            raise InfeasiblePathError(at + exc.step, f"no feasible path at audio window {at + exc.step}") from exc
        for i, cid in enumerate(res.path):
            steps.append({
                "window": at + i,
                "clip": cid,
                "category": category,
                "audio_cost": res.emission[i],
                "edge_cost": res.transition[i - 1] if i else 0.0,
            })
        total += res.cost
        path += res.path
        at += k
    track = compose_track(library, path, graph, seed)
    return ComposeResult(track, path, total, steps)


# -- file formats ---------------------------------------------------------------


def read_library(path) -> MotionLibrary:
    """Clip library JSON.

    Clip frames are inline (``rotations`` F x J x 4, ``root`` F x 3) or in a
    binary block ``frames_file``: little-endian float32 rows of
    ``[root xyz, q_0 wxyz, ..., q_{J-1} wxyz]``.
    """
    path = Path(path)
    doc = io.read_json(path, "rigforge.clip-library")
    try:
        sk = doc["skeleton"]["joints"]
        names = [j["name"] for j in sk]
        parents = [-1 if j.get("parent") is None else names.index(j["parent"]) for j in sk]
        skeleton = MotionSkeleton(names, parents, [j["offset"] for j in sk])
        nj = len(names)
        clips = {}
        for c in doc["clips"]:
            if "frames_file" in c:
                raw = np.fromfile(path.parent / c["frames_file"], dtype="<f4").astype(np.float64)
                raw = raw.reshape(-1, 3 + 4 * nj)
                root, rot = raw[:, :3], raw[:, 3:].reshape(-1, nj, 4)
            else:
                root, rot = np.array(c["root"]), np.array(c["rotations"])
            clips[c["id"]] = MotionClip(
                c["id"], quat.normalize(rot), root, c["embedding"],
                category=c.get("category"),
                transition=tuple(c["transition"]) if c.get("transition") else None,
            )
        canonical = {int(k): quat.normalize(np.array(v)) for k, v in doc.get("canonical", {}).items()}
        lib = MotionLibrary(skeleton, clips, float(doc["fps"]), [tuple(p) for p in doc.get("adjacency", [])], canonical)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: malformed clip library ({exc!r})") from exc
    dims = {len(c.embedding) for c in clips.values()}
    if "embedding_dim" in doc and dims != {int(doc["embedding_dim"])}:
        raise ValidationError(f"{path}: clip embeddings do not all have dimension {doc['embedding_dim']}")
    return lib


def library_document(lib: MotionLibrary) -> dict:
    sk = lib.skeleton
    return {
        "schema": "rigforge.clip-library/1",
        "fps": lib.fps,
        "embedding_dim": lib.embedding_dim,
        "skeleton": {"joints": [
            {"name": n, "parent": None if p < 0 else sk.names[p], "offset": sk.offsets[j].tolist()}
            for j, (n, p) in enumerate(zip(sk.names, sk.parents))
        ]},
        "canonical": {str(k): v.tolist() for k, v in sorted(lib.canonical.items())},
        "clips": [
            {
                "id": c.id,
                **({"category": c.category} if c.category is not None else {"transition": list(c.transition)}),
                "embedding": c.embedding.tolist(),
                "root": c.root.tolist(),
                "rotations": c.rotations.tolist(),
            }
            for c in (lib.clips[k] for k in sorted(lib.clips))
        ],
        "adjacency": [list(p) for p in lib.adjacency],
    }


def track_document(track: MotionTrack, skeleton: MotionSkeleton) -> dict:
    return {
        "schema": "rigforge.motion-track/1",
        "fps": track.fps,
        "joints": list(skeleton.names),
        "segments": [{"clip": c, "start": s, "frames": n} for c, s, n in track.segments],
        "root": track.root.tolist(),
        "rotations": track.rotations.tolist(),
    }


def track_bvh(track: MotionTrack, skeleton: MotionSkeleton) -> str:
    """BVH text: root has position + ZYX rotation channels, other joints ZYX rotations."""
    from scipy.spatial.transform import Rotation

    children = {j: [] for j in range(skeleton.n_joints)}
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            children[int(p)].append(j)
    lines = ["HIERARCHY"]

    def emit(j, depth):
        pad = "  " * depth
        kind = "ROOT" if depth == 0 else "JOINT"
        off = skeleton.offsets[j]
        lines.append(f"{pad}{kind} {skeleton.names[j]}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}  OFFSET {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}")
        chans = "CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation" if depth == 0 \
            else "CHANNELS 3 Zrotation Yrotation Xrotation"
        lines.append(f"{pad}  {chans}")
        if children[j]:
            for c in children[j]:
                emit(c, depth + 1)
        else:
            lines.append(f"{pad}  End Site")
            lines.append(f"{pad}  {{")
            lines.append(f"{pad}    OFFSET 0.000000 0.000000 0.000000")
            lines.append(f"{pad}  }}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    order = []

    def walk(j):
        order.append(j)
        for c in children[j]:
            walk(c)

    walk(0)
    q = track.rotations[:, order, :]
    xyzw = np.concatenate([q[..., 1:], q[..., :1]], -1).reshape(-1, 4)
    euler = Rotation.from_quat(xyzw).as_euler("ZYX", degrees=True).reshape(len(q), len(order) * 3) + 0.0
    lines += ["MOTION", f"Frames: {track.n_frames}", f"Frame Time: {1.0 / track.fps:.6f}"]
    for f in range(track.n_frames):
        vals = np.concatenate([track.root[f], euler[f]]) + 0.0
        lines.append(" ".join(f"{x:.6f}" for x in vals))
    return "\n".join(lines) + "\n"


def write_library(path, lib: MotionLibrary, binary: bool = False) -> None:
    """Write a library document; with ``binary`` each clip's frames go to ``<id>.f32`` beside it."""
    path = Path(path)
    doc = library_document(lib)
    if binary:
        for c in doc["clips"]:
            clip = lib.clips[c["id"]]
            rows = np.concatenate([clip.root, clip.rotations.reshape(clip.n_frames, -1)], 1)
            name = f"{path.stem}_frames/{clip.id}.f32"
            (path.parent / name).parent.mkdir(parents=True, exist_ok=True)
            rows.astype("<f4").tofile(path.parent / name)
            del c["root"], c["rotations"]
            c["frames_file"] = name
    io.write_json(path, doc)
