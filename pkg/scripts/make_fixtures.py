"""Regenerate the bundled fixture pack under ``fixtures/``.

Every generator is seeded; rerunning reproduces the same files byte for byte.

    python3 scripts/make_fixtures.py [--root fixtures]
"""

from __future__ import annotations

import argparse
import itertools
from pathlib import Path

import numpy as np

from rigforge import color, face, io, mesh, motion, skeleton, synthetic

SEED = 0


def transfer(root: Path) -> None:
    d = root / "transfer"
    d.mkdir(parents=True, exist_ok=True)
    initial, detail, landmarks, face_ids, _ = synthetic.detail_fixture(seed=SEED)
    mesh.write_obj(d / "initial.obj", initial, 12)
    mesh.write_obj(d / "detail.obj", detail, 12)
    mesh.write_landmarks(d / "landmarks.json", {"alignment": mesh.LandmarkSet(landmarks, "alignment-7")})
    io.write_json(d / "mask.json", {"schema": "rigforge.mask/1", "replaceable": [int(i) for i in face_ids], "rings": 3})
    io.write_json(d / "config.json", {
        "seed": SEED,
        "transfer": {"initial": "initial.obj", "detail": "detail.obj", "landmarks": "landmarks.json",
                     "mask": "mask.json", "smooth_iterations": 10, "smooth_lambda": 0.5},
    })

    # identity case: a flat plane transferred onto itself
    d = root / "transfer_identity"
    d.mkdir(parents=True, exist_ok=True)
    plane = synthetic.grid_mesh(21, 2.0)
    v = plane.vertices
    inside = np.flatnonzero(np.hypot(v[:, 0], v[:, 1]) < 0.4)
    lm = [int(np.argmin(np.hypot(v[:, 0] - x, v[:, 1] - y))) for x, y in
          [(0, 0), (-0.5, 0.5), (0.5, 0.5), (-0.5, -0.5), (0.5, -0.5), (0, 0.7), (0.7, 0)]]
    mesh.write_obj(d / "initial.obj", plane)
    mesh.write_obj(d / "detail.obj", plane)
    mesh.write_landmarks(d / "landmarks.json", {"alignment": mesh.LandmarkSet(lm, "alignment-7")})
    io.write_json(d / "mask.json", {"schema": "rigforge.mask/1", "replaceable": [int(i) for i in inside], "rings": 3})
    io.write_json(d / "config.json", {"initial": "initial.obj", "detail": "detail.obj", "landmarks": "landmarks.json",
                                      "mask": "mask.json", "seed": SEED})


def calibrate(root: Path) -> None:
    d = root / "calibrate"
    d.mkdir(parents=True, exist_ok=True)
    neutral, target, rig, binding, overlap, moved, picked = synthetic.calibration_fixture(seed=SEED)
    io.write_json(d / "rig.json", skeleton.rig_document(rig, binding, overlap))
    mesh.write_obj(d / "neutral.obj", neutral, 12)
    mesh.write_obj(d / "target.obj", target, 12)
    io.write_json(d / "expected.json", {
        "schema": "rigforge.calibration-expected/1",
        "moved_leaves": [rig.names[j] for j in picked],
        "translations": {rig.names[j]: moved.translations[j].tolist() for j in rig.leaves()},
    })
    io.write_json(d / "config.json", {"rig": "rig.json", "neutral": "neutral.obj", "target": "target.obj", "seed": SEED})
    io.write_json(d / "config_identity.json", {"rig": "rig.json", "neutral": "neutral.obj", "target": "neutral.obj",
                                               "seed": SEED})


def color_fixture(root: Path) -> None:
    d = root / "color"
    d.mkdir(parents=True, exist_ok=True)
    h = w = 32
    y, x = np.mgrid[0:h, 0:w] / (h - 1)
    img = np.stack([x, y, 0.5 * (1 - x) + 0.25 * y], -1)
    texture = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    color.write_png(d / "texture.png", texture)
    relit = np.clip(np.rint(np.clip(img * 0.7 + 0.2, 0, 1) * 255), 0, 255).astype(np.uint8)
    color.write_png(d / "relit.png", relit)
    pairs = color.generate_training_pairs(color.affine_oracle, n=2000, seed=SEED)
    color.write_pairs_csv(d / "pairs_affine.csv", pairs)
    io.write_json(d / "train.json", {"mode": "train", "preset": "gamma-matrix", "n_pairs": 10000, "seed": SEED})
    io.write_json(d / "correct.json", {"mode": "correct", "texture": "texture.png", "seed": SEED})
    io.write_json(d / "blend.json", {"mode": "blend", "original": "texture.png", "relit": "relit.png", "alpha": 0.7,
                                     "seed": SEED})


def compose(root: Path) -> None:
    d = root / "compose"
    d.mkdir(parents=True, exist_ok=True)
    lib = synthetic.clip_library(seed=SEED, clips_per_category=10, dim=128)
    motion.write_library(d / "library.json", lib, binary=True)
    rng = np.random.default_rng(SEED + 1)
    ids = sorted(c for c in lib.clips if lib.clips[c].category is not None)
    path = [ids[int(i)] for i in rng.integers(len(ids), size=24)]
    audio = synthetic.audio_for_path(lib, path, seed=SEED + 2)
    io.write_matrix(d / "audio.json", audio, "rigforge.audio-embedding/1", rate=2.0)
    io.write_json(d / "config.json", {"library": "library.json", "audio": "audio.json", "segments": "auto",
                                      "min_segment": 4, "max_segment": 8, "seed": SEED})

    # four-node single-category problem with its enumerated optimum
    d = root / "compose4"
    d.mkdir(parents=True, exist_ok=True)
    for s in itertools.count(100):
        small, audio = synthetic.random_graph_problem(s, max_nodes=4, dim=8, max_len=5)
        if len(small.clips) == 4 and len(audio) >= 3:
            break
    graph = motion.build_graph(small)
    emit = ((audio[:, None, :] - graph.embeddings[None]) ** 2).sum(-1)
    best, best_path = np.inf, None
    for p in itertools.product(range(4), repeat=len(audio)):
        edges = [graph.edge_weight(graph.ids[a], graph.ids[b]) for a, b in zip(p, p[1:])]
        if any(e is None for e in edges):
            continue
        total = sum(emit[t, i] for t, i in enumerate(p)) + sum(edges)
        if total < best:
            best, best_path = total, [graph.ids[i] for i in p]
    motion.write_library(d / "library.json", small)
    io.write_matrix(d / "audio.json", audio, "rigforge.audio-embedding/1", rate=2.0)
    io.write_json(d / "expected.json", {"schema": "rigforge.compose-expected/1", "generator_seed": s,
                                        "total": float(best), "path": best_path})
    io.write_json(d / "config.json", {"library": "library.json", "audio": "audio.json", "category": 1,
                                      "bvh": False, "seed": SEED})


def face_fixture(root: Path) -> None:
    d = root / "face"
    (d / "train").mkdir(parents=True, exist_ok=True)
    feats, targs, _ = synthetic.face_dataset(seed=SEED)
    for k, (f, t) in enumerate(zip(feats, targs)):
        face.write_feature_track(d / "train" / f"feat_{k:02d}.json", f, "f32le")
        face.write_coefficient_track(d / "train" / f"targ_{k:02d}.json", t, "f32le")
    # an unseen track from the same linear map, for driving
    rng = np.random.default_rng(SEED + 7)
    w, b = _face_map(SEED)
    f = synthetic.smooth_signals(rng, 250, w.shape[0])
    face.write_feature_track(d / "drive_features.json", face.AudioFeatureTrack(f))
    face.write_coefficient_track(d / "drive_targets.json", face.RigCoefficientTrack(np.clip(f @ w + b, 0, 1)))
    n = w.shape[1]
    tpl = [
        face.InterjectionTemplate("laugh", np.tile(np.linspace(0.2, 0.9, n), (40, 1)), 0.2, 0.2),
        face.InterjectionTemplate("sigh", np.full((30, n), 0.3), 0.1, 0.1),
    ]
    face.write_templates(d / "templates.json", tpl)
    io.write_json(d / "events.json", {"schema": "rigforge.events/1",
                                      "events": [["laugh", 1.0], ["sigh", 2.5], ["gasp", 3.0]]})
    io.write_json(d / "train.json", {"mode": "train", "features": "train/feat_*.json",
                                     "targets": "train/targ_*.json", "seed": SEED})
    io.write_json(d / "drive.json", {"mode": "drive", "features": "drive_features.json",
                                     "targets": "drive_targets.json", "events": "events.json",
                                     "templates": "templates.json", "seed": SEED})


def _face_map(seed: int):
    _, _, (w, b) = synthetic.face_dataset(n_tracks=0, seed=seed)
    return w, b


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", type=Path, default=Path(__file__).resolve().parent.parent / "fixtures")
    args = ap.parse_args()
    for fn in (transfer, calibrate, color_fixture, compose, face_fixture):
        fn(args.root)
        print(f"wrote {fn.__name__} fixtures under {args.root}")


if __name__ == "__main__":
    main()
