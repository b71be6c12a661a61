from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigforge import io, quat, synthetic
from rigforge import skeleton as S
from rigforge.errors import BindingError, MapError, SkeletonError, TopologyError, ValidationError

from oracles import central_fd, fk_recursive, lbs_loop

Z90 = quat.from_axis_angle([0, 0, np.pi / 2])


def chain(t0, t1, q0=(1, 0, 0, 0)):
    return S.SkeletonRig(["a", "b"], [-1, 0], [t0, t1], [q0, (1, 0, 0, 0)])


def random_rig(seed, n=8):
    rng = np.random.default_rng(seed)
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, n)]
    rots = np.stack([synthetic.random_quat(rng, 1.5) for _ in range(n)])
    return S.SkeletonRig([f"j{k}" for k in range(n)], parents, rng.normal(size=(n, 3)), rots)


# -- rig and FK --------------------------------------------------------------------

def test_rig_validation():
    with pytest.raises(TopologyError):
        S.SkeletonRig(["a", "b"], [-1, 1], np.zeros((2, 3)), [[1, 0, 0, 0]] * 2)
    with pytest.raises(ValidationError):
        S.SkeletonRig(["a"], [-1], np.zeros((1, 3)), [[1.1, 0, 0, 0]])
    with pytest.raises(TopologyError):
        S.SkeletonRig.from_nodes([
            {"name": "r", "parent": None}, {"name": "a", "parent": "b"}, {"name": "b", "parent": "a"}])
    with pytest.raises(TopologyError):
        S.SkeletonRig.from_nodes([{"name": "r", "parent": None}, {"name": "a", "parent": "ghost"}])


def test_from_nodes_sorts_topologically():
    rig = S.SkeletonRig.from_nodes([
        {"name": "tip", "parent": "mid", "translation": [1, 0, 0]},
        {"name": "mid", "parent": "root", "translation": [1, 0, 0]},
        {"name": "root", "parent": None},
    ])
    assert rig.names == ("root", "mid", "tip")
    assert rig.leaves().tolist() == [2]


def test_fk_identity_locals():
    rig = S.SkeletonRig(["a", "b", "c"], [-1, 0, 1], np.zeros((3, 3)), [[1, 0, 0, 0]] * 3)
    assert np.array_equal(S.forward_kinematics(rig), np.tile(np.eye(4), (3, 1, 1)))


def test_fk_hand_computed_chains():
    assert np.allclose(S.forward_kinematics(chain([1, 0, 0], [1, 0, 0]))[1, :3, 3], [2, 0, 0])
    pos = S.forward_kinematics(chain([0, 0, 0], [1, 0, 0], Z90))[1, :3, 3]
    np.testing.assert_allclose(pos, [0, 1, 0], atol=1e-15)


@given(st.lists(st.tuples(*[st.floats(-5, 5)] * 3), min_size=1, max_size=10))
def test_fk_identity_rotation_chain_sums_translations(ts):
    n = len(ts)
    rig = S.SkeletonRig([str(k) for k in range(n)], list(range(-1, n - 1)), ts, [[1, 0, 0, 0]] * n)
    np.testing.assert_allclose(S.forward_kinematics(rig)[-1, :3, 3], np.sum(ts, 0), atol=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_fk_matches_recursive_oracle(seed):
    rig = random_rig(seed)
    ref = fk_recursive(rig.parents, rig.translations, rig.rotations)
    np.testing.assert_allclose(S.forward_kinematics(rig), ref, atol=1e-12)


# -- skinning -------------------------------------------------------------------------

def test_lbs_bind_pose_is_identity():
    neutral, _, rig, binding, *_ = synthetic.calibration_fixture()
    out = S.lbs_deform(neutral.vertices, binding, S.forward_kinematics(rig))
    np.testing.assert_allclose(out, neutral.vertices, atol=1e-14)


def test_lbs_rigid_translation():
    rest = np.eye(4)[None]
    pose = np.eye(4)[None].copy()
    pose[0, :3, 3] = [0, 0, 5]
    v = np.random.default_rng(0).normal(size=(10, 3))
    out = S.lbs_deform(v, S.SkinBinding(np.ones((10, 1)), rest), pose)
    np.testing.assert_allclose(out - v, np.tile([0, 0, 5.0], (10, 1)), atol=1e-14)


def test_lbs_half_half_blend():
    rest = np.tile(np.eye(4), (2, 1, 1))
    pose = rest.copy()
    pose[0, :3, 3] = [2, 0, 0]
    out = S.lbs_deform([[0.3, 0.4, 0.5]], S.SkinBinding([[0.5, 0.5]], rest), pose)
    np.testing.assert_allclose(out[0] - [0.3, 0.4, 0.5], [1, 0, 0], atol=1e-15)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20)
def test_lbs_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    rig = random_rig(seed, 5)
    rest = S.forward_kinematics(rig)
    moved = replace(rig, rotations=np.stack([synthetic.random_quat(rng, 1.0) for _ in range(5)]))
    w = rng.random((12, 5)) * (rng.random((12, 5)) < 0.6)
    w[:, 0] += 0.01
    w /= w.sum(1, keepdims=True)
    v = rng.normal(size=(12, 3))
    pose = S.forward_kinematics(moved)
    np.testing.assert_allclose(S.lbs_deform(v, S.SkinBinding(w, rest), pose), lbs_loop(v, w, pose, rest), atol=1e-12)


def test_binding_validation():
    rest = np.tile(np.eye(4), (2, 1, 1))
    with pytest.raises(BindingError):
        S.SkinBinding([[0.0, 0.0]], rest)
    with pytest.raises(BindingError):
        S.SkinBinding([[1.5, -0.5]], rest)
    with pytest.raises(BindingError):
        S.SkinBinding([[0.5, 0.4]], rest)


# -- losses ---------------------------------------------------------------------------

def test_vertex_loss_examples():
    a = np.zeros((4, 3))
    assert S.vertex_loss(a, a) == 0
    b = a.copy()
    b[2] = [3, 4, 0]
    assert S.vertex_loss(b, a) == 25.0
    d = np.array([0.1, -0.2, 0.3])
    assert np.isclose(S.vertex_loss(a + d, a), 4 * (d @ d), rtol=1e-14)
    with pytest.raises(TopologyError):
        S.vertex_loss(a, a[:3])


def test_overlap_loss_examples():
    neutral, _, rig, binding, overlap, *_ = synthetic.calibration_fixture()
    pose = S.forward_kinematics(rig)
    assert S.overlap_loss(pose[:, :3, 3], neutral.vertices, overlap) < 1e-28
    verts = neutral.vertices.copy()
    verts[overlap.vertices[0], 0] += 0.1
    assert np.isclose(S.overlap_loss(pose[:, :3, 3], verts, overlap), 0.01, rtol=1e-9)
    assert S.overlap_loss(pose[:, :3, 3], verts, S.OverlapMap([], [])) == 0


def test_overlap_map_checks():
    neutral, _, rig, binding, overlap, *_ = synthetic.calibration_fixture()
    with pytest.raises(MapError):
        S.OverlapMap([6, 7], [10, 10])
    with pytest.raises(MapError):
        S.OverlapMap([0], [0]).check(rig)
    overlap.check(rig, neutral)
    with pytest.raises(MapError):
        S.OverlapMap(overlap.joints[:1], [0]).check(rig, neutral)


# -- gradients ------------------------------------------------------------------------

def _numpy_total(rig, binding, neutral, target, overlap, leaves, t, w):
    trans = rig.translations.copy()
    rots = rig.rotations.copy()
    trans[leaves] = t
    rots[leaves] = quat.multiply(rig.rotations[leaves], quat.from_axis_angle(w))
    return S.total_loss(replace(rig, translations=trans, rotations=rots), binding, neutral.vertices, target, overlap)


@pytest.mark.parametrize("seed", range(10))
def test_autodiff_matches_central_differences(seed):
    neutral, target, rig, binding, overlap, *_ = synthetic.calibration_fixture(seed=seed)
    rng = np.random.default_rng(100 + seed)
    leaves = rig.leaves()
    t0 = rig.translations[leaves] + rng.normal(0, 0.02, (len(leaves), 3))
    w0 = rng.normal(0, 0.1, (len(leaves), 3))
    _, gt, gw = S.leaf_loss_and_grad(rig, binding, neutral.vertices, target.vertices, overlap, t0, w0)
    ft = central_fd(lambda t: _numpy_total(rig, binding, neutral, target.vertices, overlap, leaves, t, w0), t0)
    fw = central_fd(lambda w: _numpy_total(rig, binding, neutral, target.vertices, overlap, leaves, t0, w), w0)
    for ad, fd in ((gt, ft), (gw, fw)):
        rel = np.abs(ad - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-6)
        assert rel.max() < 1e-4


# -- calibration ----------------------------------------------------------------------

def test_calibration_recovers_leaves():
    neutral, target, rig, binding, overlap, moved, picked = synthetic.calibration_fixture(seed=0)
    res = S.calibrate_skeleton(rig, binding, neutral, target, overlap)
    assert res.skeleton_loss_v < 1e-6 * res.initial_loss_v
    assert res.loss_v < 1e-6 * res.initial_loss_v
    leaves = rig.leaves()
    assert np.abs(res.rig.translations[leaves] - moved.translations[leaves]).max() < 1e-3
    assert res.converged


def test_calibration_is_leaf_only_and_monotone():
    neutral, target, rig, binding, overlap, *_ = synthetic.calibration_fixture(seed=1)
    res = S.calibrate_skeleton(rig, binding, neutral, target, overlap,
                               S.CalibrationConfig(optimize_rotations=True))
    inner = np.setdiff1d(np.arange(rig.n_joints), rig.leaves())
    assert np.array_equal(res.rig.translations[inner], rig.translations[inner])
    assert np.array_equal(res.rig.rotations[inner], rig.rotations[inner])
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert np.allclose(np.linalg.norm(res.rig.rotations, axis=1), 1, atol=1e-12)


def test_calibration_fixed_point():
    neutral, _, rig, binding, overlap, *_ = synthetic.calibration_fixture()
    res = S.calibrate_skeleton(rig, binding, neutral, neutral, overlap)
    assert res.iterations == 0
    assert res.loss_total < 1e-10
    assert np.abs(res.residual).max() < 1e-12
    assert np.array_equal(res.rig.translations, rig.translations)


def test_calibration_bump_absorbed_by_residual():
    neutral, target, rig, binding, overlap, *_ = synthetic.calibration_fixture(seed=2, bump=0.03)
    res = S.calibrate_skeleton(rig, binding, neutral, target, overlap)
    assert res.skeleton_loss_v > 1e-6
    assert res.loss_v < 1e-6
    # residual applied in rest space, then the calibrated pose, lands on the target
    rest = S.forward_kinematics(rig)
    redo = S.lbs_deform(neutral.vertices + res.residual, S.SkinBinding(binding.weights, rest),
                        S.forward_kinematics(res.rig))
    np.testing.assert_allclose(redo, target.vertices, atol=1e-9)


def test_calibration_residual_respects_mask():
    neutral, target, rig, binding, overlap, *_ = synthetic.calibration_fixture(seed=2, bump=0.03)
    mask = neutral.vertices[:, 0] > 0
    res = S.calibrate_skeleton(rig, binding, neutral, target, overlap, residual_mask=mask)
    assert np.all(res.residual[~mask] == 0)


def test_calibration_non_convergence_is_flagged():
    neutral, target, rig, binding, overlap, *_ = synthetic.calibration_fixture()
    res = S.calibrate_skeleton(rig, binding, neutral, target, overlap, S.CalibrationConfig(max_iters=3))
    assert not res.converged and res.iterations == 3


def test_calibration_is_deterministic():
    neutral, target, rig, binding, overlap, *_ = synthetic.calibration_fixture(seed=3)
    a = S.calibrate_skeleton(rig, binding, neutral, target, overlap)
    b = S.calibrate_skeleton(rig, binding, neutral, target, overlap)
    assert a.trace == b.trace
    assert np.array_equal(a.rig.translations, b.rig.translations)


def test_calibration_requires_shared_topology():
    neutral, _, rig, binding, overlap, *_ = synthetic.calibration_fixture()
    with pytest.raises(TopologyError):
        S.calibrate_skeleton(rig, binding, neutral, synthetic.grid_mesh(5), overlap)


# -- files ----------------------------------------------------------------------------

def test_rig_document_round_trip(tmp_path):
    _, _, rig, binding, overlap, *_ = synthetic.calibration_fixture()
    io.write_json(tmp_path / "rig.json", S.rig_document(rig, binding, overlap))
    r2, b2, o2 = S.read_rig(tmp_path / "rig.json")
    assert r2.names == rig.names
    assert np.array_equal(r2.translations, rig.translations)
    assert np.array_equal(b2.weights, binding.weights)
    assert np.array_equal(o2.vertices, overlap.vertices)


def test_rig_document_rejects_unknown_joint(tmp_path):
    _, _, rig, binding, overlap, *_ = synthetic.calibration_fixture()
    doc = S.rig_document(rig, binding, overlap)
    doc["skin"]["weights"][0] = [["nobody", 1.0]]
    io.write_json(tmp_path / "rig.json", doc)
    with pytest.raises((SkeletonError, ValidationError)):
        S.read_rig(tmp_path / "rig.json")
