import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nanohtnet import datagen as D
from nanohtnet.errors import ConfigError, CorruptDatasetError, GenerationError
from nanohtnet.frequency import dct_forward
from nanohtnet.skeleton import SkeletonTopology


def _bones(pose, topo):
    par = topo.parents()
    return np.stack([np.linalg.norm(pose[..., j, :] - pose[..., par[j], :], axis=-1) for j in range(1, 17)], -1)


def test_zero_amplitude_is_static_tpose(topo):
    p = D.generate_motion(D.SyntheticMotionConfig(frames=20, amp_band=(0.0, 0.0)), topo)
    rel = p - p[:, :1]
    np.testing.assert_allclose(rel, np.broadcast_to(rel[0], rel.shape), atol=1e-9)
    # same shape as the rest pose up to the random heading
    rest = D.rest_pose(topo)
    d = lambda q: np.linalg.norm(q[:, None] - q[None], axis=-1)
    np.testing.assert_allclose(d(rel[0]), d(rest), atol=1e-9)


def test_bone_lengths_constant(topo):
    p = D.generate_motion(D.SyntheticMotionConfig(seed=4, frames=200, action="walk"), topo)
    b = _bones(p, topo)
    assert np.ptp(b, axis=0).max() < 1e-6
    cfg = D.SyntheticMotionConfig(bone_lengths={"3": 500.0})
    b = _bones(D.generate_motion(cfg, topo), topo)
    np.testing.assert_allclose(b[:, 2], 500.0)


@pytest.mark.parametrize("action", sorted(D.ACTION_PRESETS))
def test_spectral_band(action):
    # rotations compose multiplicatively, so positions stay below twice the angle band
    cfg = D.SyntheticMotionConfig(seed=7, frames=300, action=action)
    p = D.generate_motion(cfg)
    c = dct_forward((p - p[:, :1])[:, 1:])
    k = int(np.ceil(2 * cfg.freq_band[1] * 2 * cfg.frames / D.FPS))
    e = (c ** 2).sum(-1)
    assert (e[k + 1:].sum(0) / e.sum(0)).max() < 0.01


def test_config_validation():
    with pytest.raises(ConfigError):
        D.SyntheticMotionConfig(freq_band=(0.0, 30.0))
    with pytest.raises(ConfigError):
        D.SyntheticMotionConfig(amp_band=(0.0, 1.0))
    with pytest.raises(ConfigError):
        D.SyntheticMotionConfig(action="dance")
    cfg = D.SyntheticMotionConfig.from_json('{"seed": 3, "freq_band": [0.5, 1.0]}')
    assert cfg.freq_band == (0.5, 1.0)


def _cam():
    rot, t = D.look_at(np.array([0.0, -4000.0, 1000.0]), np.array([0.0, 0.0, 1000.0]))
    return D.CameraView(rotation=rot, translation=t)


def test_camera_orthonormal():
    cams = D.make_rig(np.random.default_rng(0))
    assert len(cams) == 4
    for c in cams:
        np.testing.assert_allclose(c.rotation.T @ c.rotation, np.eye(3), atol=1e-6)


def test_optical_axis_maps_to_principal_point():
    cam = _cam()
    xy = D.project(np.array([0.0, 0.0, 1000.0]), cam)
    np.testing.assert_allclose(xy, [0.0, 0.0], atol=1e-12)


def test_doubling_depth_halves_offset():
    cam = _cam()
    c = cam.to_camera(np.array([100.0, -2000.0, 1200.0]))
    far_c = c * [1.0, 1.0, 2.0]
    far_world = cam.rotation.T @ (far_c - cam.translation)
    near, far = D.project(cam.rotation.T @ (c - cam.translation), cam), D.project(far_world, cam)
    np.testing.assert_allclose(far, near / 2, atol=1e-12)


def test_projection_matrix_oracle(rng):
    cam = D.make_rig(rng)[1]
    pts = rng.normal(0, 500, size=(50, 3)) + [0, 0, 900]
    h = np.hstack([pts, np.ones((50, 1))]) @ cam.projection_matrix().T
    uv = h[:, :2] / h[:, 2:]
    oracle = np.stack([2 * uv[:, 0] / 1000 - 1, 2 * uv[:, 1] / 1000 - 1], -1)
    np.testing.assert_allclose(D.project(pts, cam), oracle, atol=1e-6)


def test_behind_camera_raises():
    with pytest.raises(GenerationError):
        D.project(np.array([0.0, -6000.0, 1000.0]), _cam())


@given(st.integers(0, 1000))
def test_flip_properties(seed):
    from nanohtnet.skeleton import build_h36m17
    topo = build_h36m17()
    x = np.random.default_rng(seed).normal(size=(3, 17, 2))
    f = D.horizontal_flip(x, topo)
    np.testing.assert_array_equal(D.horizontal_flip(f, topo), x)
    torso = [0, 7, 8, 9, 10]
    np.testing.assert_array_equal(f[:, torso, 0], -x[:, torso, 0])
    np.testing.assert_array_equal(f[:, torso, 1], x[:, torso, 1])
    # limb-length multiset is unchanged
    np.testing.assert_allclose(np.sort(_bones(f, topo), -1), np.sort(_bones(x, topo), -1), atol=1e-12)


def test_triangulation_recovers_points():
    seq = D.generate_sequence(0, seed=5, frames=40)
    rng = np.random.default_rng(0)
    for _ in range(20):
        t, j = rng.integers(40), rng.integers(17)
        views = rng.choice(4, size=rng.integers(2, 5), replace=False)
        x = D.triangulate([seq.poses2d[v, t, j] for v in views], [seq.cameras[v] for v in views])
        assert np.linalg.norm(x - seq.poses3d[t, j]) < 1.0


def test_round_trip_and_determinism(tmp_path, topo):
    seqs = D.generate_dataset(3, 50, seed=9)
    D.write_dataset(tmp_path / "a.pseq", seqs)
    D.write_dataset(tmp_path / "b.pseq", D.generate_dataset(3, 50, seed=9))
    a, b = (tmp_path / "a.pseq").read_bytes(), (tmp_path / "b.pseq").read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()
    back = D.read_dataset(tmp_path / "a.pseq", topo)
    for s, r in zip(seqs, back):
        assert s.tag == r.tag
        assert s.poses3d.tobytes() == r.poses3d.tobytes()
        assert s.poses2d.tobytes() == r.poses2d.tobytes()
        for c1, c2 in zip(s.cameras, r.cameras):
            assert c1.rotation.tobytes() == c2.rotation.tobytes()
            assert c1.translation.tobytes() == c2.translation.tobytes()


def test_corrupt_files_rejected(tmp_path, topo):
    path = tmp_path / "d.pseq"
    D.write_dataset(path, D.generate_dataset(2, 30, seed=1))
    raw = path.read_bytes()
    for bad in (b"PSEQ2" + raw[5:], raw[:-7], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(CorruptDatasetError):
            D.read_dataset(path)
    other = SkeletonTopology(names=topo.names[:16], edges=topo.edges[:15], ldof=topo.ldof[:16],
                             limbs=topo.limbs[:3], flip_pairs=topo.flip_pairs[:5])
    path.write_bytes(raw)
    with pytest.raises(CorruptDatasetError):
        D.read_dataset(path, other)


def test_inconsistent_projection_rejected(tmp_path):
    seqs = D.generate_dataset(1, 30, seed=2)
    seqs[0].poses2d[2, 0, 3, 0] += 0.01
    D.write_dataset(tmp_path / "bad.pseq", seqs)
    with pytest.raises(CorruptDatasetError):
        D.read_dataset(tmp_path / "bad.pseq")
