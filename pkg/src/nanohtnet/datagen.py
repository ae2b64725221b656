"""Synthetic multi-view skeleton motion and the PSEQ1 dataset container.

Motion: every non-root joint carries a local rotation whose three Euler
angles are sums of seeded sinusoids; forward kinematics down the tree with
fixed bone lengths gives world positions (mm, z up).  Four pinhole cameras
at 90 degree azimuth spacing look at the subject; 2D joints are normalized
by image width so the principal point maps to (0, 0) for a centred camera.

PSEQ1 layout (little-endian)::

    b"PSEQ1" | uint32 n_sequences, J, views
    per sequence:
        uint32 T | uint16 tag length | tag (UTF-8)
        float32 poses3d [T, J, 3]   world mm
        per view:
            float64 R[9], t[3], focal, cx, cy | uint32 width, height
            float32 poses2d [T, J, 2]
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, CorruptDatasetError, GenerationError
from .skeleton import SkeletonTopology, build_h36m17

FPS = 50.0
MAGIC = b"PSEQ1"

# rest (T-pose) offset direction from parent, and default bone length in mm
_REST = {
    1: ((-1, 0, 0), 130.0), 2: ((0, 0, -1), 450.0), 3: ((0, 0, -1), 440.0),
    4: ((1, 0, 0), 130.0), 5: ((0, 0, -1), 450.0), 6: ((0, 0, -1), 440.0),
    7: ((0, 0, 1), 230.0), 8: ((0, 0, 1), 250.0), 9: ((0, 0, 1), 120.0), 10: ((0, 0, 1), 115.0),
    11: ((1, 0, 0), 150.0), 12: ((1, 0, 0), 280.0), 13: ((1, 0, 0), 250.0),
    14: ((-1, 0, 0), 150.0), 15: ((-1, 0, 0), 280.0), 16: ((-1, 0, 0), 250.0),
}
PELVIS_HEIGHT = 950.0

# per-joint angle amplitude multipliers for each action preset; joints absent get 1.0
ACTION_PRESETS = {
    "walk": {1: 1.6, 4: 1.6, 2: 1.4, 5: 1.4, 11: 1.0, 14: 1.0, 12: 0.6, 15: 0.6, 7: 0.3, 8: 0.3},
    "wave": {11: 1.8, 12: 1.8, 13: 1.2, 14: 0.5, 1: 0.3, 4: 0.3, 2: 0.3, 5: 0.3},
    "mixed": {},
}
JOINT_LIMIT = 1.4  # radians; raw angles are squashed with limit * tanh(raw / limit)


@dataclass
class SyntheticMotionConfig:
    seed: int = 0
    frames: int = 300
    bone_lengths: Optional[dict] = None
    components: int = 3
    freq_band: tuple = (0.2, 2.0)
    amp_band: tuple = (0.05, 0.25)
    action: str = "mixed"
    root_amplitude_mm: float = 150.0

    def __post_init__(self):
        lo, hi = self.freq_band
        if not 0 <= lo <= hi <= FPS / 2:
            raise ConfigError(f"frequency band {self.freq_band} outside [0, Nyquist={FPS / 2}]")
        if not 0 <= self.amp_band[0] <= self.amp_band[1]:
            raise ConfigError(f"bad amplitude band {self.amp_band}")
        if self.components * self.amp_band[1] * 1.8 > 2 * JOINT_LIMIT:
            raise ConfigError("amplitude band too wide for the joint limits")
        if self.action not in ACTION_PRESETS:
            raise ConfigError(f"unknown action preset {self.action!r}")
        if self.frames < 1 or self.components < 0:
            raise ConfigError("frames must be >= 1 and components >= 0")

    def lengths(self) -> dict[int, float]:
        out = {j: length for j, (_, length) in _REST.items()}
        if self.bone_lengths:
            out.update({int(k): float(v) for k, v in self.bone_lengths.items()})
        return out

    @classmethod
    def from_json(cls, text: str) -> "SyntheticMotionConfig":
        d = json.loads(text)
        for key in ("freq_band", "amp_band"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class CameraView:
    rotation: np.ndarray
    translation: np.ndarray
    focal: float = 1150.0
    principal: tuple = (500.0, 500.0)
    size: tuple = (1000, 1000)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def projection_matrix(self) -> np.ndarray:
        k = np.array([[self.focal, 0, self.principal[0]], [0, self.focal, self.principal[1]], [0, 0, 1]])
        return k @ np.hstack([self.rotation, self.translation[:, None]])

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        w, h = self.size
        return np.stack([uv[..., 0] * 2.0 / w - 1.0, uv[..., 1] * 2.0 / w - h / w], axis=-1)

    def denormalize(self, xy: np.ndarray) -> np.ndarray:
        w, h = self.size
        return np.stack([(xy[..., 0] + 1.0) * w / 2.0, (xy[..., 1] + h / w) * w / 2.0], axis=-1)


@dataclass
class Sequence3D:
    tag: str
    poses3d: np.ndarray                 # [T, J, 3] world mm
    cameras: list = field(default_factory=list)
    poses2d: Optional[np.ndarray] = None  # [views, T, J, 2]

    @property
    def frames(self) -> int:
        return self.poses3d.shape[0]


# ---------------------------------------------------------------- kinematics


def _rot_xyz(ax: np.ndarray, ay: np.ndarray, az: np.ndarray) -> np.ndarray:
    """Batched ``Rz @ Ry @ Rx`` for angle arrays of shape [T]."""
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    r = np.empty(ax.shape + (3, 3))
    r[..., 0, 0] = cz * cy
    r[..., 0, 1] = cz * sy * sx - sz * cx
    r[..., 0, 2] = cz * sy * cx + sz * sx
    r[..., 1, 0] = sz * cy
    r[..., 1, 1] = sz * sy * sx + cz * cx
    r[..., 1, 2] = sz * sy * cx - cz * sx
    r[..., 2, 0] = -sy
    r[..., 2, 1] = cy * sx
    r[..., 2, 2] = cy * cx
    return r


def _sinusoids(rng, t: np.ndarray, n: int, cfg: SyntheticMotionConfig, gain: float) -> np.ndarray:
    out = np.zeros_like(t)
    for _ in range(n):
        f = rng.uniform(*cfg.freq_band)
        a = rng.uniform(*cfg.amp_band) * gain
        phase = rng.uniform(0, 2 * math.pi)
        out += a * np.sin(2 * math.pi * f * t / FPS + phase)
    return out


def generate_motion(cfg: SyntheticMotionConfig, topo: Optional[SkeletonTopology] = None,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """World-frame joint positions ``[frames, J, 3]`` in mm; pelvis is joint 0.

    Subtract ``out[:, :1]`` for root-relative poses.
    """
    topo = topo or build_h36m17()
    if topo.num_joints != 17:
        raise ConfigError("the motion generator knows only the 17-joint layout")
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(cfg.seed))
    parents = topo.parents()
    lengths = cfg.lengths()
    gains = ACTION_PRESETS[cfg.action]
    T = cfg.frames
    t = np.arange(T, dtype=np.float64)

    local = {}
    for j in range(1, topo.num_joints):
        angles = [_sinusoids(rng, t, cfg.components, cfg, gains.get(j, 1.0)) for _ in range(3)]
        angles = [JOINT_LIMIT * np.tanh(a / JOINT_LIMIT) for a in angles]
        local[j] = _rot_xyz(*angles)

    heading = rng.uniform(0, 2 * math.pi)
    yaw = heading + _sinusoids(rng, t, cfg.components, cfg, 1.0)
    tilt = _sinusoids(rng, t, cfg.components, cfg, 0.2)
    root_rot = _rot_xyz(tilt, np.zeros(T), yaw)
    scale = cfg.root_amplitude_mm / max(cfg.amp_band[1], 1e-9)
    root_pos = np.stack([
        _sinusoids(rng, t, cfg.components, cfg, scale),
        _sinusoids(rng, t, cfg.components, cfg, scale),
        PELVIS_HEIGHT + _sinusoids(rng, t, cfg.components, cfg, 0.2 * scale),
    ], axis=-1)

    pos = np.zeros((T, topo.num_joints, 3))
    glob = np.zeros((T, topo.num_joints, 3, 3))
    pos[:, 0] = root_pos
    glob[:, 0] = root_rot
    # parents precede children in BFS order from the root
    order = sorted(range(1, topo.num_joints), key=lambda j: _depth(parents, j))
    for j in order:
        p = parents[j]
        direction, _ = _REST[j]
        offset = np.asarray(direction, dtype=np.float64) * lengths[j]
        pos[:, j] = pos[:, p] + glob[:, p] @ offset
        glob[:, j] = glob[:, p] @ local[j]
    return pos


def _depth(parents, j):
    d = 0
    while parents[j] >= 0:
        j = parents[j]
        d += 1
    return d


def rest_pose(topo: Optional[SkeletonTopology] = None) -> np.ndarray:
    """Root-relative T-pose ``[J, 3]`` with default bone lengths."""
    topo = topo or build_h36m17()
    parents = topo.parents()
    pos = np.zeros((topo.num_joints, 3))
    for j in sorted(range(1, topo.num_joints), key=lambda j: _depth(parents, j)):
        direction, length = _REST[j]
        pos[j] = pos[parents[j]] + np.asarray(direction) * length
    return pos


# ---------------------------------------------------------------- cameras


def look_at(position: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` with x right, y down, z forward."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ position


def make_rig(rng: np.random.Generator, views: int = 4, radius: float = 4500.0) -> list[CameraView]:
    cams = []
    for k in range(views):
        az = math.pi / 4 + 2 * math.pi * k / views
        height = 1400.0 + rng.uniform(-150.0, 150.0)
        position = np.array([radius * math.cos(az), radius * math.sin(az), height])
        rot, trans = look_at(position, np.array([0.0, 0.0, PELVIS_HEIGHT]))
        cams.append(CameraView(rotation=rot, translation=trans))
    return cams


def project(pose3d, cam: CameraView) -> np.ndarray:
    """Pinhole projection of world points ``[..., 3]`` to normalized image coordinates."""
    pc = cam.to_camera(np.asarray(pose3d, dtype=np.float64))
    z = pc[..., 2]
    if np.any(z <= 0):
        raise GenerationError("point at or behind the camera plane")
    uv = cam.focal * pc[..., :2] / z[..., None] + np.asarray(cam.principal)
    return cam.normalize(uv)


def triangulate(points2d: Sequence[np.ndarray], cams: Sequence[CameraView]) -> np.ndarray:
    """Linear (DLT) triangulation of one point seen in two or more views."""
    rows = []
    for xy, cam in zip(points2d, cams):
        u, v = cam.denormalize(np.asarray(xy, dtype=np.float64))
        P = cam.projection_matrix()
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    X = vt[-1]
    return X[:3] / X[3]


def horizontal_flip(pose, topo: Optional[SkeletonTopology] = None) -> np.ndarray:
    """Mirror ``[..., J, D]`` about x = 0 and swap left/right joints."""
    topo = topo or build_h36m17()
    pose = np.asarray(pose)
    out = pose[..., topo.flip_permutation(), :].copy()
    out[..., 0] *= -1
    return out


def camera_frame_targets(seq: Sequence3D, view: int) -> np.ndarray:
    """Root-relative 3D in the camera frame of ``view`` (the lifting target), mm."""
    pc = seq.cameras[view].to_camera(seq.poses3d.astype(np.float64))
    return pc - pc[:, :1]


# ---------------------------------------------------------------- datasets


def generate_sequence(seq_id: int, seed: int, frames: int, views: int = 4,
                      action: Optional[str] = None, topo: Optional[SkeletonTopology] = None,
                      **motion_kw) -> Sequence3D:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, seq_id])))
    actions = sorted(ACTION_PRESETS)
    action = action or actions[seq_id % len(actions)]
    cfg = SyntheticMotionConfig(seed=seed, frames=frames, action=action, **motion_kw)
    pose = generate_motion(cfg, topo, rng)
    cams = make_rig(rng, views)
    pose32 = pose.astype(np.float32)
    poses2d = np.stack([project(pose32, c) for c in cams]).astype(np.float32)
    return Sequence3D(tag=action, poses3d=pose32, cameras=cams, poses2d=poses2d)


def generate_dataset(n_sequences: int, frames: int, seed: int = 0, views: int = 4,
                     **motion_kw) -> list[Sequence3D]:
    return [generate_sequence(i, seed, frames, views, **motion_kw) for i in range(n_sequences)]


_CAM = struct.Struct("<9d3d3d2I")


def write_dataset(path, sequences: Sequence[Sequence3D]) -> None:
    if not sequences:
        raise ConfigError("no sequences to write")
    J = sequences[0].poses3d.shape[1]
    views = len(sequences[0].cameras)
    parts = [MAGIC, struct.pack("<3I", len(sequences), J, views)]
    for s in sequences:
        if s.poses3d.shape[1] != J or len(s.cameras) != views:
            raise ConfigError("sequences disagree on joint or view count")
        tag = s.tag.encode("utf-8")
        parts.append(struct.pack("<IH", s.frames, len(tag)))
        parts.append(tag)
        parts.append(np.ascontiguousarray(s.poses3d, dtype="<f4").tobytes())
        for cam, p2 in zip(s.cameras, s.poses2d):
            parts.append(_CAM.pack(*cam.rotation.reshape(-1), *cam.translation, cam.focal,
                                   *cam.principal, *cam.size))
            parts.append(np.ascontiguousarray(p2, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptDatasetError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        st = struct.Struct(fmt) if isinstance(fmt, str) else fmt
        return st.unpack(self.take(st.size))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def read_dataset(path, topo: Optional[SkeletonTopology] = None, check_fraction: float = 0.01,
                 tol: float = 1e-3) -> list[Sequence3D]:
    """Parse a PSEQ1 file and spot-check that 2D equals the projection of 3D."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptDatasetError(f"{path}: bad magic")
    n, J, views = r.unpack("<3I")
    if topo is not None and J != topo.num_joints:
        raise CorruptDatasetError(f"{path}: header has J={J}, topology has {topo.num_joints}")
    seqs = []
    for _ in range(n):
        T, tag_len = r.unpack("<IH")
        tag = r.take(tag_len).decode("utf-8", errors="replace")
        p3 = r.floats((T, J, 3))
        cams, p2 = [], []
        for _ in range(views):
            vals = r.unpack(_CAM)
            cams.append(CameraView(rotation=np.array(vals[:9]).reshape(3, 3),
                                   translation=np.array(vals[9:12]), focal=vals[12],
                                   principal=(vals[13], vals[14]), size=(vals[15], vals[16])))
            p2.append(r.floats((T, J, 2)))
        seqs.append(Sequence3D(tag=tag, poses3d=p3, cameras=cams, poses2d=np.stack(p2)))
    if r.pos != len(r.raw):
        raise CorruptDatasetError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    _check_consistency(seqs, check_fraction, tol, path)
    return seqs


def _check_consistency(seqs, fraction, tol, path) -> None:
    for si, s in enumerate(seqs):
        if s.frames == 0:
            continue
        k = max(1, int(round(fraction * s.frames)))
        frames = np.linspace(0, s.frames - 1, k).round().astype(int)
        for v, cam in enumerate(s.cameras):
            try:
                expected = project(s.poses3d[frames], cam)
            except GenerationError as exc:
                raise CorruptDatasetError(f"{path}: sequence {si} view {v}: {exc}") from exc
            err = np.abs(expected - s.poses2d[v, frames]).max()
            if not err <= tol:
                raise CorruptDatasetError(
                    f"{path}: sequence {si} view {v}: 2D deviates from projection by {err:.2e}")
