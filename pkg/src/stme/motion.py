"""Motion representations, flat-vector regrouping, synthetic data, and MGRD file I/O.

A motion clip is a T x J grid of 12-dim per-joint features (local position 3,
continuous 6D rotation 6, velocity 3) plus a T x G global stream (root
rotation velocity 1, root linear velocity xy 2, root height 1, root joint
velocity xyz 3, foot contacts 4; G = 11). Positions are meters, velocities
meters per frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

JOINT_DIM = 12
GLOBAL_DIM = 11
MGRD_MAGIC = b"MGRD1"

# Flat-vector layouts: feature dim -> joint count (root excluded; its velocity
# and trajectory live in the global stream). D = GLOBAL_DIM + 12*J.
FLAT_LAYOUTS = {263: 21, 251: 20}

# Largest label id the default condition table can embed.
MAX_LABELS = 64


@dataclass
class MotionGrid:
    joint_feats: np.ndarray  # (T, J, 12) float32
    global_feats: np.ndarray  # (T, G) float32
    fps: int = 20
    label: int | None = None

    def __post_init__(self):
        self.joint_feats = np.ascontiguousarray(self.joint_feats, dtype=np.float32)
        self.global_feats = np.ascontiguousarray(self.global_feats, dtype=np.float32)
        self.validate()

    def validate(self):
        if self.joint_feats.ndim != 3 or self.joint_feats.shape[2] != JOINT_DIM:
            raise ValueError(f"joint_feats must be (T, J, {JOINT_DIM})")
        if self.global_feats.ndim != 2:
            raise ValueError("global_feats must be (T, G)")
        T, J, _ = self.joint_feats.shape
        if T < 1 or J < 1:
            raise ValueError("need T >= 1 and J >= 1")
        if self.global_feats.shape[0] != T:
            raise ValueError("joint and global streams disagree on frame count")
        if not (np.isfinite(self.joint_feats).all() and np.isfinite(self.global_feats).all()):
            raise ValueError("motion contains non-finite values")
        if self.global_feats.shape[1] == GLOBAL_DIM:
            contacts = self.global_feats[:, 7:11]
            if contacts.min() < 0.0 or contacts.max() > 1.0:
                raise ValueError("foot-contact entries must lie in [0, 1]")

    @property
    def frames(self) -> int:
        return self.joint_feats.shape[0]

    @property
    def joints(self) -> int:
        return self.joint_feats.shape[1]

    def positions(self) -> np.ndarray:
        return self.joint_feats[:, :, 0:3]


@dataclass
class ConditionEmbedding:
    vector: np.ndarray  # (d_text,) float32
    source: str = "label-table"

    def __post_init__(self):
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float32)
        if not np.isfinite(self.vector).all():
            raise ValueError("condition embedding contains non-finite values")


class LabelTableProvider:
    """Default condition provider: a frozen random embedding per label id."""

    def __init__(self, num_labels: int = MAX_LABELS, d_text: int = 512, seed: int = 0):
        if num_labels > MAX_LABELS:
            raise ValueError(f"label table capacity is {MAX_LABELS}")
        self.num_labels = num_labels
        self.d_text = d_text
        self.seed = seed
        rng = make_rng(seed, "label-table")
        self.table = (rng.standard_normal((num_labels, d_text)) / np.sqrt(d_text)).astype(np.float32)

    def embed(self, label: int) -> ConditionEmbedding:
        if not 0 <= label < self.num_labels:
            raise ValueError(f"label {label} outside table of size {self.num_labels}")
        return ConditionEmbedding(self.table[label], "label-table")


# ---------------------------------------------------------------------------
# flat-vector regrouping


def regroup_flat(vec_seq: np.ndarray, fps: int = 20, label: int | None = None) -> MotionGrid:
    """Regroup (T, D) rows with D in {263, 251} into the joint grid + global stream."""
    vec_seq = np.asarray(vec_seq, dtype=np.float32)
    if vec_seq.ndim != 2:
        raise ValueError("expected a (T, D) array")
    D = vec_seq.shape[1]
    if D not in FLAT_LAYOUTS:
        raise ValueError(f"unknown layout: D={D}")
    if not np.isfinite(vec_seq).all():
        raise ValueError("flat motion contains non-finite values")
    T = vec_seq.shape[0]
    J = FLAT_LAYOUTS[D]

    joint = np.empty((T, J, JOINT_DIM), dtype=np.float32)
    glob = np.empty((T, GLOBAL_DIM), dtype=np.float32)

    glob[:, 0:4] = vec_seq[:, 0:4]  # root rot vel, root lin vel xy, root height
    o = 4
    joint[:, :, 0:3] = vec_seq[:, o : o + J * 3].reshape(T, J, 3)
    o += J * 3
    joint[:, :, 3:9] = vec_seq[:, o : o + J * 6].reshape(T, J, 6)
    o += J * 6
    vel = vec_seq[:, o : o + (J + 1) * 3].reshape(T, J + 1, 3)
    glob[:, 4:7] = vel[:, 0]  # root joint velocity
    joint[:, :, 9:12] = vel[:, 1:]
    o += (J + 1) * 3
    glob[:, 7:11] = vec_seq[:, o : o + 4]  # foot contacts
    return MotionGrid(joint, glob, fps=fps, label=label)


def flatten_grid(grid: MotionGrid) -> np.ndarray:
    """Inverse of regroup_flat; reproduces the flat rows bit-exactly."""
    T, J = grid.frames, grid.joints
    D = GLOBAL_DIM + JOINT_DIM * J
    if J not in FLAT_LAYOUTS.values():
        raise ValueError(f"no flat layout for J={J}")
    out = np.empty((T, D), dtype=np.float32)
    out[:, 0:4] = grid.global_feats[:, 0:4]
    o = 4
    out[:, o : o + J * 3] = grid.joint_feats[:, :, 0:3].reshape(T, J * 3)
    o += J * 3
    out[:, o : o + J * 6] = grid.joint_feats[:, :, 3:9].reshape(T, J * 6)
    o += J * 6
    out[:, o : o + 3] = grid.global_feats[:, 4:7]
    out[:, o + 3 : o + (J + 1) * 3] = grid.joint_feats[:, :, 9:12].reshape(T, J * 3)
    o += (J + 1) * 3
    out[:, o : o + 4] = grid.global_feats[:, 7:11]
    return out


def read_flat_file(path, D: int) -> np.ndarray:
    """Headerless float32 rows of length D; row count from file size."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % D:
        raise ValueError(f"file size is not a multiple of D={D}")
    return raw.reshape(-1, D)


# ---------------------------------------------------------------------------
# synthetic labeled motion

_FREQ_BASE = 1.2 / 64.0  # cycles per frame for class 0
_FREQ_STEP = 2.2  # per-class frequency multiplier (keeps class 3 under 1/5 cyc/frame)


def class_frequency(class_id: int) -> float:
    return _FREQ_BASE * _FREQ_STEP**class_id


def synth_motion(class_id: int, T: int, J: int, seed: int, fps: int = 20) -> MotionGrid:
    """Deterministic labeled clip: class-dependent sinusoids on a kinematic chain.

    Each class owns a fixed prototype (chain rest pose, sway amplitudes,
    rotation phases, base frequency, root speed); a clip adds seeded phase and
    amplitude variation on top. Joint j sways with <= 3 harmonics of the class
    frequency and inherits its parent's displacement via the chain cumsum.
    Velocity channels are exact first differences of the position channels.
    """
    if T < 4:
        raise ValueError("need T >= 4")
    if not 0 <= class_id < MAX_LABELS:
        raise ValueError(f"class_id must be in [0, {MAX_LABELS})")
    proto = make_rng(0, "class-proto", class_id, J)
    rng = make_rng(seed, "synth", class_id, T, J)
    freq = class_frequency(class_id)
    t = np.arange(T, dtype=np.float64)

    rest = proto.uniform(-0.12, 0.12, size=(J, 3))
    rest[:, 1] = np.abs(rest[:, 1]) + 0.1  # chain extends upward
    base_amps = proto.uniform(0.12, 0.22, size=(J, 3, 3)) * (0.5 ** np.arange(3))[None, :, None]
    rot_phase = proto.uniform(0.0, 2.0 * np.pi, size=(1, J))

    amps = base_amps * rng.uniform(0.9, 1.1, size=(J, 3, 3))
    rest = rest + rng.uniform(-0.01, 0.01, size=(J, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(J, 3, 3))

    local = np.zeros((T, J, 3))
    for h in range(3):
        angle = 2.0 * np.pi * freq * (h + 1) * t
        local += amps[None, :, h, :] * np.sin(angle[:, None, None] + phases[None, :, h, :])
    pos = np.cumsum(local + rest[None, :, :], axis=1)  # propagate along the chain
    pos = pos.astype(np.float32)

    joint = np.zeros((T, J, JOINT_DIM), dtype=np.float32)
    joint[:, :, 0:3] = pos
    rot_amp = 0.25 * (1.0 + 0.5 * class_id)
    theta = (rot_amp * np.sin(2.0 * np.pi * freq * t)[:, None] + rot_phase
             + rng.uniform(-0.25, 0.25, size=(1, J)))
    c, s = np.cos(theta), np.sin(theta)
    rot6 = np.stack([c, s, np.zeros_like(c), -s, c, np.zeros_like(c)], axis=-1)
    joint[:, :, 3:9] = rot6.astype(np.float32)
    joint[1:, :, 9:12] = pos[1:] - pos[:-1]

    glob = np.zeros((T, GLOBAL_DIM), dtype=np.float32)
    speed = 0.05 * (class_id + 1)
    root = np.stack(
        [speed * t, np.zeros_like(t), 0.9 + 0.05 * np.sin(2 * np.pi * freq * t)], axis=1
    ).astype(np.float32)
    glob[:, 0] = (0.1 * np.sin(2 * np.pi * freq * t + phases[0, 0, 0])).astype(np.float32)
    glob[1:, 1:3] = root[1:, 0:2] - root[:-1, 0:2]
    glob[:, 3] = root[:, 2]
    glob[1:, 4:7] = root[1:] - root[:-1]
    contact_wave = np.sin(2 * np.pi * freq * t[:, None] + np.arange(4)[None, :] * np.pi / 2)
    glob[:, 7:11] = (contact_wave > 0).astype(np.float32)
    return MotionGrid(joint, glob, fps=fps, label=class_id)


def synth_dataset(classes: int, clips: int, T: int, J: int, seed: int) -> list[MotionGrid]:
    """Round-robin labeled clips; clip i gets class i % classes and its own stream."""
    return [synth_motion(i % classes, T, J, seed=seed * 100003 + i) for i in range(clips)]


# ---------------------------------------------------------------------------
# MGRD binary format

_HEADER = struct.Struct("<6I")  # T, J, F, G, fps, label+1


def write_mgrid(grid: MotionGrid, path):
    T, J = grid.frames, grid.joints
    G = grid.global_feats.shape[1]
    label_field = 0 if grid.label is None else grid.label + 1
    for value in (T, J, JOINT_DIM, G, grid.fps, label_field):
        if not 0 <= value < 2**32:
            raise ValueError("header field overflows u32")
    with open(path, "wb") as fh:
        fh.write(MGRD_MAGIC)
        fh.write(_HEADER.pack(T, J, JOINT_DIM, G, grid.fps, label_field))
        fh.write(grid.joint_feats.astype("<f4").tobytes())
        fh.write(grid.global_feats.astype("<f4").tobytes())


def read_mgrid(path) -> MotionGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MGRD_MAGIC)] != MGRD_MAGIC:
        raise ValueError("bad magic")
    off = len(MGRD_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise ValueError("truncated file")
    T, J, F, G, fps, label_field = _HEADER.unpack_from(blob, off)
    if F != JOINT_DIM:
        raise ValueError(f"unsupported joint feature dim {F}")
    off += _HEADER.size
    expected = off + 4 * (T * J * F + T * G)
    if len(blob) != expected:
        raise ValueError("truncated file")
    joint = np.frombuffer(blob, dtype="<f4", count=T * J * F, offset=off).reshape(T, J, F)
    off += 4 * T * J * F
    glob = np.frombuffer(blob, dtype="<f4", count=T * G, offset=off).reshape(T, G)
    label = None if label_field == 0 else label_field - 1
    return MotionGrid(joint.copy(), glob.copy(), fps=fps, label=label)


# ---------------------------------------------------------------------------
# reconstruction error


def mpjpe(a: MotionGrid, b: MotionGrid) -> float:
    """Mean per-joint position error in millimeters."""
    if a.joint_feats.shape != b.joint_feats.shape:
        raise ValueError("mpjpe requires matching (T, J)")
    diff = a.positions().astype(np.float64) - b.positions().astype(np.float64)
    return float(np.sqrt((diff**2).sum(axis=2)).mean() * 1000.0)
