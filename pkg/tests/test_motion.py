import struct

import numpy as np
import pytest

from stme.motion import (GLOBAL_DIM, JOINT_DIM, MGRD_MAGIC, ConditionEmbedding,
                         LabelTableProvider, MotionGrid, class_frequency,
                         flatten_grid, mpjpe, read_flat_file, read_mgrid,
                         regroup_flat, synth_motion, write_mgrid)
from stme.train import synth_dataset


def _random_flat(rng, t, d):
    vec = rng.standard_normal((t, d)).astype(np.float32)
    vec[:, -4:] = rng.random((t, 4))  # foot contacts in [0, 1]
    return vec


def test_regroup_dimension_bookkeeping():
    # independent bookkeeping oracle: D = G + 12*J must solve exactly
    for d, expected_j in ((263, 21), (251, 20)):
        assert (d - GLOBAL_DIM) % JOINT_DIM == 0
        assert (d - GLOBAL_DIM) // JOINT_DIM == expected_j
        grid = regroup_flat(_random_flat(np.random.default_rng(d), 6, d))
        assert grid.joints == expected_j
        assert grid.global_feats.shape == (6, GLOBAL_DIM)


def test_regroup_unknown_layout():
    with pytest.raises(ValueError, match="unknown layout"):
        regroup_flat(np.zeros((4, 100), dtype=np.float32))


def test_regroup_rejects_non_finite():
    vec = _random_flat(np.random.default_rng(0), 4, 263)
    vec[2, 10] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        regroup_flat(vec)


def test_flatten_round_trip_bit_exact():
    rng = np.random.default_rng(1)
    for d in (263, 251):
        vec = _random_flat(rng, 9, d)
        back = flatten_grid(regroup_flat(vec))
        assert np.array_equal(back, vec)


def test_flat_file_row_count_from_size(tmp_path):
    rng = np.random.default_rng(2)
    vec = _random_flat(rng, 7, 251)
    path = tmp_path / "flat.bin"
    vec.astype("<f4").tofile(path)
    assert np.array_equal(read_flat_file(path, 251), vec)
    with pytest.raises(ValueError):
        read_flat_file(path, 263)


def test_synth_deterministic():
    a = synth_motion(2, 32, 6, seed=5)
    b = synth_motion(2, 32, 6, seed=5)
    assert np.array_equal(a.joint_feats, b.joint_feats)
    assert np.array_equal(a.global_feats, b.global_feats)
    c = synth_motion(2, 32, 6, seed=6)
    assert not np.array_equal(a.joint_feats, c.joint_feats)


def test_synth_velocity_is_first_difference():
    g = synth_motion(1, 40, 5, seed=3)
    pos = g.joint_feats[:, :, 0:3]
    vel = g.joint_feats[:, :, 9:12]
    assert np.abs(vel[1:] - (pos[1:] - pos[:-1])).max() < 1e-6
    assert np.abs(vel[0]).max() == 0.0


def test_synth_invariants_all_classes():
    for class_id in range(4):
        for seed in (0, 1):
            g = synth_motion(class_id, 24, 4, seed=seed)
            g.validate()
            assert g.label == class_id


def test_synth_requires_minimum_length_and_class_range():
    with pytest.raises(ValueError):
        synth_motion(0, 3, 4, seed=0)
    with pytest.raises(ValueError):
        synth_motion(64, 16, 4, seed=0)


def _dominant_freq(x: np.ndarray) -> float:
    # FFT oracle: detrend, zero-pad 16x, pick the strongest nonzero bin
    x = x - x.mean(axis=0, keepdims=True)
    n = x.shape[0]
    spec = np.abs(np.fft.rfft(x, n=16 * n, axis=0))
    spec[0] = 0.0
    freqs = np.fft.rfftfreq(16 * n, d=1.0)
    return float(freqs[spec.sum(axis=tuple(range(1, x.ndim))).argmax()])


def test_synth_class_frequencies_separate_by_more_than_2x():
    f0 = np.mean([_dominant_freq(synth_motion(0, 64, 8, seed=s).positions())
                  for s in range(8)])
    f1 = np.mean([_dominant_freq(synth_motion(1, 64, 8, seed=s).positions())
                  for s in range(8)])
    assert f1 / f0 > 2.0
    assert class_frequency(1) / class_frequency(0) > 2.0


def test_synth_dataset_round_robin_labels():
    grids = synth_dataset(4, 10, 16, 4, seed=0)
    assert [g.label for g in grids] == [i % 4 for i in range(10)]


def test_mgrd_round_trip(tmp_path):
    g = synth_motion(3, 20, 5, seed=9)
    path = tmp_path / "clip.mgrd"
    write_mgrid(g, path)
    back = read_mgrid(path)
    assert np.array_equal(back.joint_feats, g.joint_feats)
    assert np.array_equal(back.global_feats, g.global_feats)
    assert back.fps == g.fps and back.label == g.label


def test_mgrd_label_none_round_trip(tmp_path):
    g = synth_motion(0, 8, 3, seed=0)
    g = MotionGrid(g.joint_feats, g.global_feats, fps=g.fps, label=None)
    path = tmp_path / "nolabel.mgrd"
    write_mgrid(g, path)
    assert read_mgrid(path).label is None


def test_mgrd_bad_magic(tmp_path):
    path = tmp_path / "bad.mgrd"
    write_mgrid(synth_motion(0, 8, 3, seed=0), path)
    blob = bytearray(path.read_bytes())
    blob[:5] = b"NOPE!"
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="bad magic"):
        read_mgrid(path)


def test_mgrd_truncation(tmp_path):
    path = tmp_path / "trunc.mgrd"
    write_mgrid(synth_motion(0, 8, 3, seed=0), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(ValueError, match="truncated"):
        read_mgrid(path)


def test_mgrd_hand_assembled_fixture():
    # byte layout: magic, u32 T=2 J=1 F=12 G=11 fps=30 label+1=0, payload
    joint = np.arange(2 * 1 * 12, dtype="<f4").reshape(2, 1, 12)
    glob = np.zeros((2, 11), dtype="<f4")
    glob[:, 7:11] = 0.5
    blob = (MGRD_MAGIC + struct.pack("<6I", 2, 1, 12, 11, 30, 0)
            + joint.tobytes() + glob.tobytes())
    path = "/tmp/fixture.mgrd"
    with open(path, "wb") as fh:
        fh.write(blob)
    g = read_mgrid(path)
    assert g.frames == 2 and g.joints == 1
    assert g.fps == 30 and g.label is None
    assert np.array_equal(g.joint_feats, joint)


def test_mgrd_header_overflow():
    g = synth_motion(0, 8, 3, seed=0)
    g2 = MotionGrid(g.joint_feats, g.global_feats, fps=2**33, label=None)
    with pytest.raises(ValueError, match="overflow"):
        write_mgrid(g2, "/tmp/overflow.mgrd")


def test_mpjpe_zero_and_offset():
    g = synth_motion(0, 16, 4, seed=1)
    assert mpjpe(g, g) == 0.0
    shifted = g.joint_feats.copy()
    shifted[:, :, 0] += 1.0
    g2 = MotionGrid(shifted, g.global_feats, fps=g.fps, label=g.label)
    # float32 position storage rounds the +1m shift slightly
    assert abs(mpjpe(g, g2) - 1000.0) < 1e-2


def test_mpjpe_vs_loop_oracle_and_symmetry():
    rng = np.random.default_rng(4)
    a = synth_motion(0, 10, 3, seed=2)
    jb = a.joint_feats + rng.standard_normal(a.joint_feats.shape).astype(np.float32) * 0.1
    b = MotionGrid(jb, a.global_feats, fps=a.fps)
    total = 0.0
    for t in range(10):
        for j in range(3):
            d = a.joint_feats[t, j, :3].astype(np.float64) - jb[t, j, :3].astype(np.float64)
            total += np.sqrt((d**2).sum())
    want = total / 30 * 1000
    assert abs(mpjpe(a, b) - want) < 1e-9
    assert mpjpe(a, b) == mpjpe(b, a)
    assert mpjpe(a, b) > 0


def test_mpjpe_shape_mismatch():
    a = synth_motion(0, 10, 3, seed=2)
    b = synth_motion(0, 10, 4, seed=2)
    with pytest.raises(ValueError):
        mpjpe(a, b)


def test_motion_grid_invariants():
    with pytest.raises(ValueError):
        MotionGrid(np.zeros((0, 2, 12)), np.zeros((0, 11)))
    bad = np.zeros((4, 11), dtype=np.float32)
    bad[0, 8] = 1.5  # contact outside [0, 1]
    with pytest.raises(ValueError):
        MotionGrid(np.zeros((4, 2, 12)), bad)


def test_condition_embedding_provider():
    p = LabelTableProvider(4, d_text=32, seed=1)
    e = p.embed(2)
    assert isinstance(e, ConditionEmbedding)
    assert e.vector.shape == (32,)
    assert e.source == "label-table"
    assert np.array_equal(p.embed(2).vector, e.vector)
    with pytest.raises(ValueError):
        p.embed(4)
    with pytest.raises(ValueError):
        LabelTableProvider(1000)
