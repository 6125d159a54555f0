"""Generator semantics, the rule-based oracle, metrics, dataset layout."""

import json
import os

import numpy as np
import pytest

from relvid import vocab as vb
from relvid.container import read_container, write_container
from relvid.datagen import (RELATIONS, SHAPES, DatasetEntry, RelationSpec,
                            gen_video, read_dataset, relation_accuracy,
                            relation_oracle, temporal_consistency,
                            write_dataset)
from relvid.errors import ConfigError, DataError


def _centroid(mask_frame):
    ys, xs = np.nonzero(mask_frame)
    return np.array([xs.mean(), ys.mean()])


def _distances(entry):
    return np.array([
        np.linalg.norm(_centroid(entry.masks.m_s1[i]) -
                       _centroid(entry.masks.m_s2[i]))
        for i in range(entry.video.shape[0])
    ])


def test_video_values_and_mask_fidelity():
    e = gen_video(RelationSpec("approach", seed=3))
    assert e.video.shape == (8, 32, 32, 1)
    assert set(np.unique(e.video)) <= {0.0, 0.8, 1.0}
    np.testing.assert_array_equal(
        e.video[..., 0], np.maximum(e.masks.m_s1, 0.8 * e.masks.m_s2)
    )
    # union mask marks exactly the lit pixels
    np.testing.assert_array_equal(e.video[..., 0] > 0, e.masks.m_r > 0)
    assert set(np.unique(e.masks.m_s1)) <= {0.0, 1.0}
    # subject 1 renders at full intensity wherever its mask is set
    assert (e.video[..., 0][e.masks.m_s1 > 0] == 1.0).all()
    assert e.prompt == vb.encode(("circle", "approach", "square"))
    assert e.relation_id == "approach"


def test_determinism():
    a = gen_video(RelationSpec("orbit", "triangle", "cross", seed=11))
    b = gen_video(RelationSpec("orbit", "triangle", "cross", seed=11))
    np.testing.assert_array_equal(a.video, b.video)
    np.testing.assert_array_equal(a.masks.m_r, b.masks.m_r)
    c = gen_video(RelationSpec("orbit", "triangle", "cross", seed=12))
    assert not np.array_equal(a.video, c.video)


@pytest.mark.parametrize("seed", range(6))
def test_approach_and_separate_distances(seed):
    app = gen_video(RelationSpec("approach", seed=seed))
    d = _distances(app)
    assert d[0] > d[-1] and (np.diff(d) < 0.5).all()
    sep = gen_video(RelationSpec("separate", seed=seed))
    d = _distances(sep)
    assert d[-1] > d[0] and (np.diff(d) > -0.5).all()


@pytest.mark.parametrize("seed", range(6))
def test_orbit_constant_distance_with_sweep(seed):
    e = gen_video(RelationSpec("orbit", seed=seed))
    d = _distances(e)
    assert d.std() / d.mean() < 0.05
    c1 = np.array([_centroid(f) for f in e.masks.m_s1])
    c2 = np.array([_centroid(f) for f in e.masks.m_s2])
    off = c2 - c1
    ang = np.unwrap(np.arctan2(off[:, 1], off[:, 0]))
    assert abs(ang[-1] - ang[0]) > np.pi / 2


@pytest.mark.parametrize("seed", range(6))
def test_follow_constant_offset_with_motion(seed):
    e = gen_video(RelationSpec("follow", seed=seed))
    c1 = np.array([_centroid(f) for f in e.masks.m_s1])
    c2 = np.array([_centroid(f) for f in e.masks.m_s2])
    off = c2 - c1
    assert off.std(axis=0).max() < 0.5
    assert np.abs(np.diff(c1, axis=0)).sum(axis=1).mean() > 0.3


@pytest.mark.parametrize("seed", range(6))
def test_collide_merges_in_final_quarter(seed):
    e = gen_video(RelationSpec("collide", seed=seed))
    overlap = (e.masks.m_s1 * e.masks.m_s2).sum(axis=(1, 2))
    assert overlap[:4].sum() == 0          # separated early
    assert (overlap[-2:] > 0).all()        # merged footprints at the end


@pytest.mark.parametrize("relation", ["approach", "separate", "orbit",
                                      "follow"])
def test_subject_masks_disjoint_for_nonmerging_relations(relation):
    for seed in range(4):
        e = gen_video(RelationSpec(relation, seed=seed))
        assert (e.masks.m_s1 * e.masks.m_s2).sum() == 0


@pytest.mark.parametrize("relation", RELATIONS)
@pytest.mark.parametrize("seed", range(4))
def test_oracle_closes_the_loop(relation, seed):
    shapes = (SHAPES[seed % 4], SHAPES[(seed + 1) % 4])
    e = gen_video(RelationSpec(relation, *shapes, seed=100 + seed))
    assert relation_oracle(e.video) == relation


def test_gen_video_validation():
    with pytest.raises(ConfigError):
        RelationSpec("hover")
    with pytest.raises(ConfigError):
        RelationSpec("approach", shape1="blob")
    with pytest.raises(ConfigError):
        gen_video(RelationSpec("approach"), frames=3)
    with pytest.raises(ConfigError):
        gen_video(RelationSpec("approach"), height=16)
    with pytest.raises(ConfigError):
        gen_video(RelationSpec("approach", start1=(16.0, 16.0),
                               start2=(16.0, 16.0)))
    with pytest.raises(ConfigError):
        gen_video(RelationSpec("follow", speed=40.0))   # leaves the frame
    with pytest.raises(ConfigError):
        gen_video(RelationSpec("approach", start1=(1.0, 1.0)))  # margin


def _block_video(cols1, cols2, row=16, frames=None):
    """3x3 blocks of intensity 1.0 / 0.8 at given column centers."""
    frames = frames or len(cols1)
    v = np.zeros((frames, 32, 32))
    for i, (c1, c2) in enumerate(zip(cols1, cols2)):
        v[i, row - 1:row + 2, c1 - 1:c1 + 2] = 1.0
        v[i, row - 1:row + 2, c2 - 1:c2 + 2] = 0.8
    return v


def test_oracle_hand_built_cases():
    # monotone shrinking gap -> approach
    assert relation_oracle(_block_video([4, 6, 8, 10], [28, 26, 24, 22])) \
        == "approach"
    # monotone growing gap -> separate
    assert relation_oracle(_block_video([10, 8, 6, 4], [22, 24, 26, 28])) \
        == "separate"
    # frozen scene: no motion, no ordering -> unknown
    assert relation_oracle(_block_video([8] * 4, [24] * 4)) == "unknown"
    assert relation_oracle(np.zeros((4, 32, 32))) == "unknown"
    # single subject -> unknown
    v = np.zeros((4, 32, 32))
    v[:, 15:18, 15:18] = 1.0
    assert relation_oracle(v) == "unknown"
    with pytest.raises(ConfigError):
        relation_oracle(np.zeros((32, 32)))


def test_oracle_hand_built_follow_and_collide():
    # constant offset, shared motion -> follow
    cols1 = [6, 8, 10, 12, 14]
    v = _block_video(cols1, [c + 10 for c in cols1])
    assert relation_oracle(v) == "follow"
    # shrinking gap then a merged blob -> collide
    v = _block_video([8, 10, 12, 14], [24, 22, 20, 18], frames=5)
    v[4, 15:18, 15:20] = 1.0
    assert relation_oracle(v) == "collide"


def test_temporal_consistency_identities():
    frame = np.random.default_rng(0).random((1, 16, 16, 1))
    still = np.repeat(frame, 5, axis=0)
    assert temporal_consistency(still) == 1.0
    flip = np.concatenate([frame, -frame, frame, -frame], axis=0)
    assert temporal_consistency(flip) == -1.0
    rng = np.random.default_rng(1)
    v = rng.random((4, 8, 8))
    assert temporal_consistency(3.0 * v) == \
        pytest.approx(temporal_consistency(v), rel=1e-12)
    near = still.copy()
    near += rng.normal(0.0, 1e-3, near.shape)
    assert temporal_consistency(near) > 0.99
    with pytest.raises(ConfigError):
        temporal_consistency(np.zeros((16, 16)))
    with pytest.raises(ConfigError):
        temporal_consistency(np.zeros((1, 16, 16)))


def test_temporal_consistency_zero_frames_warn():
    v = np.zeros((3, 4, 4))
    v[1] = 1.0
    with pytest.warns(RuntimeWarning):
        temporal_consistency(v)


def test_relation_accuracy_counts():
    vids = [gen_video(RelationSpec("approach", seed=s)).video
            for s in range(3)]
    assert relation_accuracy(vids, "approach") == 1.0
    vids.append(np.zeros((4, 32, 32, 1)))
    assert relation_accuracy(vids, "approach") == 0.75
    with pytest.raises(ConfigError):
        relation_accuracy(vids, "hover")
    with pytest.raises(ConfigError):
        relation_accuracy([], "approach")


def test_dataset_roundtrip(tmp_path):
    root = str(tmp_path / "data")
    entries = [gen_video(RelationSpec("approach", seed=s)) for s in range(2)]
    entries.append(gen_video(RelationSpec("orbit", "cross", "triangle",
                                          seed=5)))
    write_dataset(entries, root)
    with open(os.path.join(root, "README.txt"), "w") as f:
        f.write("stray file, must be ignored\n")
    back = read_dataset(root)
    assert len(back) == 3
    for orig, got in zip(entries, back):
        np.testing.assert_array_equal(orig.video, got.video)
        np.testing.assert_array_equal(orig.masks.m_r, got.masks.m_r)
        assert got.prompt == list(orig.prompt)
        assert got.relation_id == orig.relation_id
    assert back[0].uid == "entry_00000"
    assert back[2].uid == "entry_00002"


def test_read_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        read_dataset(str(tmp_path / "missing"))
    root = str(tmp_path / "data")
    write_dataset([gen_video(RelationSpec("approach", seed=0))], root)
    sub = os.path.join(root, "entry_00000")

    meta_path = os.path.join(sub, "meta.json")
    meta = json.load(open(meta_path))
    del meta["relation"]
    json.dump(meta, open(meta_path, "w"))
    with pytest.raises(DataError, match="entry_00000"):
        read_dataset(root)
    meta["relation"] = "hover"
    json.dump(meta, open(meta_path, "w"))
    with pytest.raises(DataError, match="hover"):
        read_dataset(root)
    meta["relation"] = "approach"
    meta["format_version"] = 9
    json.dump(meta, open(meta_path, "w"))
    with pytest.raises(DataError, match="format_version"):
        read_dataset(root)
    with open(meta_path, "w") as f:
        f.write("{broken")
    with pytest.raises(DataError, match="JSON"):
        read_dataset(root)


def test_read_dataset_mask_mismatch(tmp_path):
    root = str(tmp_path / "data")
    e = gen_video(RelationSpec("approach", seed=0))
    write_dataset([e], root)
    sub = os.path.join(root, "entry_00000")
    write_container(os.path.join(sub, "masks.ntv"),
                    {"m_s1": e.masks.m_s1, "m_s2": e.masks.m_s2})
    with pytest.raises(DataError, match="m_r"):
        read_dataset(root)
    write_container(os.path.join(sub, "masks.ntv"),
                    {"m_s1": e.masks.m_s1[:4], "m_s2": e.masks.m_s2,
                     "m_r": e.masks.m_r})
    with pytest.raises(DataError, match="m_s1"):
        read_dataset(root)


def test_read_dataset_empty_root(tmp_path):
    root = str(tmp_path / "empty")
    os.makedirs(root)
    assert read_dataset(root) == []
