"""Synthetic shape world: rasterization, channel lift, frozen teacher, and
dataset serialization."""

import numpy as np
import pytest

from semtok import synth


def _reference_field(spec, h, w):
    # independent rasterizer: same geometry, written scalar-by-scalar rather
    # than through silhouette's vectorized path; draws pose the way the
    # contract defines it (first two uniforms of default_rng(seed), in 2pi)
    size, aspect, roundness = spec.attributes
    p_class = [2.0, 4.0, 1.3, 8.0, 2.5, 1.7, 6.0, 3.2][spec.class_id % 8]
    m = [0, 3, 4, 5, 2, 6, 7, 8][spec.class_id % 8]
    r0 = 0.35 + 0.35 * size
    s = 2.0 ** (2.0 * aspect - 1.0)
    ax, ay = r0 * np.sqrt(s), r0 / np.sqrt(s)
    p = 2.0 + (p_class - 2.0) * (1.0 - roundness)
    amp = 0.15 * (1.0 - roundness)
    pose_rng = np.random.default_rng(spec.seed)
    theta = pose_rng.uniform(0.0, 2.0 * np.pi)
    psi = pose_rng.uniform(0.0, 2.0 * np.pi)
    field = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            y = (i + 0.5) / h * 2.0 - 1.0
            x = (j + 0.5) / w * 2.0 - 1.0
            u = x * np.cos(theta) + y * np.sin(theta)
            v = -x * np.sin(theta) + y * np.cos(theta)
            rho = (abs(u / ax) ** p + abs(v / ay) ** p) ** (1.0 / p)
            phi = np.arctan2(v, u)
            field[i, j] = 1.0 + amp * np.cos(m * phi - psi) - rho
    return field


def test_silhouette_matches_reference_rasterizer():
    spec = synth.ShapeSpec(1, np.array([0.2, 0.5, 0.3]), 17)
    np.testing.assert_allclose(synth.silhouette(spec, 32, 32),
                               _reference_field(spec, 32, 32), atol=1e-12)


def test_occupancy_counts_frozen_pair():
    # same spec except size; frozen counts, cross-checked against the
    # reference rasterizer, and the relative gap the attribute should produce
    a = synth.ShapeSpec(1, np.array([0.2, 0.5, 0.3]), 17)
    b = synth.ShapeSpec(1, np.array([0.7, 0.5, 0.3]), 17)
    ca = synth.occupancy_count(a, 32, 32)
    cb = synth.occupancy_count(b, 32, 32)
    assert (ca, cb) == (165, 330)
    assert ca == int((_reference_field(a, 32, 32) > 0).sum())
    assert cb == int((_reference_field(b, 32, 32) > 0).sum())
    assert abs(cb - ca) / max(ca, cb) > 0.10


def test_circle_rot90_invariance_exact():
    # roundness 1 kills both the exponent deformation and the lobes; aspect
    # 0.5 gives equal axes; the positional channels are radial, so a quarter
    # turn permutes cells exactly whatever rotation the pose seed lands on
    for seed in (0, 4242):
        spec = synth.ShapeSpec(0, np.array([0.5, 0.5, 1.0]), seed)
        grid = synth.gen_shape(spec, 16, 16, 8).values
        assert np.abs(grid - np.rot90(grid, k=1, axes=(1, 2))).max() == 0.0


def test_gen_shape_validates_dims():
    spec = synth.ShapeSpec(0, np.array([0.5, 0.5, 0.5]), 0)
    with pytest.raises(ValueError):
        synth.gen_shape(spec, 4, 16, 8)
    with pytest.raises(ValueError):
        synth.gen_shape(spec, 16, 16, 0)


def test_shape_spec_validates_attributes():
    with pytest.raises(ValueError):
        synth.ShapeSpec(0, np.array([0.5, 0.5, 0.5, 0.5]), 0)
    with pytest.raises(ValueError):
        synth.ShapeSpec(0, np.array([0.5, 0.5, 1.5]), 0)


def test_gen_shape_deterministic():
    spec = synth.ShapeSpec(3, np.array([0.4, 0.7, 0.1]), 99)
    a = synth.gen_shape(spec, 16, 16, 8).values
    b = synth.gen_shape(spec, 16, 16, 8).values
    np.testing.assert_array_equal(a, b)


def test_pose_changes_grid_but_not_teacher():
    # two records sharing class and attributes, different pose seeds: the
    # grids must differ materially while the global teacher cannot move at
    # all, since it never sees pose
    attrs = np.array([0.6, 0.3, 0.2])
    a = synth.ShapeSpec(1, attrs, 7)
    b = synth.ShapeSpec(1, attrs, 8)
    ga = synth.gen_shape(a, 16, 16, 8)
    gb = synth.gen_shape(b, 16, 16, 8)
    assert np.abs(ga.values - gb.values).max() > 0.1
    ea = synth.teacher_embed(a, ga, n_classes=4)
    eb = synth.teacher_embed(b, gb, n_classes=4)
    np.testing.assert_array_equal(ea.global_, eb.global_)
    assert not np.allclose(ea.spatial, eb.spatial)


def test_teacher_embedding_unit_norm_and_deterministic():
    spec = synth.ShapeSpec(2, np.array([0.3, 0.6, 0.2]), 0)
    grid = synth.gen_shape(spec, 16, 16, 8)
    e1 = synth.teacher_embed(spec, grid, n_classes=4)
    e2 = synth.teacher_embed(spec, grid, n_classes=4)
    assert np.linalg.norm(e1.global_) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_array_equal(e1.global_, e2.global_)
    np.testing.assert_array_equal(e1.spatial, e2.spatial)


def _teacher_globals(specs, n_classes=4):
    out = []
    for s in specs:
        grid = synth.gen_shape(s, 16, 16, 8)
        out.append(synth.teacher_embed(s, grid, n_classes).global_)
    return np.stack(out)


def test_teacher_class_margin():
    # mean same-class cosine minus mean cross-class cosine; the teacher has to
    # separate classes clearly or threshold mining falls apart downstream
    rng = np.random.default_rng(0)
    specs = [synth.ShapeSpec(i % 4, rng.uniform(0.1, 0.9, size=3), i) for i in range(40)]
    cos = _teacher_globals(specs) @ _teacher_globals(specs).T
    same = np.array([[a.class_id == b.class_id for b in specs] for a in specs])
    off = ~np.eye(40, dtype=bool)
    margin = cos[same & off].mean() - cos[~same].mean()
    assert margin > 0.1


def test_teacher_nearest_neighbor_purity():
    rng = np.random.default_rng(1)
    specs = [synth.ShapeSpec(i % 4, rng.uniform(0.1, 0.9, size=3), i) for i in range(60)]
    embs = _teacher_globals(specs)
    cos = embs @ embs.T
    np.fill_diagonal(cos, -np.inf)
    nn = cos.argmax(axis=1)
    purity = np.mean([specs[i].class_id == specs[j].class_id for i, j in enumerate(nn)])
    assert purity >= 0.8


def test_sample_specs_round_robin_uniform():
    specs = synth.sample_specs(40, n_classes=4, seed=5)
    counts = np.bincount([s.class_id for s in specs], minlength=4)
    np.testing.assert_array_equal(counts, [10, 10, 10, 10])


def test_sample_specs_seed_sensitivity():
    a = synth.sample_specs(8, n_classes=4, seed=1)
    b = synth.sample_specs(8, n_classes=4, seed=2)
    assert any(not np.array_equal(x.attributes, y.attributes) for x, y in zip(a, b))


def test_dataset_roundtrip_bit_exact(tmp_path):
    path = tmp_path / "ds.bin"
    ds = synth.build_dataset(12, 4, seed=3, out_path=path)
    back = synth.load_dataset(path)
    assert len(back) == 12
    np.testing.assert_array_equal(back.grids, ds.grids)
    np.testing.assert_array_equal(back.globals_, ds.globals_)
    np.testing.assert_array_equal(back.spatials, ds.spatials)
    np.testing.assert_array_equal(back.class_ids, ds.class_ids)
    np.testing.assert_array_equal(back.attributes, ds.attributes)
    assert [s.seed for s in back.specs] == [s.seed for s in ds.specs]


def test_dataset_same_seed_identical_bytes(tmp_path):
    a = synth.build_dataset(6, 4, seed=9, out_path=tmp_path / "a.bin")
    b = synth.build_dataset(6, 4, seed=9, out_path=tmp_path / "b.bin")
    np.testing.assert_array_equal(a.grids, b.grids)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_load_dataset_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        synth.load_dataset(tmp_path / "absent.bin")


def test_load_dataset_bad_magic(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"ZZZZ" + b"\x00" * 40)
    with pytest.raises(ValueError, match="not a dataset"):
        synth.load_dataset(bad)
