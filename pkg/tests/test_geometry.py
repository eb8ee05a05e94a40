"""Radius graphs, padding contracts, and rigid-motion utilities."""

import numpy as np
import pytest

from escaip.errors import ConfigError, ContractError, DataError
from escaip.geometry import (AtomicSystem, Rotation, apply_rotation, build_neighbor_graph,
                             displacement_table, identity_rotation, random_rotation,
                             rotation_about_z, translate, PAD_INDEX)


def test_two_atoms_within_cutoff():
    sys_ = AtomicSystem(species=[1, 1], positions=[[0, 0, 0], [1.0, 0, 0]])
    g = build_neighbor_graph(sys_, cutoff=2.0, max_neighbors=4)
    assert g.valid_counts.tolist() == [1, 1]
    assert g.neighbor_index[0, 0] == 1 and g.neighbor_index[1, 0] == 0
    np.testing.assert_allclose(g.distances[:, 0], [1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(g.unit_dirs[0, 0], [1.0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(g.unit_dirs[1, 0], [-1.0, 0, 0], atol=1e-15)
    assert np.all(g.neighbor_index[:, 1:] == PAD_INDEX)
    assert not g.valid_mask[:, 1:].any()


def test_two_atoms_outside_cutoff():
    sys_ = AtomicSystem(species=[1, 1], positions=[[0, 0, 0], [3.0, 0, 0]])
    g = build_neighbor_graph(sys_, cutoff=2.0, max_neighbors=4)
    assert g.valid_counts.tolist() == [0, 0]
    assert g.isolated_mask.all()


def test_cutoff_boundary_is_inclusive():
    sys_ = AtomicSystem(species=[1, 1], positions=[[0, 0, 0], [2.0, 0, 0]])
    g = build_neighbor_graph(sys_, cutoff=2.0, max_neighbors=2)
    assert g.valid_counts.tolist() == [1, 1]


def test_periodic_matches_brute_force_oracle(rng):
    edge = 6.0
    pos = rng.uniform(0, edge, size=(20, 3))
    sys_ = AtomicSystem(species=[18] * 20, positions=pos, cell=[edge] * 3,
                        pbc=(True, True, True))
    cutoff = 2.5
    g = build_neighbor_graph(sys_, cutoff=cutoff, max_neighbors=19)

    # O(N^2) oracle: explicit minimum-image scan
    for i in range(20):
        expected = set()
        for j in range(20):
            if i == j:
                continue
            d = sys_.positions[j] - sys_.positions[i]
            d -= edge * np.round(d / edge)
            if np.linalg.norm(d) <= cutoff:
                expected.add(j)
        got = set(g.neighbor_index[i, g.valid_mask[i]].tolist())
        assert got == expected, f"atom {i}"


def test_periodic_unit_dirs_use_minimum_image():
    sys_ = AtomicSystem(species=[1, 1], positions=[[0.2, 0, 0], [5.8, 0, 0]],
                        cell=[6.0, 6.0, 6.0], pbc=(True, True, True))
    g = build_neighbor_graph(sys_, cutoff=1.0, max_neighbors=2)
    np.testing.assert_allclose(g.distances[0, 0], 0.4, atol=1e-12)
    np.testing.assert_allclose(g.unit_dirs[0, 0], [-1.0, 0, 0], atol=1e-12)


def test_truncation_keeps_nearest_with_index_tiebreak():
    # four equidistant neighbors; only two slots: lowest indices win
    pos = [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]]
    sys_ = AtomicSystem(species=[6] * 5, positions=pos)
    g = build_neighbor_graph(sys_, cutoff=1.5, max_neighbors=2)
    assert g.neighbor_index[0].tolist() == [1, 2]
    # nearest-first ordering when distances differ
    pos2 = [[0, 0, 0], [2, 0, 0], [1, 0, 0]]
    g2 = build_neighbor_graph(AtomicSystem(species=[6] * 3, positions=pos2),
                              cutoff=3.0, max_neighbors=2)
    assert g2.neighbor_index[0].tolist() == [2, 1]


def test_minimum_image_bound_enforced():
    sys_ = AtomicSystem(species=[1], positions=[[0, 0, 0]], cell=[4.0, 4.0, 4.0],
                        pbc=(True, True, True))
    with pytest.raises(ConfigError):
        build_neighbor_graph(sys_, cutoff=2.0, max_neighbors=2)
    with pytest.raises(ConfigError):
        build_neighbor_graph(sys_, cutoff=-1.0, max_neighbors=2)
    with pytest.raises(ConfigError):
        build_neighbor_graph(sys_, cutoff=1.0, max_neighbors=0)


def test_non_finite_coordinates_rejected():
    with pytest.raises(DataError):
        AtomicSystem(species=[1], positions=[[np.nan, 0, 0]])
    with pytest.raises(DataError):
        AtomicSystem(species=[1, 1], positions=[[0, 0, 0]])


def test_periodic_positions_wrapped():
    sys_ = AtomicSystem(species=[1], positions=[[7.0, -1.0, 2.0]],
                        cell=[6.0, 6.0, 6.0], pbc=(True, True, True))
    np.testing.assert_allclose(sys_.positions[0], [1.0, 5.0, 2.0], atol=1e-12)


# ---------------------------------------------------------------------------
# rotations

def test_random_rotation_deterministic():
    r1 = random_rotation(42)
    r2 = random_rotation(42)
    np.testing.assert_array_equal(r1.matrix, r2.matrix)
    assert not np.array_equal(r1.matrix, random_rotation(43).matrix)


def test_random_rotation_group_membership():
    for seed in range(25):
        r = random_rotation(seed)
        assert np.abs(r.matrix.T @ r.matrix - np.eye(3)).max() <= 1e-12
        assert abs(np.linalg.det(r.matrix) - 1.0) <= 1e-12


def test_random_rotation_haar_mean():
    # E[R] = 0 under the Haar measure
    rng = np.random.default_rng(7)
    total = np.zeros((3, 3))
    n = 100_000
    for _ in range(n):
        total += random_rotation(rng).matrix
    assert np.abs(total / n).max() <= 0.02


def test_rotation_validation():
    with pytest.raises(ContractError):
        Rotation(np.eye(3) * 2.0)
    with pytest.raises(ContractError):
        Rotation(np.diag([1.0, 1.0, -1.0]))  # improper


def test_apply_identity_rotation(cluster_factory):
    sys_ = cluster_factory(4)
    out = apply_rotation(sys_, identity_rotation())
    np.testing.assert_array_equal(out.positions, sys_.positions)
    np.testing.assert_array_equal(out.species, sys_.species)


def test_apply_rotation_quarter_turn():
    sys_ = AtomicSystem(species=[1], positions=[[1.0, 0.0, 0.0]])
    out = apply_rotation(sys_, rotation_about_z(np.pi / 2))
    np.testing.assert_allclose(out.positions[0], [0.0, 1.0, 0.0], atol=1e-15)


def test_apply_rotation_preserves_distances(cluster_factory):
    sys_ = cluster_factory(6)
    rot = random_rotation(3)
    out = apply_rotation(sys_, rot)
    d0 = displacement_table(sys_.positions)
    d1 = displacement_table(out.positions)
    dist0 = np.sqrt((d0 * d0).sum(-1))
    dist1 = np.sqrt((d1 * d1).sum(-1))
    assert np.abs(dist0 - dist1).max() <= 1e-12


def test_apply_rotation_rotates_force_labels(cluster_factory, rng):
    sys_ = cluster_factory(4)
    sys_.forces = rng.normal(size=(4, 3))
    rot = random_rotation(5)
    out = apply_rotation(sys_, rot)
    np.testing.assert_allclose(out.forces, sys_.forces @ rot.matrix.T, atol=1e-14)


def test_apply_rotation_rejects_periodic():
    sys_ = AtomicSystem(species=[1], positions=[[0, 0, 0]], cell=[5, 5, 5],
                        pbc=(True, True, True))
    with pytest.raises(ContractError):
        apply_rotation(sys_, random_rotation(0))


def test_graph_commutes_with_rigid_motion(cluster_factory):
    sys_ = cluster_factory(8, scale=1.4)
    rot = random_rotation(11)
    moved = translate(apply_rotation(sys_, rot), [1.0, -2.0, 0.5])
    g0 = build_neighbor_graph(sys_, cutoff=2.5, max_neighbors=5)
    g1 = build_neighbor_graph(moved, cutoff=2.5, max_neighbors=5)
    np.testing.assert_array_equal(g0.neighbor_index, g1.neighbor_index)
    np.testing.assert_array_equal(g0.valid_mask, g1.valid_mask)
    assert np.abs(g0.distances - g1.distances).max() <= 1e-12
    rotated_dirs = g0.unit_dirs @ rot.matrix.T
    assert np.abs(np.where(g0.valid_mask[..., None], rotated_dirs - g1.unit_dirs, 0)).max() <= 1e-12
