import numpy as np
import pytest

from platoon_dmpc.topology import (
    Topology,
    TopologyError,
    consensus_matrix,
    degree_matrix,
    from_preset,
    has_spanning_tree,
    info_set,
    is_unidirectional,
    laplacian,
    leader_set,
    neighbor_set,
    nilpotency_degree,
    numeric_nilpotency_degree,
    out_set,
    pinning_matrix,
    random_spanning_tree_topology,
    spectral_report,
)


def test_presets_small():
    pf = from_preset("PF", 3)
    assert pf.adjacency.tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    assert pf.pinning.tolist() == [1, 0, 0]
    tpf = from_preset("TPF", 3)
    assert tpf.adjacency.tolist() == [[0, 0, 0], [1, 0, 0], [1, 1, 0]]
    assert tpf.pinning.tolist() == [1, 1, 0]
    plf = from_preset("PLF", 1)
    assert plf.adjacency.tolist() == [[0]] and plf.pinning.tolist() == [1]
    tplf = from_preset("tplf", 4)
    assert tplf.pinning.tolist() == [1, 1, 1, 1]
    assert tplf.adjacency.tolist() == from_preset("TPF", 4).adjacency.tolist()


def test_preset_rejects_bad_input():
    with pytest.raises(ValueError):
        from_preset("PF", 0)
    with pytest.raises(ValueError):
        from_preset("RING", 3)


def test_structure_validation():
    with pytest.raises(TopologyError):
        Topology(np.array([[1, 0], [0, 0]]), [1, 0])
    with pytest.raises(TopologyError):
        Topology(np.array([[0, 2], [0, 0]]), [1, 0])
    with pytest.raises(TopologyError):
        Topology(np.zeros((2, 2)), [1, 0, 0])
    with pytest.raises(TopologyError):
        Topology.from_edges(3, [(1, 4)], [1])


def test_edges_round_trip():
    t = from_preset("TPF", 5)
    again = Topology.from_edges(5, t.edges(), t.pins())
    assert np.array_equal(again.adjacency, t.adjacency)
    assert np.array_equal(again.pinning, t.pinning)


def test_degree_and_laplacian():
    assert np.array_equal(degree_matrix(from_preset("PF", 3)), np.diag([0, 1, 1]))
    assert np.array_equal(degree_matrix(from_preset("TPF", 3)), np.diag([0, 1, 2]))
    assert np.array_equal(laplacian(from_preset("PF", 3)), [[0, 0, 0], [-1, 1, 0], [0, -1, 1]])
    zero = Topology(np.zeros((3, 3)), [1, 1, 1])
    assert not degree_matrix(zero).any() and not laplacian(zero).any()
    assert np.allclose(laplacian(from_preset("TPLF", 7)).sum(axis=1), 0)
    assert np.array_equal(pinning_matrix(from_preset("TPF", 3)), np.diag([1, 1, 0]))


def test_sets():
    pf = from_preset("PF", 3)
    assert neighbor_set(pf, 2) == {1}
    assert out_set(pf, 2) == {3}
    assert leader_set(pf, 2) == set()
    assert info_set(pf, 2) == {1}
    tpf = from_preset("TPF", 3)
    assert neighbor_set(tpf, 1) == set()
    assert out_set(tpf, 1) == {2, 3}
    assert leader_set(tpf, 1) == {0}
    assert info_set(tpf, 1) == {0}
    with pytest.raises(IndexError):
        neighbor_set(pf, 4)


def test_undirected_sets_coincide():
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    t = Topology(a, [1, 0, 0])
    for i in range(1, 4):
        assert neighbor_set(t, i) == out_set(t, i)


def test_spanning_tree():
    assert has_spanning_tree(from_preset("PF", 7))
    assert not has_spanning_tree(Topology(np.zeros((3, 3)), [0, 0, 0]))
    pf = from_preset("PF", 3)
    assert not has_spanning_tree(Topology(pf.adjacency, [0, 0, 0]))


def test_unidirectional():
    for kind in ("PF", "PLF", "TPF", "TPLF"):
        for n in (1, 2, 5, 9):
            assert is_unidirectional(from_preset(kind, n))
    assert not is_unidirectional(Topology(np.array([[0, 1], [1, 0]]), [1, 0]))
    assert is_unidirectional(Topology(np.zeros((2, 2)), [1, 1]))


def test_consensus_matrix():
    assert np.array_equal(consensus_matrix(from_preset("PF", 3)), [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert np.allclose(consensus_matrix(from_preset("TPF", 3)), [[0, 0, 0], [0.5, 0, 0], [0.5, 0.5, 0]])
    with pytest.raises(TopologyError):
        consensus_matrix(Topology(np.zeros((2, 2)), [1, 0]))


def test_spectral_report():
    rep = spectral_report(from_preset("PF", 3))
    assert rep.eigenvalue_magnitudes == [0.0, 0.0, 0.0]
    assert rep.spectral_radius == 0.0
    assert rep.nilpotency_degree == 3
    assert spectral_report(from_preset("TPF", 3)).spectral_radius == 0.0


def test_nilpotency_exact_and_numeric_agree():
    m = consensus_matrix(from_preset("TPF", 7))
    assert nilpotency_degree(from_preset("TPF", 7)) == numeric_nilpotency_degree(m) == 7
    cyc = Topology(np.array([[0, 1], [1, 0]]), [1, 0])
    assert nilpotency_degree(cyc) == "not nilpotent"
    assert spectral_report(cyc).spectral_radius == pytest.approx(np.sqrt(0.5))


def test_random_generator_respects_class():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = random_spanning_tree_topology(rng, 6)
        assert has_spanning_tree(t) and is_unidirectional(t)
    t = random_spanning_tree_topology(rng, 6, unidirectional=False, density=0.5)
    assert has_spanning_tree(t)
