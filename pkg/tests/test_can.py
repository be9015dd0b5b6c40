import numpy as np
import pytest

from dpfaga.can import (
    CanGraph, RankNotAchieved, adaptive_k_select, assign_neighbors,
    build_can_graph, count_components, enforce_rank_constraint, laplacian_of,
    pairwise_distances, save_can_graph,
)


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / (np.arange(len(v)) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def three_blobs(rng, pts=20, sep=10.0, sd=0.5):
    centers = np.array([[0.0, 0.0], [sep, 0.0], [0.0, sep]])
    z = np.vstack([c + sd * rng.standard_normal((pts, 2)) for c in centers])
    labels = np.repeat(np.arange(3), pts)
    return z, labels


def test_pairwise_identical_rows():
    z = np.ones((4, 3))
    assert np.max(np.abs(pairwise_distances(z))) == 0.0


def test_pairwise_1d_points():
    d = pairwise_distances(np.array([[0.0], [3.0]]))
    assert d[0, 1] == 9.0 and d[1, 0] == 9.0
    assert d[0, 0] == 0.0


def test_pairwise_matches_double_loop():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((20, 5))
    d = pairwise_distances(z)
    for i in range(20):
        for j in range(20):
            naive = float(np.sum((z[i] - z[j]) ** 2))
            assert abs(d[i, j] - naive) < 1e-12
    assert np.max(np.abs(d - d.T)) == 0.0


def test_assign_k1_nearest_neighbor():
    rng = np.random.default_rng(1)
    d = pairwise_distances(rng.standard_normal((10, 2)))
    s, _ = assign_neighbors(d, 1)
    for i in range(10):
        nz = np.nonzero(s[i])[0]
        assert len(nz) == 1
        assert s[i, nz[0]] == 1.0
        others = np.delete(np.arange(10), i)
        assert nz[0] == others[np.argmin(d[i][others])]


def test_assign_hand_computed_row():
    # row distances (sorted) 1, 2, 4 with k = 2: weights 0.6 and 0.4
    d = np.array([
        [0.0, 1.0, 2.0, 4.0],
        [1.0, 0.0, 9.0, 9.0],
        [2.0, 9.0, 0.0, 9.0],
        [4.0, 9.0, 9.0, 0.0],
    ])
    s, gamma = assign_neighbors(d, 2)
    assert abs(s[0, 1] - 0.6) < 1e-12
    assert abs(s[0, 2] - 0.4) < 1e-12
    assert s[0, 3] == 0.0
    assert abs(gamma[0] - (2 * 4.0 - 3.0) / 2.0) < 1e-12


def test_assign_matches_simplex_projection_solver():
    # with gamma fixed at the closed-form value, the row must equal the
    # numeric simplex projection of -d/(2 gamma)
    rng = np.random.default_rng(2)
    d = pairwise_distances(rng.standard_normal((12, 3)))
    k = 4
    s, gamma = assign_neighbors(d, k)
    for i in range(12):
        others = np.delete(np.arange(12), i)
        numeric = project_simplex(-d[i][others] / (2.0 * gamma[i]))
        assert np.max(np.abs(s[i][others] - numeric)) < 1e-10


def test_rows_stochastic_sparse_monotone():
    rng = np.random.default_rng(3)
    for trial in range(10):
        z = rng.standard_normal((15, 4))
        d = pairwise_distances(z)
        k = int(rng.integers(1, 14))
        s, _ = assign_neighbors(d, k)
        assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-10
        assert np.all(np.diag(s) == 0.0)
        assert np.all(s >= 0.0) and np.all(s <= 1.0)
        for i in range(15):
            assert np.count_nonzero(s[i]) == k
            # monotone: smaller distance never gets less weight
            nz = np.nonzero(s[i])[0]
            order = nz[np.argsort(d[i][nz])]
            w = s[i][order]
            assert np.all(np.diff(w) <= 1e-12)


def test_closed_form_beats_uniform_objective():
    rng = np.random.default_rng(4)
    d = pairwise_distances(rng.standard_normal((20, 3)))
    k = 5
    s, gamma = assign_neighbors(d, k)
    for i in range(20):
        nz = np.nonzero(s[i])[0]
        obj_closed = float((d[i][nz] * s[i][nz]).sum() + gamma[i] * (s[i][nz] ** 2).sum())
        uni = np.full(len(nz), 1.0 / len(nz))
        obj_uniform = float((d[i][nz] * uni).sum() + gamma[i] * (uni ** 2).sum())
        assert obj_closed <= obj_uniform + 1e-12


def test_tied_row_uniform_fallback():
    # four equidistant points (regular simplex): every off-diagonal distance equal
    z = np.eye(4)
    d = pairwise_distances(z)
    s, _ = assign_neighbors(d, 2)
    for i in range(4):
        nz = np.nonzero(s[i])[0]
        assert len(nz) == 3  # whole tied set shares the weight
        assert np.max(np.abs(s[i][nz] - 1.0 / 3.0)) < 1e-12


def test_three_blobs_three_components():
    rng = np.random.default_rng(5)
    z, labels = three_blobs(rng)
    g = build_can_graph(z, c=3, k=5)
    assert g.n_components == 3
    _, comp = count_components(g.s)
    # perfect purity: component labels refine blob labels exactly
    for c_id in range(3):
        blobs = labels[comp == c_id]
        assert len(set(blobs.tolist())) == 1


def test_c1_connected_returns_initial():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((25, 2))
    d = pairwise_distances(z)
    s0, gamma0 = assign_neighbors(d, 8)
    n0, _ = count_components(s0)
    assert n0 == 1
    g = enforce_rank_constraint(s0, d, c=1, k=8, gamma=gamma0)
    assert g.n_components == 1
    assert np.array_equal(g.s, s0)


def test_c_equals_n_raises_rank_not_achieved():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((10, 2))
    with pytest.raises(RankNotAchieved) as exc:
        build_can_graph(z, c=10, k=2, max_outer=8)
    assert exc.value.achieved_c < 10


def test_laplacian_psd_and_zero_eigs_count_components():
    rng = np.random.default_rng(8)
    z, _ = three_blobs(rng, pts=15)
    g = build_can_graph(z, c=3, k=5)
    evals = np.linalg.eigvalsh(g.laplacian)
    assert evals.min() >= -1e-10
    assert int(np.sum(evals < 1e-8)) == g.n_components


def test_adaptive_k_single_candidate():
    rng = np.random.default_rng(9)
    d = pairwise_distances(rng.standard_normal((12, 2)))
    assert adaptive_k_select(d, [5]) == 5


def test_adaptive_k_uniform_grid_prefers_smallest():
    xs, ys = np.meshgrid(np.arange(6, dtype=float), np.arange(6, dtype=float))
    z = np.c_[xs.ravel(), ys.ravel()]
    d = pairwise_distances(z)
    assert adaptive_k_select(d, [3, 5, 7]) == 3


def test_adaptive_k_two_scale_purity():
    # tight cluster plus sparse halo: chosen k keeps tight neighborhoods pure
    rng = np.random.default_rng(10)
    tight = 0.05 * rng.standard_normal((30, 2))
    halo = 4.0 * rng.standard_normal((30, 2)) + np.array([50.0, 0.0])
    z = np.vstack([tight, halo])
    d = pairwise_distances(z)
    k = adaptive_k_select(d, [3, 5, 10, 20, 25])
    pure = 0
    for i in range(30):
        others = np.delete(np.arange(60), i)
        idx = others[np.argsort(d[i][others])[:k]]
        if np.all(idx < 30):
            pure += 1
    assert pure / 30 >= 0.95


def test_save_can_graph_schema(tmp_path):
    import json
    rng = np.random.default_rng(11)
    z, _ = three_blobs(rng, pts=10)
    g = build_can_graph(z, c=3, k=4)
    p = tmp_path / "graph.json"
    save_can_graph(g, c_requested=3, path=p)
    payload = json.loads(p.read_text())
    assert payload["n"] == 30
    assert payload["c_requested"] == 3 and payload["c_achieved"] == 3
    assert len(payload["gamma"]) == 30
    assert all(set(e) == {"i", "j", "s_ij"} for e in payload["edges"])
