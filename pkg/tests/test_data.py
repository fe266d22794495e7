import numpy as np
import pytest
import scipy.sparse.csgraph as csgraph
from hypothesis import given, settings
from hypothesis import strategies as st

from twirls.data import (Dataset, DatasetError, dataset_hash, gen_chains, gen_sbm, load_dataset,
                         make_splits, perturb_edges, save_dataset)
from twirls.graph import build_graph, homophily_ratio
from twirls.model import TrainConfig, evaluate, init_params, train
from twirls.propagation import PropagationConfig

from conftest import random_graph


def _write(path, edges="0 1\n1 2\n", feats="1,0\n0,1\n1,1\n", labels="0\n1\n0\n", splits="0\n1\n2\n"):
    path.mkdir(exist_ok=True)
    (path / "edges.txt").write_text(edges)
    (path / "features.csv").write_text(feats)
    (path / "labels.txt").write_text(labels)
    (path / "splits.txt").write_text(splits)
    return path


def test_load_fixture(tmp_path):
    ds = load_dataset(_write(tmp_path / "d"))
    assert ds.graph.num_nodes == 3 and ds.graph.num_edges == 2
    assert ds.features.shape == (3, 2) and ds.split("test").tolist() == [2]


def test_row_count_mismatch_names_both_counts(tmp_path):
    with pytest.raises(DatasetError, match="2 rows.*3 nodes"):
        load_dataset(_write(tmp_path / "d", feats="1,0\n0,1\n"))


def test_missing_file(tmp_path):
    d = _write(tmp_path / "d")
    (d / "labels.txt").unlink()
    with pytest.raises(DatasetError, match="labels.txt"):
        load_dataset(d)


def test_duplicates_are_dropped_and_counted(tmp_path):
    ds = load_dataset(_write(tmp_path / "d", edges="# header\n0 1\n1 0\n1 2\n0 1\n"))
    assert ds.graph.num_edges == 2 and ds.duplicate_edges == 2


def test_overlapping_splits_rejected(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(_write(tmp_path / "d", splits="0 1\n1\n2\n"))


@given(st.integers(0, 10**6))
@settings(max_examples=20)
def test_save_load_round_trip(tmp_path_factory, seed):
    ds = gen_sbm(40, 3, 0.7, 4.0, 1.0, seed=seed % 50)
    path = tmp_path_factory.mktemp("rt")
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.graph.num_nodes == ds.graph.num_nodes
    assert np.array_equal(back.graph.edges, ds.graph.edges)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    for s in ("train", "val", "test"):
        assert np.array_equal(back.split(s), ds.split(s))
    save_dataset(back, path / "again")
    assert dataset_hash(path) == dataset_hash(path / "again")


def test_chains_examples():
    ds = gen_chains(1, 3, 5, seed=0)
    assert ds.graph.edges.tolist() == [[0, 1], [1, 2]]
    assert np.count_nonzero(ds.features) == 1
    ds = gen_chains(20, 10, 100, seed=0)
    assert ds.graph.num_nodes == 200 and ds.graph.num_edges == 180
    assert ds.features.shape == (200, 100) and ds.split("test").size == 20


@given(st.integers(1, 12), st.integers(2, 12), st.integers(0, 1000))
def test_chains_structure(num_chains, length, seed):
    ds = gen_chains(num_chains, length, 4, seed)
    g = ds.graph
    count, comp = csgraph.connected_components(g.csr, directed=False)
    assert count == num_chains
    deg = g.degree
    for c in range(count):
        nodes = np.flatnonzero(comp == c)
        assert nodes.size == length and np.sum(deg[nodes] == 1) == 2 and np.all(deg[nodes] <= 2)
        assert len(set(ds.labels[nodes].tolist())) == 1
    assert np.count_nonzero(ds.features) == num_chains


def test_all_zero_label_chains_constant_predictor_is_perfect():
    seed = next(s for s in range(100) if gen_chains(3, 5, 2, s).labels.max() == 0)
    ds = gen_chains(3, 5, 2, seed)
    params = init_params(2, 2, K=1, seed=0)
    params.pre[0][1][:] = [1.0, 0.0]  # bias alone votes class 0
    params.pre[0][0][:] = 0.0
    prop = PropagationConfig(steps=4)
    assert evaluate(params, ds, "test", prop)["accuracy"] == 1.0
    best, _ = train(params, ds, prop, TrainConfig(epochs=5, learning_rate=0.01))
    assert evaluate(best, ds, "test", prop)["accuracy"] == 1.0


def test_sbm_extremes():
    assert homophily_ratio(gen_sbm(200, 4, 1.0, 6.0, seed=1).graph, gen_sbm(200, 4, 1.0, 6.0, seed=1).labels) == 1.0
    ds = gen_sbm(200, 4, 0.0, 6.0, seed=1)
    assert homophily_ratio(ds.graph, ds.labels) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_sbm_low_homophily(seed):
    ds = gen_sbm(500, 5, 0.1, 8.0, seed=seed)
    assert 0.05 <= homophily_ratio(ds.graph, ds.labels) <= 0.15
    n = 500
    assert (ds.split("train").size, ds.split("val").size, ds.split("test").size) == (0.6 * n, 0.2 * n, 0.2 * n)


@given(st.floats(0, 1), st.integers(0, 1000))
@settings(max_examples=25)
def test_sbm_homophily_tolerance(h, seed):
    ds = gen_sbm(120, 3, h, 6.0, seed=seed)
    assert abs(homophily_ratio(ds.graph, ds.labels) - h) <= 0.05
    assert ds.features.shape == (120, 3)


def test_sbm_infeasible():
    with pytest.raises(DatasetError):
        gen_sbm(4, 4, 1.0, 6.0)


def test_perturb_examples():
    g = random_graph(30, 0.3, 0)
    assert perturb_edges(g, 0.0, seed=1) is g
    tri = build_graph(3, [(0, 1), (1, 2), (0, 2)])
    assert perturb_edges(tri, 1.0, "remove").num_edges == 0
    g = build_graph(60, [tuple(e) for e in random_graph(60, 0.2, 3).edges.tolist()][:100])
    assert g.num_edges == 100
    out = perturb_edges(g, 0.2, "mixed", seed=5)
    before, after = set(map(tuple, g.edges.tolist())), set(map(tuple, out.edges.tolist()))
    assert len(before ^ after) == 20 and len(before - after) == 10
    assert np.array_equal(perturb_edges(g, 0.2, "mixed", seed=5).edges, out.edges)


@given(st.integers(0, 10**6), st.floats(0, 0.6), st.sampled_from(["add", "remove", "mixed"]))
def test_perturb_validity(seed, rate, mode):
    g = random_graph(25, 0.2, seed)
    out = perturb_edges(g, rate, mode, seed)
    assert out.num_nodes == g.num_nodes
    assert np.all(out.edges[:, 0] < out.edges[:, 1])
    assert len(set(map(tuple, out.edges.tolist()))) == out.num_edges
    k = int(np.ceil(rate * g.num_edges - 1e-12))
    changed = set(map(tuple, g.edges.tolist())) ^ set(map(tuple, out.edges.tolist()))
    assert len(changed) == k


def test_perturb_bad_arguments():
    g = random_graph(5, 0.5, 0)
    with pytest.raises(DatasetError):
        perturb_edges(g, 1.5)
    with pytest.raises(DatasetError):
        perturb_edges(g, 0.5, "swap")


def test_make_splits_examples():
    labels = np.arange(100) % 4
    tr, va, te = make_splits(labels, (0.6, 0.2, 0.2), seed=0)
    assert (tr.size, va.size, te.size) == (60, 20, 20)
    assert not set(tr) & set(va) and not set(va) & set(te)
    assert np.bincount(labels[tr]).tolist() == [15] * 4
    labels = np.arange(2000) % 7
    tr, va, te = make_splits(labels, seed=3, per_class_train=20, num_val=500, num_test=1000)
    assert (tr.size, va.size, te.size) == (140, 500, 1000)
    assert np.bincount(labels[tr]).tolist() == [20] * 7
    a = make_splits(labels, seed=3, per_class_train=20, num_val=500, num_test=1000)
    assert all(np.array_equal(x, y) for x, y in zip(a, (tr, va, te)))


def test_make_splits_skips_unlabeled_and_validates():
    labels = np.array([0, 1, -1, 0, 1, -1])
    parts = make_splits(labels, (0.5, 0.5, 0.0), seed=1)
    assert sorted(np.concatenate(parts).tolist()) == [0, 1, 3, 4]
    with pytest.raises(DatasetError):
        make_splits(labels, (0.6, 0.6, 0.0))
    with pytest.raises(DatasetError):
        make_splits([-1, -1])


def test_dataset_validation():
    g = build_graph(2, [(0, 1)])
    with pytest.raises(DatasetError):
        Dataset(g, np.ones((2, 1)), [0, -1], [1], [], [])
    with pytest.raises(DatasetError):
        Dataset(g, np.ones((2, 1)), [0, 1, 0], [0], [], [])
