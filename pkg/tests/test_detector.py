import numpy as np
import pytest

from spinecade.convnet import ConvNetModel
from spinecade.detector import (
    ProbabilityMap,
    cluster_detections,
    load_probability_map,
    predict_map,
    save_detections,
    save_probability_map,
)
from spinecade.edgemap import EdgeMap, extract_edges
from spinecade.errors import EmptyEdgeMapError
from spinecade.volume import Volume


@pytest.fixture(scope="module")
def edges_and_volume(small_phantom):
    img, mask, _ = small_phantom
    edges = extract_edges(img, mask)
    sub = EdgeMap(edges.indices[::40], edges.grad_x[::40], edges.grad_y[::40], edges.magnitude[::40],
                  edges.source_dims, edges.threshold_used)
    return img, sub


def test_zeroed_final_layer_gives_one_half(edges_and_volume):
    img, edges = edges_and_volume
    model = ConvNetModel.build("desk64", seed=0)
    model.weights[-2]["W"][:] = 0
    model.weights[-2]["b"][:] = 0
    pmap = predict_map(model, img, edges, "original")
    assert np.all(pmap.probabilities == 0.5)


@pytest.mark.parametrize("strategy", ["original", "oriented"])
def test_batch_size_invariance(edges_and_volume, strategy):
    img, edges = edges_and_volume
    model = ConvNetModel.build("desk64", seed=1)
    a = predict_map(model, img, edges, strategy, batch_size=1)
    b = predict_map(model, img, edges, strategy, batch_size=64)
    assert np.array_equal(a.probabilities, b.probabilities)
    assert np.array_equal(a.indices, edges.indices)
    assert np.all((a.probabilities >= 0) & (a.probabilities <= 1))


def test_empty_edge_map():
    v = Volume(np.zeros((3, 4, 4), np.int16))
    empty = EdgeMap(np.zeros((0, 3)), [], [], [], v.dims, 0.0)
    with pytest.raises(EmptyEdgeMapError):
        predict_map(ConvNetModel.build("desk64"), v, empty, "original")


def pmap_of(entries, dims=(20, 20, 5)):
    return ProbabilityMap([e[0] for e in entries], [e[1] for e in entries], dims)


def test_cluster_examples():
    v = Volume(np.zeros((5, 20, 20), np.int16))
    adjacent = cluster_detections(pmap_of([((1, 1, 1), 0.8), ((2, 2, 2), 0.6)]), v, 0.5)
    assert len(adjacent) == 1 and len(adjacent[0].member_voxels) == 2
    assert adjacent[0].score == 0.8
    apart = cluster_detections(pmap_of([((1, 1, 1), 0.8), ((11, 1, 1), 0.9)]), v, 0.5)
    assert [d.score for d in apart] == [0.9, 0.8]
    assert cluster_detections(pmap_of([((1, 1, 1), 0.2)]), v, 0.5) == []
    c = adjacent[0].position
    assert c == pytest.approx(((0.8 * 1 + 0.6 * 2) / 1.4,) * 3)


def random_pmap(seed, n=200):
    rng = np.random.default_rng(seed)
    flat = rng.choice(20 * 20 * 5, size=n, replace=False)
    z, rem = divmod(flat, 400)
    y, x = divmod(rem, 20)
    return pmap_of(list(zip(np.column_stack([x, y, z]).tolist(), rng.random(n).tolist())))


def summarize(dets):
    return [(d.position, d.score, sorted(d.member_voxels)) for d in dets]


@pytest.mark.parametrize("seed", range(5))
def test_cluster_order_invariance(seed):
    v = Volume(np.zeros((5, 20, 20), np.int16), (0.5, 0.7, 1.3))
    pm = random_pmap(seed)
    perm = np.random.default_rng(seed + 50).permutation(len(pm))
    shuffled = ProbabilityMap(pm.indices[perm], pm.probabilities[perm], pm.source_dims)
    assert summarize(cluster_detections(pm, v, 0.4)) == summarize(cluster_detections(shuffled, v, 0.4))


@pytest.mark.parametrize("seed", range(5))
def test_cluster_threshold_monotone(seed):
    v = Volume(np.zeros((5, 20, 20), np.int16))
    pm = random_pmap(seed)
    low = cluster_detections(pm, v, 0.3)
    high = cluster_detections(pm, v, 0.6)
    owner = {m: i for i, d in enumerate(low) for m in d.member_voxels}
    for d in high:
        parents = {owner[m] for m in d.member_voxels}
        assert len(parents) == 1
        assert len(d.member_voxels) <= len(low[parents.pop()].member_voxels)
        assert d.score == max(d.member_probabilities)


def test_exports(tmp_path):
    pm = random_pmap(0, 20)
    save_probability_map(pm, tmp_path / "p.csv")
    back = load_probability_map(tmp_path / "p.csv", pm.source_dims)
    assert np.array_equal(back.indices, pm.indices) and np.array_equal(back.probabilities, pm.probabilities)
    save_detections(cluster_detections(pm, Volume(np.zeros((5, 20, 20), np.int16)), 0.1), tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x_mm,y_mm,z_mm,score,n_voxels,matched"
