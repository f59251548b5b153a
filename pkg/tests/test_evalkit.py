import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rivid.datamodel import load_samples
from rivid.degrade import RESOLUTION_GRID
from rivid.evalkit import (
    ObjectiveGrid,
    cmc,
    mean_abs_slope,
    objective,
    objective_curves,
    pairwise_sqdist,
)
from rivid.synth import SynthSpec, synth_corpus
from rivid.trainer import TrainConfig


def brute_force_cmc(dist, qids, gids, max_rank):
    """Independent oracle: sort (distance, gallery index) tuples per query."""
    hits = np.zeros(max_rank)
    for i, q in enumerate(qids):
        ranked = sorted(range(len(gids)), key=lambda j: (dist[i][j], j))
        first = next(k for k, j in enumerate(ranked) if gids[j] == q)
        hits[first:] += 1
    return hits / len(qids)


def test_sqdist_examples():
    assert pairwise_sqdist([[1.0, 0.0]], [[0.0, 1.0]])[0, 0] == 2.0
    assert pairwise_sqdist([[0.3, -0.4, 1.2]], [[1.3, 0.6, 0.2]])[0, 0] == pytest.approx(3.0, abs=1e-12)
    v = np.random.default_rng(0).random((3, 5))
    assert np.all(np.diag(pairwise_sqdist(v, v)) == 0)


def test_sqdist_errors():
    with pytest.raises(ValueError):
        pairwise_sqdist(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        pairwise_sqdist(np.zeros((0, 3)), np.zeros((2, 3)))


def test_sqdist_matches_expansion_single_precision():
    rng = np.random.default_rng(1)
    q, g = rng.normal(size=(20, 64)).astype(np.float32), rng.normal(size=(30, 64)).astype(np.float32)
    d = pairwise_sqdist(q, g)
    expanded = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2 * q @ g.T
    assert np.allclose(d, expanded, rtol=1e-5)
    assert np.all(d >= 0)


def test_cmc_oracle_equivalence():
    rng = np.random.default_rng(2024)
    gids = np.repeat(np.arange(25), 8)
    qids = rng.choice(25, size=50)
    # quantized features produce exact ties, exercising the tie rule
    q = np.round(rng.normal(size=(50, 8)), 1)
    g = np.round(rng.normal(size=(200, 8)), 1)
    dist = pairwise_sqdist(q, g)
    ranks = tuple(range(1, 201))
    curve = cmc(dist, qids, gids, ranks)
    assert list(curve.accuracy) == brute_force_cmc(dist, qids, gids, 200).tolist()


def test_cmc_examples():
    g = np.random.default_rng(0).random((6, 4))
    assert cmc(pairwise_sqdist(g, g), range(6), range(6))[1] == 1.0
    # correct match at 0-based position 3
    dist = np.array([[0.1, 0.2, 0.3, 0.4, 0.5]])
    curve = cmc(dist, [7], [1, 2, 3, 7, 4], (1, 5))
    assert curve[1] == 0.0 and curve[5] == 1.0
    assert curve.as_dict() == {"rank1": 0.0, "rank5": 1.0}


def test_cmc_ties_broken_by_gallery_index():
    dist = np.zeros((1, 3))
    assert cmc(dist, [5], [5, 1, 2], (1,))[1] == 1.0
    assert cmc(dist, [5], [1, 5, 2], (1, 2)).accuracy == (0.0, 1.0)


def test_cmc_errors():
    with pytest.raises(ValueError, match="absent"):
        cmc(np.zeros((1, 2)), [9], [1, 2])
    with pytest.raises(ValueError):
        cmc(np.zeros((2, 2)), [1], [1, 2])
    with pytest.raises(ValueError):
        cmc(np.zeros((1, 1)), [1], [1], ranks=(0,))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cmc_gallery_permutation_invariance_and_monotone(seed):
    rng = np.random.default_rng(seed)
    gids = rng.integers(0, 6, size=30)
    qids = rng.choice(np.unique(gids), size=10)
    dist = rng.random((10, 30))  # continuous: no ties
    ranks = (1, 2, 5, 10)
    base = cmc(dist, qids, gids, ranks)
    perm = rng.permutation(30)
    assert cmc(dist[:, perm], qids, gids[perm], ranks) == base
    assert all(a <= b for a, b in zip(base.accuracy, base.accuracy[1:]))


def test_same_camera_filter():
    dist = np.array([[0.0, 1.0]])
    assert cmc(dist, [3], [3, 3], (1,))[1] == 1.0
    filtered = cmc(dist, [3], [3, 3], (1,), query_cams=[0], gallery_cams=[0, 1])
    assert filtered[1] == 1.0
    with pytest.raises(ValueError):
        cmc(dist, [3], [3, 3], (1,), query_cams=[0], gallery_cams=[0, 0])


def test_objective_hand_example():
    a1, b1 = (0.0, 0.0), (1.0, 2.0)
    a2, b2 = (1.0, 0.0), (0.0, 2.0)
    res = objective([a1, b1], [0, 1], [a2, b2], [0, 1])
    assert (res.D_sim, res.D_dif, res.O) == (2.0, 8.0, 0.25)
    swapped = objective([a2, b2], [0, 1], [a1, b1], [0, 1])
    assert swapped.O == res.O


def test_objective_zero_when_resolution_invariant():
    f = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    assert objective(f, [0, 1, 2], f.copy(), [0, 1, 2]).O == 0.0


def test_objective_excludes_self_pairs():
    f = np.array([[0.0], [1.0], [5.0], [7.0]])
    ids = [0, 0, 1, 1]
    res = objective(f, ids, f, ids, exclude_self=True)
    # same-identity ordered pairs: (0,1), (1,0), (2,3), (3,2)
    assert res.D_sim == 1 + 1 + 4 + 4
    assert objective(f, ids, f, ids).D_sim == res.D_sim  # self-pairs contribute zero distance anyway


def test_objective_undefined_and_errors():
    f = np.zeros((2, 3))
    res = objective(f, [0, 1], f, [0, 1])
    assert not res.defined and math.isnan(res.O)
    with pytest.raises(ValueError):
        objective(f, [0, 0], f, [0, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.sampled_from([-3.0, 0.5, 2.0, 10.0]))
def test_objective_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    ids = [0, 0, 1, 1, 2, 2, 3, 3]
    assert objective(c * f1, ids, c * f2, ids).O == pytest.approx(objective(f1, ids, f2, ids).O, rel=1e-12)


def test_grid_csv_flags_undefined():
    nan = objective(np.zeros((2, 1)), [0, 1], np.zeros((2, 1)), [0, 1])
    ok = objective([[0.0], [1.0]], [0, 1], [[0.0], [1.0]], [0, 1])
    text = ObjectiveGrid("a", [0.5, 1.0], [0.5, 1.0], [nan, ok], 2, 2).to_csv()
    lines = text.splitlines()
    assert lines[0] == "# mode=a n_samples=2 n_identities=2"
    assert lines[1] == "r1,r2,D_sim,D_dif,O"
    assert lines[2].endswith(",undefined") and lines[3] == "1.0,1.0,0.0,2.0,0.0"


def test_mean_abs_slope():
    assert mean_abs_slope([0, 1, 2], [3.0, 1.0, 2.0]) == 1.5
    assert mean_abs_slope(RESOLUTION_GRID, [0.5] * 8) == 0.0


class _PixelMean:
    """Stand-in model: embedding = per-channel mean and row profile of the input."""

    def embed(self, x):
        return x.mean(dim=3).flatten(1).double().numpy()


def test_objective_curves_rows(tmp_path):
    # width 32 keeps r = 0.125 at the 4-pixel minimum
    corpus = synth_corpus(SynthSpec(n_identities=4, images_per_identity=2, canonical_size=(64, 32), seed=1), tmp_path)
    samples = load_samples(corpus.query) + load_samples(corpus.gallery)
    cfg = TrainConfig(canonical_size=(64, 32))
    for mode in ("a", "b"):
        grid = objective_curves(_PixelMean(), samples, cfg, corpus.query.width_max, mode)
        assert grid.r1 == list(RESOLUTION_GRID) and grid.r1[0] == 0.125 and grid.r1[-1] == 1.0
        assert grid.r2 == (list(RESOLUTION_GRID) if mode == "a" else [1.0] * 8)
        assert len(grid.to_csv().splitlines()) == 2 + 8
    # at r1 = r2 = 1 nothing is degraded; the mode-b endpoint equals the mode-a endpoint
    a = objective_curves(_PixelMean(), samples, cfg, corpus.query.width_max, "a")
    b = objective_curves(_PixelMean(), samples, cfg, corpus.query.width_max, "b")
    assert a.results[-1] == b.results[-1]
    with pytest.raises(ValueError):
        objective_curves(_PixelMean(), samples, cfg, 16, "c")
