import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from travmatch import simfusion
from travmatch.simfusion import DEFAULT_TOPN, build_view, fuse, select_candidates, topn_accuracy
from travmatch.synthlog import GroundTruth


def test_cosine_examples():
    a = np.array([0.3, 0.4, 0.0])
    assert simfusion.cosine(a, a) == pytest.approx(1.0)
    assert simfusion.cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert simfusion.cosine([0.0, 0.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        simfusion.cosine([1.0], [1.0, 0.0])


def test_identical_vectors_tie_by_id():
    v = build_view("x", ["c", "a", "b"], np.ones((3, 2)), k=2)
    assert v.top("a") == [("b", pytest.approx(1.0)), ("c", pytest.approx(1.0))]
    assert [n for n, _ in v.top("c")] == ["a", "b"]


def test_two_cookies_list_each_other():
    v = build_view("x", ["a", "b"], np.array([[1.0, 0.0], [0.5, 0.5]]), k=1)
    assert v.neighbor_lists() == {"a": ["b"], "b": ["a"]}
    assert len(select_candidates(v, k=1)) == 1


def test_k_is_clamped_with_warning():
    with pytest.warns(UserWarning):
        v = build_view("x", ["a", "b", "c"], np.eye(3), k=5)
    assert v.k == 2


def _random_views(n, seed, count=5):
    rng = np.random.default_rng(seed)
    views = []
    for v in range(count):
        d = int(rng.integers(3, 40))
        density = float(rng.uniform(0.05, 0.5))
        m = sp.random(n, d, density=density, random_state=int(rng.integers(1 << 30)), format="csr")
        if v % 2:
            # small integer weights produce many exact ties
            m.data = np.ceil(m.data * 3)
        views.append(m)
    return views


def _naive_topk(mats, k):
    """Full n x n matrix, then a per-row stable sort; no blocking at all."""
    mats = [simfusion.normalize_rows(m) for m in mats]
    full = None
    for m in mats:
        s = (m @ m.T.tocsr()).toarray()
        full = s if full is None else full + s
    if len(mats) > 1:
        full /= len(mats)
    np.clip(full, -1.0, 1.0, out=full)
    np.fill_diagonal(full, -np.inf)
    order = np.argsort(-full, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(full, order, axis=1)


@pytest.mark.parametrize("n, block", [(1000, 256), (1000, 7), (333, 1000)])
def test_blocked_topk_equals_naive_oracle(n, block):
    ids = [f"c{i:04d}" for i in range(n)]
    views = _random_views(n, seed=n + block)
    for i, m in enumerate(views):
        got = build_view(f"v{i}", ids, m, k=10, block_size=block)
        idx, sc = _naive_topk([m], 10)
        assert np.array_equal(got.neighbors, idx)
        assert np.array_equal(got.scores, sc)
    spaces = [simfusion.VectorSpace(f"v{i}", ids, m) for i, m in enumerate(views)]
    fused = fuse(spaces, k=10, block_size=block)
    idx, sc = _naive_topk(views, 10)
    assert np.array_equal(fused.neighbors, idx)
    assert np.array_equal(fused.scores, sc)


def test_row_kernel_matches_pure_python_dot():
    n = 60
    ids = [f"c{i:02d}" for i in range(n)]
    m = _random_views(n, seed=3, count=1)[0]
    v = build_view("v", ids, m, k=5)
    rows = simfusion.normalize_rows(m).tolil()
    for i in range(0, n, 7):
        full = v.row(ids[i])
        for j in range(n):
            a = dict(zip(rows.rows[i], rows.data[i]))
            total = 0.0
            for col, x in zip(rows.rows[j], rows.data[j]):
                if col in a:
                    total += a[col] * x
            assert full[j] == min(1.0, total)


def test_pair_scores_equal_ranked_entries():
    n = 200
    ids = [f"c{i:03d}" for i in range(n)]
    spaces = [simfusion.VectorSpace(f"v{i}", ids, m) for i, m in enumerate(_random_views(n, 11))]
    fused = fuse(spaces, k=8)
    pairs = [(ids[r], ids[j]) for p, r in enumerate(fused.query_rows) for j in fused.neighbors[p]]
    np.testing.assert_array_equal(fused.pair_scores(pairs), fused.scores.ravel())
    # symmetric
    swapped = [(b, a) for a, b in pairs]
    np.testing.assert_array_equal(fused.pair_scores(swapped), fused.pair_scores(pairs))


def test_fuse_examples():
    ids = ["a", "b"]
    s1 = simfusion.VectorSpace("s1", ids, np.array([[1.0, 0.0], [1.0, 0.0]]))
    s2 = simfusion.VectorSpace("s2", ids, np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert fuse([s1, s2], k=1).pair_scores([("a", "b")])[0] == 0.5
    single = fuse([s2], k=1)
    v = build_view("s2", ids, np.array([[1.0, 0.0], [0.0, 1.0]]), k=1)
    assert np.array_equal(single.scores, v.scores)
    with pytest.raises(ValueError):
        fuse([], k=1)


def test_zero_vector_contributes_zero():
    ids = ["a", "b", "c"]
    s1 = simfusion.VectorSpace("s1", ids, np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    s2 = simfusion.VectorSpace("s2", ids, np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]))
    f = fuse([s1, s2], k=2)
    assert f.pair_scores([("a", "b"), ("b", "c")]).tolist() == [0.5, 0.5]


def test_topn_worked_example():
    truth = GroundTruth({"e1": frozenset({"u", "e", "z"}), "e2": frozenset({"a"}), "e3": frozenset({"p"})})
    acc = topn_accuracy({"u": ["a", "e", "p", "l", "h"]}, truth, ns=[5])
    assert acc[5] == 0.5


def test_topn_single_match_at_top():
    truth = GroundTruth({"e": frozenset({"u", "v"})})
    acc = topn_accuracy({"u": ["v", "x", "y"]}, truth)
    assert all(a == 1.0 for a in acc.values())


def test_topn_without_matches_is_an_error():
    truth = GroundTruth({"e1": frozenset({"u"}), "e2": frozenset({"v"})})
    with pytest.raises(ValueError):
        topn_accuracy({"u": ["v"]}, truth)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_topn_and_candidate_recall_are_monotone(seed, n_views):
    rng = np.random.default_rng(seed)
    n = 50
    ids = [f"c{i:02d}" for i in range(n)]
    owners = rng.integers(0, 22, size=n)
    emails = {}
    for cid, e in zip(ids, owners):
        emails.setdefault(f"e{e}", set()).add(cid)
    truth = GroundTruth({e: frozenset(c) for e, c in emails.items()})
    spaces = [simfusion.VectorSpace(f"v{i}", ids, m) for i, m in enumerate(_random_views(n, seed, n_views))]
    fused = fuse(spaces, k=49)
    acc = topn_accuracy(fused, truth)
    vals = [acc[n] for n in DEFAULT_TOPN]
    assert vals == sorted(vals)
    target = set(truth.pairs())
    recalls = [simfusion.candidate_recall(select_candidates(fused, k, truth), target) for k in (1, 3, 5, 10, 18, 49)]
    assert recalls == sorted(recalls)


def test_candidates_or_survival_and_labels():
    ids = ["a", "b", "c"]
    # a and b both rank c first, c ranks a first: pairs (a,c), (b,c)
    v = build_view("x", ids, np.array([[1.0, 0.1], [0.1, 1.0], [1.0, 1.0]]), k=1)
    truth = GroundTruth({"e1": frozenset({"a", "c"}), "e2": frozenset({"b"})})
    cands = select_candidates(v, k=1, truth=truth)
    assert [(c.u, c.v, c.label) for c in cands] == [("a", "c", 1), ("b", "c", 0)]
    assert all(c.u < c.v for c in cands)


def test_neighbors_round_trip(tmp_path):
    ids = [f"c{i}" for i in range(6)]
    v = build_view("x", ids, _random_views(6, 2, 1)[0], k=3)
    simfusion.write_neighbors(tmp_path / "n.csv", v)
    assert simfusion.read_neighbors(tmp_path / "n.csv") == v.neighbor_lists()
