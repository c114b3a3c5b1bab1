import numpy as np
import pytest

from travmatch import pairfeatures, protocol
from travmatch.pairfeatures import FeatureContext, featurize, featurize_pairs, jaccard, overlap_days
from travmatch.tokenizer import build_profile

from .test_tokenizer import ev

BINARY = ("same_passengers", "same_os", "same_city", "same_language")
UNIT = ("jaccard_passengers", "jaccard_ond", "jaccard_dates", "jaccard_city", "jaccard_useragent",
        "cosine_ond", "cosine_dates", "cosine_city", "cosine_useragent", "cosine_domain")


def test_jaccard_examples():
    assert jaccard({1, 2}, {2, 3}) == pytest.approx(1 / 3)
    assert jaccard({"a", "b"}, {"b", "a"}) == 1.0
    assert jaccard(set(), set()) == 0.0


def test_overlap_examples():
    assert overlap_days((1, 10), (5, 20)) == 6
    assert overlap_days((1, 3), (5, 20)) == 0
    assert overlap_days((4, 4), (4, 4)) == 1


def test_time_to_flight():
    p = build_profile("c", [ev(day=0, departure_date="2019-01-11"), ev(day=0, departure_date="2019-01-21")])
    assert p.travel_search_gaps == [10, 20]
    assert pairfeatures.time_to_flight(p) == 15
    bad = build_profile("d", [ev(departure_date="garbage")])
    assert pairfeatures.time_to_flight(bad, impute=7.5) == 7.5


def _context(profiles, split, preset="full", views=protocol.DEFAULT_VIEWS):
    cfg = protocol.RunConfig(preset=preset, views=views)
    reps = protocol.vectorize(profiles, split, cfg)
    return protocol.feature_context(profiles, reps, split, cfg)


@pytest.fixture(scope="module")
def small_ctx(small_corpus):
    _, truth, profiles = small_corpus
    split = protocol.split_by_email(truth, protocol.SplitSpec("by_email", seed=1))
    views = tuple(v for v in protocol.DEFAULT_VIEWS if v != "supervised_url")
    return _context(profiles, protocol.Split("by_email", *split[:2], None), views=views), truth


def test_self_pair(small_ctx):
    ctx, _ = small_ctx
    for cid in list(ctx.profiles)[:20]:
        f = featurize(cid, cid, ctx)
        assert all(f[k] == 1.0 for k in BINARY if k in f)
        p = ctx.profiles[cid]
        for k in ("jaccard_passengers", "jaccard_ond", "jaccard_dates", "jaccard_city", "jaccard_useragent"):
            assert f[k] == 1.0 or (k == "jaccard_dates" and not p.dates_set)
        assert f["search_level_diff"] == 0.0
        assert f["time_to_flight_diff"] == 0.0


def test_disjoint_pair():
    a = build_profile("a", [ev("a", origin="org_1", destination="dst_1", departure_date="2019-03-01",
                               geoip_city="city_1", user_agent_tokens=("uaf_1", "os_1"), os="os_1",
                               passengers=1, website_domain="dom_01", language="lang_01", url_tokens=("x1", "org_1", "dst_1", "dt_20190301"))])
    b = build_profile("b", [ev("b", day=40, origin="org_2", destination="dst_2", departure_date="2019-04-20",
                               geoip_city="city_2", user_agent_tokens=("uaf_2", "os_2"), os="os_2",
                               passengers=2, website_domain="dom_02", language="lang_02", url_tokens=("x2", "org_2", "dst_2", "dt_20190420"))])
    from travmatch.simfusion import Fusion, VectorSpace
    from travmatch import tfidf

    profiles = {"a": a, "b": b}
    spaces = {}
    for view, doc in protocol.VIEW_DOCS.items():
        if doc == "multilevel" or view == "supervised_url":
            continue
        docs = [profiles[c].view_docs[doc] for c in ("a", "b")]
        spaces[view] = VectorSpace(view, ["a", "b"], tfidf.transform_many(tfidf.fit(docs), docs))
    ctx = FeatureContext(profiles, spaces, Fusion(list(spaces.values())))
    f = featurize("a", "b", ctx)
    for k in ("same_passengers", "same_os", "same_city", "jaccard_passengers", "jaccard_ond", "jaccard_dates",
              "jaccard_city", "jaccard_useragent", "cosine_ond", "cosine_dates", "cosine_city", "cosine_useragent",
              "cosine_urls", "overall_similarity", "time_range_overlap_days"):
        assert f[k] == 0.0, k


def test_symmetry_and_ranges(small_ctx):
    ctx, truth = small_ctx
    ids = sorted(ctx.profiles)
    rng = np.random.default_rng(0)
    pairs = [tuple(rng.choice(ids, 2, replace=False)) for _ in range(300)] + sorted(truth.pairs())[:100]
    X = featurize_pairs(pairs, ctx)
    Y = featurize_pairs([(v, u) for u, v in pairs], ctx)
    assert np.array_equal(X, Y)
    assert np.all(np.isfinite(X))
    cols = ctx.columns
    for j, name in enumerate(cols):
        col = X[:, j]
        if name in BINARY:
            assert set(np.unique(col)) <= {0.0, 1.0}
        elif name in UNIT:
            assert np.all((col >= 0) & (col <= 1))
        elif name in ("cosine_urls", "overall_similarity"):
            assert np.all((col >= -1) & (col <= 1))
        else:
            assert np.all(col >= 0)


def test_unknown_cookie(small_ctx):
    ctx, _ = small_ctx
    with pytest.raises(KeyError):
        featurize("nobody", sorted(ctx.profiles)[0], ctx)


def test_reduced_preset_columns(small_corpus):
    _, truth, profiles = small_corpus
    train, test = protocol.split_by_email(truth, protocol.SplitSpec("by_email", seed=1))[:2]
    ctx = _context(profiles, protocol.Split("by_email", train, test, None), preset="reduced")
    assert ctx.columns == (
        "cosine_domain", "cosine_ond", "cosine_dates", "same_language",
        "jaccard_ond", "jaccard_passengers", "time_to_flight_diff", "overall_similarity",
    )
    X = featurize_pairs(sorted(truth.pairs())[:10], ctx)
    assert X.shape == (10, 8)


def test_true_pairs_have_higher_url_cosine(default_stages):
    ctx, cands = default_stages["ctx"], default_stages["cands"]
    j = ctx.columns.index("cosine_urls")
    X = featurize_pairs([(c.u, c.v) for c in cands.test], ctx)
    labels = np.array([c.label for c in cands.test])
    assert X[labels == 1, j].mean() > X[labels == 0, j].mean()


def test_feature_table_round_trip(tmp_path, small_ctx):
    ctx, truth = small_ctx
    pairs = sorted(truth.pairs())[:5]
    X = featurize_pairs(pairs, ctx)
    pairfeatures.write_feature_table(tmp_path / "f.csv", pairs, ctx.columns, X, [1, 1, 1, None, 0])
    back_pairs, cols, Y, labels = pairfeatures.read_feature_table(tmp_path / "f.csv")
    assert back_pairs == pairs and tuple(cols) == ctx.columns and labels == [1, 1, 1, None, 0]
    assert np.array_equal(X, Y)
