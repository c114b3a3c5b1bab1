"""One test per acceptance criterion; each records a PASS/FAIL line that is
printed in the terminal summary."""

import contextlib
import json
import time

import numpy as np
import pytest

from travmatch import gbm, protocol, siamese, simfusion
from travmatch.pairfeatures import read_feature_table
from travmatch.synthlog import GeneratorConfig, generate_corpus

from .conftest import ACCEPTANCE, _run_cli
from .test_gbm import _stump_oracle, _threshold_oracle, _toy
from .test_simfusion import _naive_topk, _random_views
from .test_siamese import test_gradients_match_finite_differences

FUSED6 = "+".join(protocol.DEFAULT_VIEWS)
SINGLE = ("supervised_url", "ond", "dates", "geoipcity", "useragent", "unsupervised_url")


@contextlib.contextmanager
def criterion(n, title):
    detail = []
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE[n] = (False, title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    ACCEPTANCE[n] = (True, title, "; ".join(detail))


def _report(workdir):
    return json.loads((workdir / "report" / "report.json").read_text())


def test_criterion_1_contrastive_loss_and_gradients():
    with criterion(1, "contrastive loss oracle and finite-difference gradients") as d:
        t0 = time.perf_counter()
        f = np.array([0.4, 1.1, 0.0])
        assert siamese.contrastive_loss(f, f, 0, 3.0) == 0.0
        assert siamese.contrastive_loss(f, f, 1, 3.0) == 1.5
        assert siamese.contrastive_loss([0.0, 0.0], [2.0, 0.0], 1, 3.0) == 0.0
        test_gradients_match_finite_differences()
        elapsed = time.perf_counter() - t0
        assert elapsed < 10, f"took {elapsed:.1f}s"
        d.append(f"3 loss cases exact, 100 gradient draws within 1e-4, {elapsed:.2f}s")


def test_criterion_2_topn_worked_example():
    with criterion(2, "TopN worked example") as d:
        from travmatch.synthlog import GroundTruth

        truth = GroundTruth({"m": frozenset({"u", "e", "z"}), "x1": frozenset("a"), "x2": frozenset("p")})
        acc = simfusion.topn_accuracy({"u": ["a", "e", "p", "l", "h"]}, truth, ns=[5])[5]
        assert acc == 0.5
        d.append(f"Top5 = {acc}")


def _check_monotone(result, k_cand):
    for label, accs in result["topn"].items():
        vals = [accs[str(n)] if isinstance(next(iter(accs)), str) else accs[n] for n in (3, 5, 10, 18, 50)]
        assert vals == sorted(vals), label
    cr = result["candidate_recall"]
    ks = sorted(int(k) for k in cr)
    rec = [cr[str(k)] if str(k) in cr else cr[k] for k in ks]
    assert rec == sorted(rec)
    assert result["recall"] <= (cr[str(k_cand)] if str(k_cand) in cr else cr[k_cand])


def test_criterion_3_monotonicity(default_cli_run):
    with criterion(3, "TopN, candidate recall and overall recall monotonicity") as d:
        checked = 0
        for rec in _report(default_cli_run["workdir"])["repetitions"]:
            _check_monotone(rec, 5)
            checked += 1
        for seed, preset in ((1, "full"), (2, "full"), (3, "reduced")):
            events, truth = generate_corpus(GeneratorConfig(seed=seed, num_emails=120))
            cfg = protocol.RunConfig(seed=seed, preset=preset)
            cfg.split.repetitions = 1
            cfg.siamese.epochs = 3
            cfg.gbm.num_trees = 30
            rep = protocol.run_pipeline(events, truth, cfg).repetitions[0]
            _check_monotone(rep.to_record(), cfg.k)
            checked += 1
        d.append(f"{checked} repetitions over 4 corpora, exact comparisons")


def test_criterion_4_fusion_gain_and_runtime(default_cli_run):
    with criterion(4, "fusion gain on the default corpus, full pipeline under 5 minutes") as d:
        topn = _report(default_cli_run["workdir"])["summary"]["topn"]
        top5 = {label: accs["5"]["mean"] for label, accs in topn.items()}
        best_single = max(SINGLE, key=lambda v: top5[v])
        assert all(top5[FUSED6] > top5[v] for v in SINGLE), {v: top5[v] for v in SINGLE + (FUSED6,)}
        gain = top5["unsupervised_url+supervised_url"] - top5["unsupervised_url"]
        assert gain >= 0.01, f"supervised URL adds {100 * gain:.2f} pp"
        seconds = default_cli_run["seconds"]
        assert seconds < 300, f"{seconds:.0f}s"
        d.append(f"fused Top5 {100 * top5[FUSED6]:.2f}% vs best single ({best_single}) "
                 f"{100 * top5[best_single]:.2f}%")
        d.append(f"supervised URL adds {100 * gain:.2f} pp to unsupervised URL")
        d.append(f"generate + pipeline {seconds:.0f}s")


def test_criterion_5_blocked_kernel_equals_naive():
    with criterion(5, "blocked top-k equals naive full-matrix oracle") as d:
        n = 1000
        ids = [f"c{i:04d}" for i in range(n)]
        views = _random_views(n, seed=2024, count=5)
        for i, m in enumerate(views):
            for block in (256, 97):
                got = simfusion.build_view(f"v{i}", ids, m, k=50, block_size=block)
                idx, sc = _naive_topk([m], 50)
                assert np.array_equal(got.neighbors, idx) and np.array_equal(got.scores, sc)
        spaces = [simfusion.VectorSpace(f"v{i}", ids, m) for i, m in enumerate(views)]
        fused = simfusion.fuse(spaces, k=50, block_size=128)
        idx, sc = _naive_topk(views, 50)
        assert np.array_equal(fused.neighbors, idx) and np.array_equal(fused.scores, sc)
        d.append("n=1000, 5 views and their fusion, bit-identical ids and scores")


def test_criterion_6_gbm_oracles(default_cli_run):
    with criterion(6, "GBM stump, threshold, loss and separability oracles") as d:
        rng = np.random.default_rng(6)
        stumps = 0
        for trial in range(300):
            n, dim = int(rng.integers(2, 33)), int(rng.integers(1, 5))
            X = rng.integers(0, 4, size=(n, dim)).astype(float) if trial % 2 else rng.normal(size=(n, dim))
            y = rng.integers(0, 2, size=n)
            if y.min() == y.max():
                y[0] = 1 - y[0]
            oracle = _stump_oracle(X, y)
            t = gbm.fit(X, y, gbm.GbmConfig(num_trees=1, max_depth=1, learning_rate=1.0, min_samples_leaf=1)).trees[0]
            if oracle is None:
                assert t.feature == [-1]
            else:
                f, thr, (vl, vr) = oracle
                assert (t.feature[0], t.threshold[0]) == (f, thr)
                assert t.value[t.left[0]] == pytest.approx(vl, rel=1e-12, abs=1e-12)
                assert t.value[t.right[0]] == pytest.approx(vr, rel=1e-12, abs=1e-12)
            stumps += 1
        for _ in range(200):
            probs = rng.uniform(0, 1, size=50)
            if _ % 2:
                probs = np.round(probs * 8) / 8 + 0.01
            labels = rng.integers(0, 2, size=50)
            assert gbm.tune_threshold(probs, labels) == _threshold_oracle(probs, labels)[0]
        _, _, X, labels = read_feature_table(default_cli_run["workdir"] / "rep_0" / "features_train.csv")
        trace = []
        gbm.fit(X, np.array(labels), gbm.GbmConfig(), loss_trace=trace)
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        X1, y1 = _toy()
        m = gbm.fit(X1, y1, gbm.GbmConfig(num_trees=50, max_depth=1, min_samples_leaf=1))
        acc = float(np.mean((gbm.predict_proba(m, X1) > 0.5) == (y1 == 1)))
        assert acc == 1.0
        d.append(f"{stumps} stumps, 200 threshold scans, {len(trace) - 1} rounds nonincreasing "
                 f"on {len(labels)} candidate pairs, toy accuracy {acc}")


def test_criterion_7_protocol_integrity(default_corpus, default_cli_run, tmp_path):
    with criterion(7, "split integrity and by_time F1 <= by_email F1 over 3 seeds") as d:
        _, truth, profiles = default_corpus
        for seed in range(42, 47):
            train, test = protocol.split_by_email(truth, protocol.SplitSpec("by_email", seed=seed))
            tr = set(train)
            assert not tr & set(test)
            assert all((a in tr) == (b in tr) for a, b in truth.pairs())
        _, _, dist = protocol.split_by_time(profiles, truth, protocol.SplitSpec("by_time"))
        assert dist.train_only + dist.test_only + dist.cross == pytest.approx(1.0, abs=1e-12)
        assert dist.cross > 0
        d.append(f"pairs train/test/cross {dist.train_only:.3f}/{dist.test_only:.3f}/{dist.cross:.3f}")

        run = default_cli_run
        email = _report(run["workdir"])["repetitions"][:3]
        _run_cli("pipeline", "--events", run["data"] / "events.jsonl", "--truth", run["data"] / "truth.csv",
                 "--workdir", tmp_path / "time", "--mode", "by_time", "--repetitions", 3)
        timed = _report(tmp_path / "time")["repetitions"]
        pairs = []
        for e, t in zip(email, timed):
            assert e["seed"] == t["seed"]
            pairs.append(f"seed {e['seed']}: {100 * t['f1']:.2f} <= {100 * e['f1']:.2f}")
            assert t["f1"] <= e["f1"], pairs[-1]
        d.append("F1 by_time vs by_email " + ", ".join(pairs))


def test_criterion_8_determinism(default_cli_run, tmp_path):
    with criterion(8, "identical config and seed give byte-identical reports") as d:
        run = default_cli_run
        _run_cli("pipeline", "--events", run["data"] / "events.jsonl", "--truth", run["data"] / "truth.csv",
                 "--workdir", tmp_path / "again")
        first = sorted(p.name for p in (run["workdir"] / "report").iterdir())
        second = sorted(p.name for p in (tmp_path / "again" / "report").iterdir())
        assert first == second
        for name in first:
            assert (run["workdir"] / "report" / name).read_bytes() == (tmp_path / "again" / "report" / name).read_bytes(), name
        d.append(f"{len(first)} report files compared")
