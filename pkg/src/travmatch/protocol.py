"""Train/test protocols, the four-step matching pipeline, and its metrics.

Steps per repetition: vectorize views (TF-IDF fitted on training cookies),
train the Siamese URL embedding, fuse view similarities and report TopN,
select top-k candidates, featurize pairs, fit the GBM, evaluate on test.

Training emails are divided between the Siamese network and the classifier.
Pairs the network was fitted on look far more similar than unseen matches,
so a classifier trained on them would learn a cut that misses most test
matches.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import gbm, siamese, tfidf
from .pairfeatures import PRESETS, FeatureContext, featurize_pairs, population_mean_gap
from .simfusion import (
    DEFAULT_TOPN,
    CandidatePair,
    Fusion,
    FusedSimilarity,
    VectorSpace,
    candidate_recall,
    topn_accuracy,
)
from .synthlog import ConfigError, Event, GroundTruth
from .tokenizer import CookieProfile

log = logging.getLogger(__name__)

ALL_VIEWS = (
    "supervised_url",
    "unsupervised_url",
    "ond",
    "dates",
    "geoipcity",
    "useragent",
    "domain",
    "multilevel_url",
)
# fusion order follows the incremental table: best single view first
DEFAULT_VIEWS = ("supervised_url", "ond", "dates", "geoipcity", "useragent", "unsupervised_url")
REDUCED_VIEWS = ("ond", "dates", "domain")

# view name -> profile document it is built from
VIEW_DOCS = {
    "unsupervised_url": "url",
    "ond": "ond",
    "dates": "dates",
    "geoipcity": "geoipcity",
    "useragent": "useragent",
    "domain": "domain",
    "multilevel_url": "multilevel",
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-tag with the stage name
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


@dataclass
class SplitSpec:
    mode: str = "by_email"
    train_fraction: float = 0.7
    repetitions: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("by_email", "by_time"):
            raise ConfigError("split.mode", f"unknown mode {self.mode!r}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("split.train_fraction", "must lie in (0, 1)")
        if self.repetitions < 1:
            raise ConfigError("split.repetitions", "must be >= 1")


@dataclass
class RunConfig:
    seed: int = 42
    views: tuple[str, ...] = DEFAULT_VIEWS
    preset: str = "full"
    k: int = 5
    topn: tuple[int, ...] = DEFAULT_TOPN
    url_max_features: int | None = 1000
    aux_max_features: int | None = None
    validation_fraction: float = 0.1
    embed_fraction: float = 0.5
    block_size: int = 256
    threads: int = 1
    split: SplitSpec = field(default_factory=SplitSpec)
    siamese: siamese.SiameseConfig = field(default_factory=siamese.SiameseConfig)
    gbm: gbm.GbmConfig = field(default_factory=gbm.GbmConfig)

    def validate(self) -> None:
        self.split.validate()
        if self.preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {self.preset!r}")
        for v in self.views:
            if v not in ALL_VIEWS:
                raise ConfigError("views", f"unknown view {v!r}")
        if not self.views:
            raise ConfigError("views", "at least one view is required")
        if self.k < 1:
            raise ConfigError("k", "must be >= 1")
        if not 0 < self.embed_fraction < 1:
            raise ConfigError("embed_fraction", "must lie in (0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction", "must lie in (0, 1)")
        if not self.topn or min(self.topn) < 1:
            raise ConfigError("topn", "N values must be >= 1")
        try:
            self.siamese.validate()
            self.gbm.validate()
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None

    @property
    def active_views(self) -> tuple[str, ...]:
        # the reduced preset works from unsupervised OnD/dates/domain only
        return REDUCED_VIEWS if self.preset == "reduced" else tuple(self.views)

    @property
    def uses_siamese(self) -> bool:
        if self.preset == "reduced":
            return False
        return "supervised_url" in self.active_views or "cosine_urls" in PRESETS[self.preset]

    def make_split(self, profiles, truth) -> "Split":
        return make_split(profiles, truth, self.split, self.embed_fraction if self.uses_siamese else None)

    @property
    def k_max(self) -> int:
        return max(max(self.topn), self.k)

    def for_repetition(self, rep: int) -> "RunConfig":
        seed = self.seed + rep
        return dataclasses.replace(
            self,
            split=dataclasses.replace(self.split, seed=seed),
            siamese=dataclasses.replace(self.siamese, seed=seed),
            gbm=dataclasses.replace(self.gbm, seed=seed),
        )

    def to_record(self) -> dict:
        """Result-relevant settings (threads and block size do not change results)."""
        rec = dataclasses.asdict(self)
        rec["views"] = list(self.views)
        rec["topn"] = list(self.topn)
        del rec["threads"], rec["block_size"]
        return rec


def _opt_int(value: str) -> int | None:
    return None if value.strip().lower() in ("", "none") else int(value)


def load_run_config(path: str | Path | None = None) -> RunConfig:
    """INI sections: [run], [split], [siamese], [gbm]; all keys optional."""
    cfg = RunConfig()
    if path is None:
        cfg.validate()
        return cfg
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError("config", f"cannot read {path}")

    def apply(section: str, target, converters: Mapping[str, callable]):
        if not parser.has_section(section):
            return
        for key, raw in parser[section].items():
            if key not in converters:
                raise ConfigError(f"{section}.{key}", "unknown field")
            try:
                setattr(target, key, converters[key](raw))
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}", str(exc)) from None

    def csv_tuple(conv):
        return lambda raw: tuple(conv(x.strip()) for x in raw.split(",") if x.strip())

    def views(raw):
        vals = csv_tuple(str)(raw)
        return DEFAULT_VIEWS if vals == ("all",) else vals

    apply("run", cfg, {
        "seed": int, "views": views, "preset": str.strip, "k": int,
        "topn": csv_tuple(int), "url_max_features": _opt_int, "aux_max_features": _opt_int,
        "validation_fraction": float, "embed_fraction": float, "block_size": int, "threads": int,
    })
    apply("split", cfg.split, {"mode": str.strip, "train_fraction": float, "repetitions": int})
    apply("siamese", cfg.siamese, {
        f.name: (float if f.type in (float, "float") else int)
        for f in dataclasses.fields(siamese.SiameseConfig) if f.name != "seed"
    })
    apply("gbm", cfg.gbm, {
        f.name: (float if f.type in (float, "float") else int)
        for f in dataclasses.fields(gbm.GbmConfig) if f.name != "seed"
    })
    cfg.validate()
    return cfg


# ------------------------------------------------------------------ splits


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PairDistribution:
    train_only: float
    test_only: float
    cross: float

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Split:
    mode: str
    train: list[str]
    test: list[str]
    pair_distribution: PairDistribution | None = None
    # disjoint parts of ``train``: Siamese training vs classifier training
    embed: list[str] | None = None
    clf: list[str] | None = None

    @property
    def embed_ids(self) -> list[str]:
        return self.train if self.embed is None else self.embed

    @property
    def clf_ids(self) -> list[str]:
        return self.train if self.clf is None else self.clf

    @property
    def all_ids(self) -> list[str]:
        return sorted(self.train + self.test)

    @property
    def test_universe(self) -> list[str]:
        # by_time searches matches among every cookie seen so far
        return self.all_ids if self.mode == "by_time" else self.test

    def target_pairs(self, truth: GroundTruth) -> set[tuple[str, str]]:
        """Ground-truth pairs the test stage is expected to recover."""
        test = set(self.test)
        if self.mode == "by_time":
            return {p for p in truth.pairs() if p[0] in test or p[1] in test}
        return {p for p in truth.pairs() if p[0] in test and p[1] in test}

    def to_record(self) -> dict:
        return {
            "mode": self.mode,
            "train": self.train,
            "test": self.test,
            "pair_distribution": None if self.pair_distribution is None else self.pair_distribution.to_record(),
            "embed": self.embed,
            "clf": self.clf,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Split":
        pd = rec.get("pair_distribution")
        return cls(rec["mode"], list(rec["train"]), list(rec["test"]),
                   None if pd is None else PairDistribution(**pd), rec.get("embed"), rec.get("clf"))


def split_by_email(truth: GroundTruth, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Random email-level partition; all cookies of an email stay together."""
    return _email_partition(truth, spec.train_fraction, np.random.default_rng(spec.seed))


def _email_partition(truth: GroundTruth, fraction: float, rng) -> tuple[list[str], list[str]]:
    emails = sorted(truth.emails)
    n_train = round_half_up(len(emails) * fraction)
    perm = rng.permutation(len(emails))
    train_emails = {emails[i] for i in perm[:n_train]}
    train, test = [], []
    for e in emails:
        (train if e in train_emails else test).extend(truth.emails[e])
    return sorted(train), sorted(test)


def pair_distribution(truth: GroundTruth, train: Iterable[str]) -> PairDistribution:
    train = set(train)
    counts = [0, 0, 0]
    for a, b in truth.pairs():
        inside = (a in train) + (b in train)
        counts[{2: 0, 0: 1, 1: 2}[inside]] += 1
    total = sum(counts)
    if total == 0:
        return PairDistribution(0.0, 0.0, 0.0)
    return PairDistribution(counts[0] / total, counts[1] / total, counts[2] / total)


def first_seen(events_or_profiles) -> dict[str, int]:
    first: dict[str, int] = {}
    for item in events_or_profiles:
        if isinstance(item, CookieProfile):
            first[item.cookie_id] = item.first_timestamp
        else:
            ts = first.get(item.cookie_id)
            if ts is None or item.timestamp < ts:
                first[item.cookie_id] = item.timestamp
    return first


def split_by_time(events, truth: GroundTruth, spec: SplitSpec):
    """Chronological cookie split by first activity (ties by id).

    Accepts events or profiles.  Returns (train, test, pair_distribution).
    """
    first = first_seen(events)
    ordered = sorted(first, key=lambda c: (first[c], c))
    n_train = round_half_up(len(ordered) * spec.train_fraction)
    train, test = sorted(ordered[:n_train]), sorted(ordered[n_train:])
    return train, test, pair_distribution(truth, train)


def make_split(profiles: Sequence[CookieProfile], truth: GroundTruth, spec: SplitSpec,
               embed_fraction: float | None = None) -> Split:
    """Train/test split; with ``embed_fraction`` the training cookies are also
    divided by email into a Siamese part and a classifier part."""
    if spec.mode == "by_time":
        train, test, dist = split_by_time(profiles, truth, spec)
        split = Split("by_time", train, test, dist)
    else:
        known = {p.cookie_id for p in profiles}
        train, test = split_by_email(truth.restrict(known), spec)
        split = Split("by_email", train, test)
    if embed_fraction is not None:
        # separate stream from the train/test draw
        rng = np.random.default_rng([spec.seed, 1])
        split.embed, split.clf = _email_partition(truth.restrict(split.train), embed_fraction, rng)
    return split


# ------------------------------------------------------------------ metrics


@dataclass
class PairMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    candidate_recall: float


def evaluate_pairs(
    predicted: Iterable[tuple[str, str]],
    target_pairs: set[tuple[str, str]],
    candidates: Iterable[CandidatePair] | None = None,
) -> PairMetrics:
    """Precision/recall/F1 of predicted-positive pairs.

    False negatives cover every target pair not predicted, including pairs
    that never made it into the candidate set.
    """
    pred = {(a, b) if a < b else (b, a) for a, b in predicted}
    tp = len(pred & target_pairs)
    fp = len(pred) - tp
    fn = len(target_pairs) - tp
    p, r, f = gbm.f1_score(tp, fp, fn)
    cand = candidate_recall(candidates, target_pairs) if candidates is not None else float("nan")
    return PairMetrics(tp, fp, fn, p, r, f, cand)


# ------------------------------------------------------------------ stages


@dataclass
class Representations:
    """Per-view vectors for every cookie (rows aligned with ``ids``)."""

    ids: list[str]
    vectors: dict[str, sp.csr_matrix]
    models: dict[str, tfidf.TfIdfModel] = field(default_factory=dict)

    def space(self, view: str, subset: Sequence[str] | None = None) -> VectorSpace:
        sp_ = VectorSpace(view, self.ids, self.vectors[view])
        return sp_ if subset is None else sp_.subset(subset)


def _doc(profile: CookieProfile, doc: str):
    return profile.multilevel_doc if doc == "multilevel" else profile.view_docs[doc]


def vectorize(profiles: Sequence[CookieProfile], split: Split, config: RunConfig) -> Representations:
    """Fit TF-IDF per view on training cookies; transform every cookie."""
    by_id = {p.cookie_id: p for p in profiles}
    ids = sorted(by_id)
    wanted = {"unsupervised_url", "ond", "dates", "geoipcity", "useragent", "domain"}
    wanted |= {v for v in config.active_views if v in VIEW_DOCS}
    reps = Representations(ids, {})
    for view in sorted(wanted):
        doc = VIEW_DOCS[view]
        mf = config.url_max_features if doc in ("url", "multilevel") else config.aux_max_features
        model = tfidf.fit([_doc(by_id[c], doc) for c in split.train], mf)
        reps.models[view] = model
        reps.vectors[view] = tfidf.transform_many(model, [_doc(by_id[c], doc) for c in ids])
    return reps


def train_embedding(reps: Representations, split: Split, truth: GroundTruth, config: RunConfig,
                    trace: list | None = None):
    """Train the Siamese layer on the embedding share of the training cookies
    and embed every cookie.

    Returns (params, embeddings as CSR, (n_positive, n_negative)).
    """
    url = reps.vectors["unsupervised_url"]
    pos = {c: i for i, c in enumerate(reps.ids)}
    ids = split.embed_ids
    x_train = url[[pos[c] for c in ids]]
    train_truth = truth.restrict(ids)
    pairs = siamese.sample_training_pairs(
        ids, train_truth, x_train, config.siamese.negative_top_k, config.block_size
    )
    n_pos = sum(1 for p in pairs if p.y == 0)
    scfg = dataclasses.replace(config.siamese, input_dim=url.shape[1])
    params = siamese.train(pairs, x_train, scfg, trace)
    emb = sp.csr_matrix(siamese.embed(params, url))
    return params, emb, (n_pos, len(pairs) - n_pos)


def topn_report(reps: Representations, split: Split, truth: GroundTruth, config: RunConfig,
                views: Sequence[str] | None = None) -> dict[str, dict[int, float]]:
    """TopN accuracy of the test queries for each single view, for the running
    fusion of the views in order (labels joined with '+'), and for
    unsupervised_url+supervised_url when both are present."""
    views = list(views or config.active_views)
    universe = split.test_universe
    k = min(max(config.topn), len(universe) - 1)
    spaces = {v: reps.space(v, universe) for v in views}
    groups = [[v] for v in views] + [views[:i] for i in range(2, len(views) + 1)]
    if "unsupervised_url" in views and "supervised_url" in views:
        groups.append(["unsupervised_url", "supervised_url"])
    out: dict[str, dict[int, float]] = {}
    for group in groups:
        label = "+".join(group)
        if label in out:
            continue
        fused = FusedSimilarity([spaces[v] for v in group], k, split.test, config.block_size, config.threads)
        out[label] = topn_accuracy(fused, truth, config.topn, universe)
    return out


def fused_neighbors(reps: Representations, split: Split, config: RunConfig):
    """Top-``k_max`` fused neighbour lists for (train queries within train,
    test queries within the test search universe)."""
    out = []
    for universe, queries in ((split.clf_ids, split.clf_ids), (split.test_universe, split.test)):
        spaces = [reps.space(v, universe) for v in config.active_views]
        k = min(config.k_max, len(universe) - 1)
        fused = FusedSimilarity(spaces, k, queries, config.block_size, config.threads)
        out.append(fused.neighbor_lists())
    return tuple(out)


def candidates_from_neighbors(neighbors: Mapping[str, Sequence[str]], k: int, fusion: Fusion,
                              truth: GroundTruth | None) -> list[CandidatePair]:
    """Unordered pairs (query, one of its top-k neighbours), scored by the fusion."""
    keys = set()
    for a, nbrs in neighbors.items():
        for b in nbrs[:k]:
            keys.add((a, b) if a < b else (b, a))
    keys = sorted(keys)
    scores = fusion.pair_scores(keys) if keys else []
    return [
        CandidatePair(a, b, float(s), None if truth is None else int(truth.is_match(a, b)))
        for (a, b), s in zip(keys, scores)
    ]


def directed_recall(neighbors: Mapping[str, Sequence[str]], truth: GroundTruth, k: int,
                    universe: Iterable[str]) -> float:
    """Fraction of (query, match) pairs whose match is in the query's top-k."""
    allowed = set(universe)
    hit = total = 0
    for user, nbrs in neighbors.items():
        m = truth.matches(user) & allowed
        total += len(m)
        hit += len(m & set(nbrs[:k]))
    return hit / total if total else 0.0


@dataclass
class CandidateStage:
    train: list[CandidatePair]
    test: list[CandidatePair]
    recall_at: dict[int, float]
    directed_recall: float


def select_stage(nbrs_train, nbrs_test, reps: Representations, split: Split, truth: GroundTruth,
                 config: RunConfig) -> CandidateStage:
    fusion = Fusion([reps.space(v) for v in config.active_views])
    target = split.target_pairs(truth)
    recall_at = {
        n: candidate_recall(candidates_from_neighbors(nbrs_test, n, fusion, None), target)
        for n in sorted(set(config.topn) | {config.k})
    }
    return CandidateStage(
        train=candidates_from_neighbors(nbrs_train, config.k, fusion, truth),
        test=candidates_from_neighbors(nbrs_test, config.k, fusion, truth),
        recall_at=recall_at,
        directed_recall=directed_recall(nbrs_test, truth, config.k, split.test_universe),
    )


def feature_context(profiles: Sequence[CookieProfile], reps: Representations, split: Split,
                    config: RunConfig) -> FeatureContext:
    by_id = {p.cookie_id: p for p in profiles}
    spaces = {v: reps.space(v) for v in reps.vectors}
    return FeatureContext(
        profiles=by_id,
        representations=spaces,
        fused=Fusion([spaces[v] for v in config.active_views]),
        impute_gap=population_mean_gap([by_id[c] for c in split.train]),
        preset=config.preset,
    )


def featurize_stage(ctx: FeatureContext, candidates: Sequence[CandidatePair]) -> np.ndarray:
    return featurize_pairs([(c.u, c.v) for c in candidates], ctx)


def train_classifier(X: np.ndarray, candidates: Sequence[CandidatePair], config: RunConfig,
                     columns: Sequence[str]) -> gbm.GbmModel:
    y = np.array([c.label for c in candidates], dtype=int)
    return gbm.fit_with_threshold(X, y, config.gbm, config.validation_fraction, columns)


@dataclass
class RepetitionResult:
    rep: int
    seed: int
    mode: str
    n_train: int
    n_test: int
    topn: dict[str, dict[int, float]]
    candidate_recall: dict[int, float]
    directed_recall: float
    n_candidates_train: int
    n_candidates_test: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    aucpr: float
    threshold: float
    siamese_pairs: tuple[int, int] | None = None
    pair_distribution: dict | None = None

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["topn"] = {k: {str(n): a for n, a in v.items()} for k, v in self.topn.items()}
        rec["candidate_recall"] = {str(n): a for n, a in self.candidate_recall.items()}
        rec["siamese_pairs"] = None if self.siamese_pairs is None else list(self.siamese_pairs)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "RepetitionResult":
        rec = dict(rec)
        rec["topn"] = {k: {int(n): a for n, a in v.items()} for k, v in rec["topn"].items()}
        rec["candidate_recall"] = {int(n): a for n, a in rec["candidate_recall"].items()}
        if rec.get("siamese_pairs") is not None:
            rec["siamese_pairs"] = tuple(rec["siamese_pairs"])
        return cls(**rec)


def evaluate_stage(rep: int, config: RunConfig, split: Split, truth: GroundTruth,
                   topn: dict, cands: CandidateStage, model: gbm.GbmModel, X_test: np.ndarray,
                   siamese_pairs=None) -> RepetitionResult:
    probs = gbm.predict_proba(model, X_test) if len(X_test) else np.zeros(0)
    predicted = [(c.u, c.v) for c, p in zip(cands.test, probs) if p > model.threshold]
    m = evaluate_pairs(predicted, split.target_pairs(truth), cands.test)
    labels = [c.label for c in cands.test]
    return RepetitionResult(
        rep=rep,
        seed=config.for_repetition(rep).split.seed,
        mode=split.mode,
        n_train=len(split.train),
        n_test=len(split.test),
        topn=topn,
        candidate_recall=cands.recall_at,
        directed_recall=cands.directed_recall,
        n_candidates_train=len(cands.train),
        n_candidates_test=len(cands.test),
        tp=m.tp,
        fp=m.fp,
        fn=m.fn,
        precision=m.precision,
        recall=m.recall,
        f1=m.f1,
        aucpr=gbm.average_precision(probs, labels) if len(labels) else 0.0,
        threshold=model.threshold,
        siamese_pairs=siamese_pairs,
        pair_distribution=None if split.pair_distribution is None else split.pair_distribution.to_record(),
    )


def run_repetition(profiles: Sequence[CookieProfile], truth: GroundTruth, config: RunConfig,
                   rep: int) -> RepetitionResult:
    cfg = config.for_repetition(rep)
    with stage("split"):
        split = cfg.make_split(profiles, truth)
    with stage("vectorize"):
        reps = vectorize(profiles, split, cfg)
    pairs_count = None
    if cfg.uses_siamese:
        with stage("train-embed"):
            _, emb, pairs_count = train_embedding(reps, split, truth, cfg)
            reps.vectors["supervised_url"] = emb
    with stage("topn"):
        topn = topn_report(reps, split, truth, cfg)
    with stage("fuse"):
        nbrs_train, nbrs_test = fused_neighbors(reps, split, cfg)
    with stage("candidates"):
        cands = select_stage(nbrs_train, nbrs_test, reps, split, truth, cfg)
    with stage("featurize"):
        ctx = feature_context(profiles, reps, split, cfg)
        X_tr = featurize_stage(ctx, cands.train)
        X_te = featurize_stage(ctx, cands.test)
    with stage("train-clf"):
        model = train_classifier(X_tr, cands.train, cfg, ctx.columns)
    with stage("evaluate"):
        return evaluate_stage(rep, config, split, truth, topn, cands, model, X_te, pairs_count)


@dataclass
class MetricsReport:
    config: dict
    repetitions: list[RepetitionResult]

    def _values(self, getter) -> np.ndarray:
        return np.array([getter(r) for r in self.repetitions], dtype=float)

    def summary(self) -> dict:
        """Mean and population std over repetitions."""
        def ms(getter):
            v = self._values(getter)
            return {"mean": float(v.mean()), "std": float(v.std())}

        first = self.repetitions[0]
        out = {
            "topn": {
                label: {str(n): ms(lambda r, l=label, n=n: r.topn[l][n]) for n in accs}
                for label, accs in first.topn.items()
            },
            "candidate_recall": {
                str(n): ms(lambda r, n=n: r.candidate_recall[n]) for n in first.candidate_recall
            },
        }
        for key in ("directed_recall", "precision", "recall", "f1", "aucpr"):
            out[key] = ms(lambda r, key=key: getattr(r, key))
        if first.pair_distribution is not None:
            out["pair_distribution"] = {
                k: ms(lambda r, k=k: r.pair_distribution[k]) for k in first.pair_distribution
            }
        return out

    def to_record(self) -> dict:
        return {
            "config": self.config,
            "repetitions": [r.to_record() for r in self.repetitions],
            "summary": self.summary(),
        }


def run_pipeline(events: Sequence[Event], truth: GroundTruth, config: RunConfig,
                 profiles: Sequence[CookieProfile] | None = None) -> MetricsReport:
    """All repetitions of the four-step pipeline; see module docstring."""
    from .tokenizer import build_profiles

    config.validate()
    if profiles is None:
        with stage("profiles"):
            profiles = build_profiles(events)
    results = []
    for rep in range(config.split.repetitions):
        log.info("repetition %d/%d", rep + 1, config.split.repetitions)
        results.append(run_repetition(profiles, truth, config, rep))
    return MetricsReport(config.to_record(), results)


# ------------------------------------------------------------------ report files


def write_report(outdir: str | Path, report: MetricsReport, manifest: Mapping | None = None) -> None:
    """report.json, topn.csv, metrics.csv and summary.txt (plus manifest.json)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rec = report.to_record()
    with open(outdir / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(rec, fh, indent=1, sort_keys=True)
        fh.write("\n")
    summ = rec["summary"]
    with open(outdir / "topn.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["representation", "N", "mean", "std"])
        for label, accs in summ["topn"].items():
            for n, v in accs.items():
                w.writerow([label, n, repr(v["mean"]), repr(v["std"])])
    with open(outdir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "seed", "mode", "precision", "recall", "f1", "aucpr",
                    f"candidate_recall_at_{report.config['k']}", "threshold"])
        k = report.config["k"]
        for r in report.repetitions:
            w.writerow([r.rep, r.seed, r.mode, repr(r.precision), repr(r.recall), repr(r.f1),
                        repr(r.aucpr), repr(r.candidate_recall[k]), repr(r.threshold)])
    with open(outdir / "summary.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_summary(report))
    if manifest is not None:
        with open(outdir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")


def format_summary(report: MetricsReport) -> str:
    summ = report.summary()
    lines = [f"repetitions: {len(report.repetitions)}  mode: {report.repetitions[0].mode}", ""]
    ns = list(next(iter(summ["topn"].values())).keys())
    lines.append("TopN accuracy (%, mean +- std)")
    lines.append("  " + "representation".ljust(60) + "".join(f"Top{n}".rjust(16) for n in ns))
    for label, accs in summ["topn"].items():
        cells = "".join(f"{100 * accs[n]['mean']:9.2f} +-{100 * accs[n]['std']:4.2f}" for n in ns)
        lines.append("  " + label.ljust(60) + cells)
    lines.append("")
    for key in ("precision", "recall", "f1", "aucpr", "directed_recall"):
        v = summ[key]
        lines.append(f"{key:>16}: {100 * v['mean']:6.2f}% +- {100 * v['std']:.2f}")
    for n, v in summ["candidate_recall"].items():
        lines.append(f"{'cand_recall@' + n:>16}: {100 * v['mean']:6.2f}% +- {100 * v['std']:.2f}")
    if "pair_distribution" in summ:
        pd = summ["pair_distribution"]
        lines.append(
            "pairs train-only / test-only / cross: "
            + " / ".join(f"{100 * pd[k]['mean']:.1f}%" for k in ("train_only", "test_only", "cross"))
        )
    return "\n".join(lines) + "\n"
