"""Pairwise feature records for candidate cookie pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .simfusion import _Scored
from .tokenizer import CookieProfile

FULL_FEATURES = (
    "same_passengers",
    "jaccard_passengers",
    "same_os",
    "same_city",
    "search_level_diff",
    "time_range_overlap_days",
    "time_to_flight_diff",
    "jaccard_ond",
    "jaccard_dates",
    "jaccard_city",
    "jaccard_useragent",
    "cosine_ond",
    "cosine_dates",
    "cosine_city",
    "cosine_useragent",
    "cosine_urls",
    "overall_similarity",
)

REDUCED_FEATURES = (
    "cosine_domain",
    "cosine_ond",
    "cosine_dates",
    "same_language",
    "jaccard_ond",
    "jaccard_passengers",
    "time_to_flight_diff",
    "overall_similarity",
)

PRESETS = {"full": FULL_FEATURES, "reduced": REDUCED_FEATURES}

# feature -> representation it reads
COSINE_SOURCES = {
    "cosine_ond": "ond",
    "cosine_dates": "dates",
    "cosine_city": "geoipcity",
    "cosine_useragent": "useragent",
    "cosine_urls": "supervised_url",
    "cosine_domain": "domain",
}


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def overlap_days(p1: tuple[int, int], p2: tuple[int, int]) -> int:
    """Inclusive count of days shared by two activity periods."""
    return max(0, min(p1[1], p2[1]) - max(p1[0], p2[0]) + 1)


def mean_gap(profile: CookieProfile) -> float | None:
    gaps = profile.travel_search_gaps
    if not gaps:
        return None
    return sum(gaps) / len(gaps)


def time_to_flight(profile: CookieProfile, impute: float = 0.0) -> float:
    g = mean_gap(profile)
    return impute if g is None else g


def population_mean_gap(profiles: Sequence[CookieProfile]) -> float:
    means = [g for g in (mean_gap(p) for p in profiles) if g is not None]
    return sum(means) / len(means) if means else 0.0


@dataclass
class FeatureContext:
    """Everything featurize() needs besides the pair itself.

    ``representations`` maps a view name to any scorer exposing ``pair_scores``;
    ``fused`` yields overall similarity.
    """

    profiles: Mapping[str, CookieProfile]
    representations: Mapping[str, _Scored]
    fused: _Scored
    impute_gap: float = 0.0
    preset: str = "full"

    @property
    def columns(self) -> tuple[str, ...]:
        return PRESETS[self.preset]


def _cosine_source(ctx: FeatureContext, feature: str) -> _Scored:
    view = COSINE_SOURCES[feature]
    if view == "supervised_url" and view not in ctx.representations:
        view = "unsupervised_url"
    if view not in ctx.representations:
        raise KeyError(f"{feature} needs the {COSINE_SOURCES[feature]} representation")
    return ctx.representations[view]


def _scalar_features(pu: CookieProfile, pv: CookieProfile, ctx: FeatureContext) -> dict[str, float]:
    lu = sum(pu.search_levels) / len(pu.search_levels) if pu.search_levels else 0.0
    lv = sum(pv.search_levels) / len(pv.search_levels) if pv.search_levels else 0.0
    return {
        "same_passengers": float(pu.passengers_mode == pv.passengers_mode),
        "jaccard_passengers": jaccard(pu.passengers_set, pv.passengers_set),
        "same_os": float(pu.os_mode == pv.os_mode),
        "same_city": float(pu.city_mode == pv.city_mode),
        "same_language": float(pu.language_mode == pv.language_mode),
        "search_level_diff": abs(lu - lv),
        "time_range_overlap_days": float(overlap_days(pu.activity_period, pv.activity_period)),
        "time_to_flight_diff": abs(
            time_to_flight(pu, ctx.impute_gap) - time_to_flight(pv, ctx.impute_gap)
        ),
        "jaccard_ond": jaccard(pu.ond_set, pv.ond_set),
        "jaccard_dates": jaccard(pu.dates_set, pv.dates_set),
        "jaccard_city": jaccard(pu.city_set, pv.city_set),
        "jaccard_useragent": jaccard(pu.useragent_token_set, pv.useragent_token_set),
    }


def featurize_pairs(pairs: Sequence[tuple[str, str]], ctx: FeatureContext) -> np.ndarray:
    """Feature matrix (one row per pair, columns ``ctx.columns``)."""
    cols = ctx.columns
    out = np.zeros((len(pairs), len(cols)))
    if not pairs:
        return out
    for u, v in pairs:
        for c in (u, v):
            if c not in ctx.profiles:
                raise KeyError(f"unknown cookie id {c}")
    # order-independent pair keys keep every feature symmetric in (u, v)
    keyed = [(u, v) if u <= v else (v, u) for u, v in pairs]
    vector_cols = {}
    for j, name in enumerate(cols):
        if name in COSINE_SOURCES:
            vector_cols[j] = _cosine_source(ctx, name).pair_scores(keyed)
        elif name == "overall_similarity":
            vector_cols[j] = ctx.fused.pair_scores(keyed)
    scalar_idx = [j for j in range(len(cols)) if j not in vector_cols]
    for i, (u, v) in enumerate(keyed):
        sf = _scalar_features(ctx.profiles[u], ctx.profiles[v], ctx)
        for j in scalar_idx:
            out[i, j] = sf[cols[j]]
    for j, values in vector_cols.items():
        out[:, j] = values
    return out


def featurize(u: str, v: str, ctx: FeatureContext) -> dict[str, float]:
    row = featurize_pairs([(u, v)], ctx)[0]
    return dict(zip(ctx.columns, row.tolist()))


def write_feature_table(path: str | Path, pairs, columns, X: np.ndarray, labels=None) -> None:
    """CSV: u, v, <feature columns in fixed order>, label (last)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v", *columns, "label"])
        for i, (u, v) in enumerate(pairs):
            lab = "" if labels is None or labels[i] is None else int(labels[i])
            w.writerow([u, v, *(repr(float(x)) for x in X[i]), lab])


def read_feature_table(path: str | Path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        columns = header[2:-1]
        pairs, rows, labels = [], [], []
        for rec in reader:
            pairs.append((rec[0], rec[1]))
            rows.append([float(x) for x in rec[2:-1]])
            labels.append(None if rec[-1] == "" else int(rec[-1]))
    X = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    return pairs, columns, X, labels
