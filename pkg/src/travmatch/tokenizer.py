"""Per-cookie view documents (token pools) and scalar profile attributes."""

from __future__ import annotations

import datetime as dt
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .synthlog import SECONDS_PER_DAY, Event

VIEW_NAMES = ("url", "ond", "dates", "useragent", "geoipcity", "domain")

_DELIMS = re.compile(r"[/?&=\-_.:]+")


class EmptyTokenError(ValueError):
    pass


def tokenize_url(url: str | Sequence[str]) -> list[str]:
    """Split a raw URL on ``/ ? & = - _ . :`` or lowercase a pre-tokenized one."""
    if isinstance(url, str):
        if not url:
            raise EmptyTokenError("empty URL")
        tokens = [t for t in _DELIMS.split(url.lower()) if t]
        if not tokens:
            raise EmptyTokenError(f"no tokens in {url!r}")
        return tokens
    tokens = [str(t).lower() for t in url]
    if not tokens:
        raise EmptyTokenError("empty token sequence")
    return tokens


def multilevel_expand(path_tokens: Sequence[str]) -> list[str]:
    """Cumulative prefixes joined without separator: [a, b, c] -> [a, ab, abc]."""
    out = []
    prefix = ""
    for tok in path_tokens:
        prefix += tok
        out.append(prefix)
    return out


def date_token(iso: str) -> str:
    return "dt_" + dt.date.fromisoformat(iso).strftime("%Y%m%d")


@dataclass
class CookieProfile:
    cookie_id: str
    view_docs: dict[str, Counter]
    os_mode: str
    city_mode: str
    passengers_mode: int
    passengers_set: frozenset[int]
    search_levels: list[int]
    activity_period: tuple[int, int]  # (first_day, last_day), days since unix epoch
    travel_search_gaps: list[int]
    language_mode: str
    first_timestamp: int = 0
    multilevel_doc: Counter = field(default_factory=Counter)

    @property
    def ond_set(self) -> frozenset[str]:
        return frozenset(self.view_docs["ond"])

    @property
    def dates_set(self) -> frozenset[str]:
        return frozenset(self.view_docs["dates"])

    @property
    def city_set(self) -> frozenset[str]:
        return frozenset(self.view_docs["geoipcity"])

    @property
    def useragent_token_set(self) -> frozenset[str]:
        return frozenset(self.view_docs["useragent"])

    @property
    def domain_set(self) -> frozenset[str]:
        return frozenset(self.view_docs["domain"])

    def to_record(self) -> dict:
        return {
            "cookie_id": self.cookie_id,
            "view_docs": {v: dict(sorted(c.items())) for v, c in self.view_docs.items()},
            "multilevel_doc": dict(sorted(self.multilevel_doc.items())),
            "os_mode": self.os_mode,
            "city_mode": self.city_mode,
            "passengers_mode": self.passengers_mode,
            "passengers_set": sorted(self.passengers_set),
            "search_levels": self.search_levels,
            "activity_period": list(self.activity_period),
            "travel_search_gaps": self.travel_search_gaps,
            "language_mode": self.language_mode,
            "first_timestamp": self.first_timestamp,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "CookieProfile":
        return cls(
            cookie_id=rec["cookie_id"],
            view_docs={v: Counter(d) for v, d in rec["view_docs"].items()},
            multilevel_doc=Counter(rec.get("multilevel_doc", {})),
            os_mode=rec["os_mode"],
            city_mode=rec["city_mode"],
            passengers_mode=int(rec["passengers_mode"]),
            passengers_set=frozenset(int(p) for p in rec["passengers_set"]),
            search_levels=[int(x) for x in rec["search_levels"]],
            activity_period=(int(rec["activity_period"][0]), int(rec["activity_period"][1])),
            travel_search_gaps=[int(x) for x in rec["travel_search_gaps"]],
            language_mode=rec["language_mode"],
            first_timestamp=int(rec.get("first_timestamp", 0)),
        )


def _mode(counter: Counter):
    # most frequent, ties -> smallest value
    best = max(counter.values())
    return min(k for k, c in counter.items() if c == best)


def group_events(events: Iterable[Event]) -> dict[str, list[Event]]:
    groups: dict[str, list[Event]] = defaultdict(list)
    for ev in events:
        groups[ev.cookie_id].append(ev)
    return dict(groups)


def build_profile(cookie_id: str, events: Sequence[Event], tally: Counter | None = None) -> CookieProfile:
    if not events:
        raise ValueError(f"cookie {cookie_id} has no events")
    docs = {v: Counter() for v in VIEW_NAMES}
    multilevel = Counter()
    os_c, city_c, pax_c, lang_c = Counter(), Counter(), Counter(), Counter()
    levels, gaps = [], []
    days = []
    for ev in events:
        url = tokenize_url(ev.url_tokens)
        docs["url"].update(url)
        multilevel.update(multilevel_expand(url))
        docs["ond"].update([ev.origin.lower(), ev.destination.lower()])
        docs["useragent"].update(t.lower() for t in ev.user_agent_tokens)
        docs["geoipcity"][ev.geoip_city.lower()] += 1
        docs["domain"][ev.website_domain.lower()] += 1
        os_c[ev.os] += 1
        city_c[ev.geoip_city] += 1
        pax_c[int(ev.passengers)] += 1
        lang_c[ev.language] += 1
        levels.append(int(ev.search_level))
        day = ev.timestamp // SECONDS_PER_DAY
        days.append(day)
        try:
            dep = dt.date.fromisoformat(ev.departure_date)
            ret = dt.date.fromisoformat(ev.return_date) if ev.return_date else None
        except (TypeError, ValueError):
            if tally is not None:
                tally["malformed_date"] += 1
            continue
        docs["dates"]["dt_" + dep.strftime("%Y%m%d")] += 1
        if ret is not None:
            docs["dates"]["dt_" + ret.strftime("%Y%m%d")] += 1
        gaps.append(dep.toordinal() - dt.date(1970, 1, 1).toordinal() - day)
    return CookieProfile(
        cookie_id=cookie_id,
        view_docs=docs,
        multilevel_doc=multilevel,
        os_mode=_mode(os_c),
        city_mode=_mode(city_c),
        passengers_mode=_mode(pax_c),
        passengers_set=frozenset(pax_c),
        search_levels=sorted(levels),
        activity_period=(min(days), max(days)),
        travel_search_gaps=sorted(gaps),
        language_mode=_mode(lang_c),
        first_timestamp=min(ev.timestamp for ev in events),
    )


def build_profiles(
    groups: Mapping[str, Sequence[Event]] | Iterable[Event], tally: Counter | None = None
) -> list[CookieProfile]:
    """One profile per cookie, sorted by cookie id.

    Accepts events already grouped by cookie or a flat event stream.
    Events with unparsable dates are left out of the date-derived fields and
    counted under ``tally["malformed_date"]``.
    """
    if not isinstance(groups, Mapping):
        groups = group_events(groups)
    return [build_profile(cid, groups[cid], tally) for cid in sorted(groups)]


def write_profiles(path: str | Path, profiles: Iterable[CookieProfile]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_record(), separators=(",", ":"), sort_keys=True) + "\n")


def read_profiles(path: str | Path) -> list[CookieProfile]:
    with open(path, encoding="utf-8") as fh:
        return [CookieProfile.from_record(json.loads(line)) for line in fh if line.strip()]
