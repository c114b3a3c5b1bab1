"""Synthetic browsing-log generator with email-level ground truth.

Every email owns a latent persona (home city, devices, favourite routes,
planned trips, preferred websites).  Each of its cookies samples events from
that persona, with a per-view probability of staying "on persona" instead of
drawing from the global popularity distribution.  Tokens are emitted already
anonymized (``city_00042``, ``org_0007`` ...).
"""

from __future__ import annotations

import configparser
import csv
import datetime as dt
import hashlib
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EPOCH_START = dt.datetime(2019, 1, 1, tzinfo=dt.timezone.utc)
SECONDS_PER_DAY = 86_400

DEFAULT_VOCAB_SIZES = {
    "airports_origin": 1730,
    "airports_dest": 2115,
    "geoip_cities": 14880,
    "useragents": 23872,
    "product_types": 4,
    "geoip_countries": 197,
    "website_domains": 58,
    "languages": 24,
}

DEFAULT_VIEW_CONSISTENCY = {
    "ond": 0.45,
    "dates": 0.3,
    "geoipcity": 0.55,
    "useragent": 0.35,
    "domain": 0.7,
    "passengers": 0.75,
    "language": 0.9,
    "product": 0.7,
}

# mean ~2.1 cookies per email, as in the 87 574 / 41 732 ratio
DEFAULT_COOKIES_PER_EMAIL = (0.17, 0.60, 0.19, 0.03, 0.008, 0.002)

NOISE_PRODUCT_VOCAB = 900
NOISE_PRODUCTS_PER_URL = 3
NOISE_CAMPAIGN_VOCAB = 400

PAGES = ("home", "search", "results", "select", "pricing", "book")


class ConfigError(ValueError):
    """Raised for an invalid generator or run configuration field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class GeneratorConfig:
    seed: int = 42
    num_emails: int = 2000
    cookies_per_email_distribution: tuple[float, ...] = DEFAULT_COOKIES_PER_EMAIL
    mean_unique_urls_per_cookie: float = 12.9
    vocab_sizes: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_VOCAB_SIZES))
    time_span_days: int = 270
    view_consistency: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_VIEW_CONSISTENCY)
    )

    def validate(self) -> None:
        if not isinstance(self.seed, (int, np.integer)):
            raise ConfigError("seed", "must be an integer")
        if self.num_emails < 0:
            raise ConfigError("num_emails", "must be >= 0")
        dist = self.cookies_per_email_distribution
        if len(dist) != 6:
            raise ConfigError("cookies_per_email_distribution", "needs 6 probabilities (1..6 cookies)")
        if any(p < 0 or p > 1 for p in dist):
            raise ConfigError("cookies_per_email_distribution", "probabilities must lie in [0, 1]")
        if not math.isclose(sum(dist), 1.0, abs_tol=1e-9):
            raise ConfigError("cookies_per_email_distribution", f"sums to {sum(dist)}, not 1")
        if not self.mean_unique_urls_per_cookie > 2:
            raise ConfigError("mean_unique_urls_per_cookie", "must be > 2 (every cookie has >= 2 URLs)")
        for name, size in self.vocab_sizes.items():
            if name not in DEFAULT_VOCAB_SIZES:
                raise ConfigError(f"vocab_sizes.{name}", "unknown vocabulary")
            if int(size) <= 0:
                raise ConfigError(f"vocab_sizes.{name}", "must be > 0")
        if self.time_span_days <= 0:
            raise ConfigError("time_span_days", "must be > 0")
        for name, p in self.view_consistency.items():
            if name not in DEFAULT_VIEW_CONSISTENCY:
                raise ConfigError(f"view_consistency.{name}", "unknown view")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"view_consistency.{name}", "must lie in [0, 1]")

    def vocab(self, name: str) -> int:
        return int(self.vocab_sizes.get(name, DEFAULT_VOCAB_SIZES[name]))

    def consistency(self, name: str) -> float:
        return float(self.view_consistency.get(name, DEFAULT_VIEW_CONSISTENCY[name]))


@dataclass(frozen=True)
class Event:
    cookie_id: str
    timestamp: int
    url_tokens: tuple[str, ...]
    origin: str
    destination: str
    departure_date: str
    return_date: str | None
    geoip_city: str
    geoip_country: str
    user_agent_tokens: tuple[str, ...]
    os: str
    passengers: int
    product_type: str
    search_level: int
    website_domain: str
    language: str

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["url_tokens"] = list(self.url_tokens)
        rec["user_agent_tokens"] = list(self.user_agent_tokens)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "Event":
        return cls(
            cookie_id=str(rec["cookie_id"]),
            timestamp=int(rec["timestamp"]),
            url_tokens=tuple(rec["url_tokens"]),
            origin=rec["origin"],
            destination=rec["destination"],
            departure_date=rec["departure_date"],
            return_date=rec.get("return_date"),
            geoip_city=rec["geoip_city"],
            geoip_country=rec["geoip_country"],
            user_agent_tokens=tuple(rec["user_agent_tokens"]),
            os=rec["os"],
            passengers=int(rec["passengers"]),
            product_type=rec["product_type"],
            search_level=int(rec["search_level"]),
            website_domain=rec["website_domain"],
            language=rec["language"],
        )


@dataclass
class GroundTruth:
    """email_id -> cookie ids.  Matching pairs are sorted (a, b) tuples with a < b."""

    emails: dict[str, frozenset[str]]

    def __post_init__(self):
        self.email_of: dict[str, str] = {}
        for email, cookies in self.emails.items():
            for c in cookies:
                if c in self.email_of:
                    raise ValueError(f"cookie {c} listed under {self.email_of[c]} and {email}")
                self.email_of[c] = email

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str]]) -> "GroundTruth":
        groups: dict[str, set[str]] = defaultdict(set)
        for email, cookie in rows:
            groups[email].add(cookie)
        return cls({e: frozenset(c) for e, c in sorted(groups.items())})

    @property
    def cookies(self) -> list[str]:
        return sorted(self.email_of)

    def pairs(self) -> set[tuple[str, str]]:
        out = set()
        for cookies in self.emails.values():
            out.update(combinations(sorted(cookies), 2))
        return out

    def matches(self, cookie: str) -> set[str]:
        email = self.email_of.get(cookie)
        if email is None:
            return set()
        return set(self.emails[email]) - {cookie}

    def is_match(self, a: str, b: str) -> bool:
        ea = self.email_of.get(a)
        return a != b and ea is not None and ea == self.email_of.get(b)

    def restrict(self, cookies: Iterable[str]) -> "GroundTruth":
        keep = set(cookies)
        emails = {}
        for e, cs in self.emails.items():
            sub = cs & keep
            if sub:
                emails[e] = frozenset(sub)
        return GroundTruth(emails)


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=float) ** exponent
    return w / w.sum()


def _day_iso(day: int) -> str:
    return (EPOCH_START + dt.timedelta(days=int(day))).date().isoformat()


def _date_token(iso: str) -> str:
    return "dt_" + iso.replace("-", "")


class _Sampler:
    """Categorical draws over a popularity-skewed vocabulary (inverse-CDF)."""

    def __init__(self, rng: np.random.Generator, n: int, exponent: float):
        self.rng = rng
        self.cdf = np.cumsum(_zipf_weights(n, exponent))
        self.cdf[-1] = 1.0

    def draw(self, size: int | None = None):
        u = self.rng.random(size)
        return np.searchsorted(self.cdf, u, side="right")


def generate_corpus(config: GeneratorConfig) -> tuple[list[Event], GroundTruth]:
    """Generate an event log and its ground truth.  Deterministic in ``config``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_emails = int(config.num_emails)
    if n_emails == 0:
        return [], GroundTruth({})

    span = int(config.time_span_days)
    n_cities = config.vocab("geoip_cities")
    n_countries = config.vocab("geoip_countries")
    n_ua = config.vocab("useragents")
    n_lang = config.vocab("languages")
    n_dom = config.vocab("website_domains")
    n_prod = config.vocab("product_types")

    city_country = rng.integers(0, n_countries, size=n_cities)
    cities = _Sampler(rng, n_cities, 0.9)
    origins = _Sampler(rng, config.vocab("airports_origin"), 1.0)
    dests = _Sampler(rng, config.vocab("airports_dest"), 0.9)
    uas = _Sampler(rng, n_ua, 1.05)
    langs = _Sampler(rng, n_lang, 1.3)
    domains = _Sampler(rng, n_dom, 1.1)
    products = _Sampler(rng, NOISE_PRODUCT_VOCAB, 0.8)
    campaigns = _Sampler(rng, NOISE_CAMPAIGN_VOCAB, 0.9)

    c_ond = config.consistency("ond")
    c_dates = config.consistency("dates")
    c_city = config.consistency("geoipcity")
    c_ua = config.consistency("useragent")
    c_dom = config.consistency("domain")
    c_pax = config.consistency("passengers")
    c_lang = config.consistency("language")
    c_prod = config.consistency("product")

    cookies_per_email = rng.choice(
        np.arange(1, 7), size=n_emails, p=np.asarray(config.cookies_per_email_distribution)
    )
    n_cookies = int(cookies_per_email.sum())
    # anonymous ids: a random permutation so id order carries no email information
    id_width = max(7, len(str(n_cookies)))
    cookie_ids = [f"c{i:0{id_width}d}" for i in rng.permutation(n_cookies)]

    extra_mean = config.mean_unique_urls_per_cookie - 2.0
    events: list[Event] = []
    emails: dict[str, frozenset[str]] = {}
    next_cookie = 0

    for e in range(n_emails):
        email_id = f"e{e:0{max(6, len(str(n_emails)))}d}"
        # persona
        home_city = int(cities.draw())
        home_origin = int(origins.draw())
        fav_dests = [int(d) for d in dests.draw(1 + rng.poisson(0.8))]
        devices = [int(u) for u in uas.draw(1 + rng.poisson(0.7))]
        language = int(langs.draw())
        pref_domains = [int(d) for d in domains.draw(1 + rng.poisson(0.4))]
        pref_pax = int(rng.choice([1, 2, 3, 4], p=[0.5, 0.3, 0.12, 0.08]))
        pref_prod = int(rng.integers(n_prod))
        funnel_depth = 0.25 + 0.6 * rng.random()
        lead_mean = 10.0 + rng.exponential(40.0)
        window = int(rng.integers(20, 121))
        win_start = int(rng.integers(0, max(1, span - window)))
        trips = []
        for _ in range(1 + rng.poisson(1.0)):
            dep = win_start + int(rng.integers(0, window)) + 1 + int(rng.exponential(lead_mean))
            ret = dep + 1 + int(rng.integers(0, 14)) if rng.random() < 0.7 else None
            trips.append((home_origin, fav_dests[int(rng.integers(len(fav_dests)))], dep, ret))

        members = []
        for _ in range(int(cookies_per_email[e])):
            cid = cookie_ids[next_cookie]
            next_cookie += 1
            members.append(cid)
            ua = devices[int(rng.integers(len(devices)))] if rng.random() < c_ua else int(uas.draw())
            ua_tokens = (f"uaf_{ua % 11:02d}", f"uav_{ua % 89:02d}", f"os_{(ua // 11) % 7}", f"uam_{ua:05d}")
            os_token = ua_tokens[2]
            start = win_start + int(rng.integers(0, window))
            life = 1 + int(rng.exponential(12.0))
            end = min(span - 1, start + life)
            start = min(start, end)
            n_unique = 2 + int(rng.poisson(rng.gamma(1.5, extra_mean / 1.5)))
            times = np.sort(
                rng.integers(start * SECONDS_PER_DAY, (end + 1) * SECONDS_PER_DAY, size=n_unique)
            )
            session = rng.integers(0, 16**8)
            last_fields = None
            for ts in times:
                day = int(ts) // SECONDS_PER_DAY
                future = [tr for tr in trips if tr[2] > day]
                trip = future[int(rng.integers(len(future)))] if future else None
                if trip is not None and rng.random() < c_ond:
                    o, d = trip[0], trip[1]
                else:
                    o, d = int(origins.draw()), int(dests.draw())
                if trip is not None and rng.random() < c_dates:
                    dep, ret = trip[2], trip[3]
                else:
                    dep = day + 1 + int(rng.exponential(lead_mean))
                    ret = dep + 1 + int(rng.integers(0, 14)) if rng.random() < 0.6 else None
                city = home_city if rng.random() < c_city else int(cities.draw())
                dom = (
                    pref_domains[int(rng.integers(len(pref_domains)))]
                    if rng.random() < c_dom
                    else int(domains.draw())
                )
                lang = language if rng.random() < c_lang else int(langs.draw())
                pax = pref_pax if rng.random() < c_pax else int(rng.integers(1, 7))
                prod = pref_prod if rng.random() < c_prod else int(rng.integers(n_prod))
                level = min(len(PAGES) - 2, int(rng.geometric(1.0 - funnel_depth)) - 1)
                if rng.random() < 0.1:
                    session = rng.integers(0, 16**8)

                dep_iso = _day_iso(dep)
                ret_iso = _day_iso(ret) if ret is not None else None
                tokens = [
                    f"dom_{dom:02d}",
                    f"lang_{lang:02d}",
                    PAGES[level + 1],
                    f"prod_{prod}",
                    f"lvl_{level}",
                    f"org_{o:04d}",
                    f"dst_{d:04d}",
                    _date_token(dep_iso),
                ]
                if ret_iso is not None:
                    tokens.append(_date_token(ret_iso))
                tokens += [f"pax_{pax}", f"sid_{int(session):08x}"]
                # listing / sorting / campaign tokens: frequent but carry no identity
                tokens += [f"pid_{int(i):04d}" for i in products.draw(NOISE_PRODUCTS_PER_URL)]
                tokens += [
                    f"sort_{int(rng.integers(6))}",
                    f"cls_{int(rng.integers(8))}",
                    f"cmp_{int(campaigns.draw()):03d}",
                ]
                fields = dict(
                    url_tokens=tuple(tokens),
                    origin=f"org_{o:04d}",
                    destination=f"dst_{d:04d}",
                    departure_date=dep_iso,
                    return_date=ret_iso,
                    geoip_city=f"city_{city:05d}",
                    geoip_country=f"ctry_{int(city_country[city]):03d}",
                    user_agent_tokens=ua_tokens,
                    os=os_token,
                    passengers=pax,
                    product_type=f"prod_{prod}",
                    search_level=level,
                    website_domain=f"dom_{dom:02d}",
                    language=f"lang_{lang:02d}",
                )
                if last_fields is not None and rng.random() < 0.05:
                    fields = last_fields  # page reload: same URL again
                last_fields = fields
                events.append(
                    Event(cookie_id=cid, timestamp=int(EPOCH_START.timestamp()) + int(ts), **fields)
                )
        emails[email_id] = frozenset(members)

    events.sort(key=lambda ev: (ev.timestamp, ev.cookie_id))
    return events, GroundTruth(emails)


@dataclass
class CorpusStats:
    cookie_ids: int = 0
    emails: int = 0
    matching_pairs: int = 0
    distinct_urls: int = 0
    avg_unique_urls_per_cookie: float = 0.0
    distinct_user_agents: int = 0
    departure_airports: int = 0
    destination_airports: int = 0
    product_types: int = 0
    geoip_countries: int = 0
    geoip_cities: int = 0

    def rows(self) -> list[tuple[str, float]]:
        return list(asdict(self).items())


def corpus_stats(events: Sequence[Event], truth: GroundTruth) -> CorpusStats:
    if not events:
        return CorpusStats()
    urls_by_cookie: dict[str, set[tuple[str, ...]]] = defaultdict(set)
    for ev in events:
        urls_by_cookie[ev.cookie_id].add(ev.url_tokens)
    return CorpusStats(
        cookie_ids=len(urls_by_cookie),
        emails=len(truth.emails),
        matching_pairs=sum(math.comb(len(c), 2) for c in truth.emails.values()),
        distinct_urls=len({ev.url_tokens for ev in events}),
        avg_unique_urls_per_cookie=sum(len(u) for u in urls_by_cookie.values()) / len(urls_by_cookie),
        distinct_user_agents=len({ev.user_agent_tokens for ev in events}),
        departure_airports=len({ev.origin for ev in events}),
        destination_airports=len({ev.destination for ev in events}),
        product_types=len({ev.product_type for ev in events}),
        geoip_countries=len({ev.geoip_country for ev in events}),
        geoip_cities=len({ev.geoip_city for ev in events}),
    )


# ---------------------------------------------------------------- file formats


def write_events(path: str | Path, events: Iterable[Event]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_record(), separators=(",", ":")) + "\n")


def read_events(path: str | Path) -> list[Event]:
    with open(path, encoding="utf-8") as fh:
        return [Event.from_record(json.loads(line)) for line in fh if line.strip()]


def write_truth(path: str | Path, truth: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["email_id", "cookie_id"])
        for email in sorted(truth.emails):
            for cookie in sorted(truth.emails[email]):
                w.writerow([email, cookie])


def read_truth(path: str | Path) -> GroundTruth:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return GroundTruth.from_rows((r["email_id"], r["cookie_id"]) for r in reader)


_GENERATOR_KEYS = (
    "seed",
    "num_emails",
    "mean_unique_urls_per_cookie",
    "time_span_days",
    "cookies_per_email_distribution",
)


def load_generator_config(path: str | Path | None = None, **overrides) -> GeneratorConfig:
    """Read an INI file; every key is optional.

    ``[generator]`` holds seed, num_emails, mean_unique_urls_per_cookie,
    time_span_days and cookies_per_email_distribution (comma separated);
    ``[vocab_sizes]`` and ``[view_consistency]`` hold per-name overrides.
    """
    cfg = GeneratorConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise ConfigError("config", f"cannot read {path}")
        for section in parser.sections():
            if section not in ("generator", "vocab_sizes", "view_consistency"):
                raise ConfigError(section, "unknown section")
        if parser.has_section("generator"):
            sec = parser["generator"]
            for key in sec:
                if key not in _GENERATOR_KEYS:
                    raise ConfigError(f"generator.{key}", "unknown key")
            try:
                if "seed" in sec:
                    cfg.seed = sec.getint("seed")
                if "num_emails" in sec:
                    cfg.num_emails = sec.getint("num_emails")
                if "mean_unique_urls_per_cookie" in sec:
                    cfg.mean_unique_urls_per_cookie = sec.getfloat("mean_unique_urls_per_cookie")
                if "time_span_days" in sec:
                    cfg.time_span_days = sec.getint("time_span_days")
                if "cookies_per_email_distribution" in sec:
                    cfg.cookies_per_email_distribution = tuple(
                        float(x) for x in sec["cookies_per_email_distribution"].split(",")
                    )
            except ValueError as exc:
                raise ConfigError("generator", str(exc)) from None
        for section, target, conv in (
            ("vocab_sizes", cfg.vocab_sizes, int),
            ("view_consistency", cfg.view_consistency, float),
        ):
            if parser.has_section(section):
                for key, value in parser[section].items():
                    if key not in target:
                        raise ConfigError(f"{section}.{key}", "unknown key")
                    try:
                        target[key] = conv(value)
                    except ValueError:
                        raise ConfigError(f"{section}.{key}", f"bad value {value!r}") from None
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def corpus_digest(events: Sequence[Event], truth: GroundTruth) -> str:
    h = hashlib.sha256()
    for ev in events:
        h.update(json.dumps(ev.to_record(), separators=(",", ":")).encode())
    for email in sorted(truth.emails):
        h.update(f"{email}:{','.join(sorted(truth.emails[email]))}\n".encode())
    return h.hexdigest()
