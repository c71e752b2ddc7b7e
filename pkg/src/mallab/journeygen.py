"""Seeded synthetic click journeys with a known conversion process.

Conversion follows a geometric-carryover logit: the last click contributes its
full user-ad affinity and each earlier click contributes a decayed share, so
early clicks genuinely carry signal in industries with a high carryover.

All randomness goes through numpy's Philox counter-based generator, keyed by
``(seed, stream, user_id)``.  Each user has an independent stream, which makes
the output independent of generation order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError

# Philox key prefixes for independent streams.
_STREAM_LATENT = 1
_STREAM_USER = 2

RECENCY_EDGES_S = (3600, 4 * 3600, 86400, 3 * 86400, 7 * 86400)  # log-spaced


@dataclass(frozen=True)
class IndustryProfile:
    mean_clicks: float
    carryover_gamma: float


def _default_profiles() -> tuple[IndustryProfile, ...]:
    # two long-path industries with strong carryover, five short-path ones, one in between
    return (
        IndustryProfile(1.8, 1.0),
        IndustryProfile(1.7, 0.9),
        IndustryProfile(1.3, 0.5),
        IndustryProfile(1.1, 0.2),
        IndustryProfile(1.05, 0.1),
        IndustryProfile(1.05, 0.0),
        IndustryProfile(1.1, 0.3),
        IndustryProfile(1.05, 0.2),
    )


@dataclass(frozen=True)
class GenConfig:
    n_users: int = 5000
    n_ads: int = 8000
    n_industries: int = 8
    latent_dim: int = 8
    journeys_per_user_mean: float = 18.0
    industry_path_profile: tuple[IndustryProfile, ...] = field(default_factory=_default_profiles)
    conv_bias: float = -3.0
    affinity_scale: float = 1.5
    seed: int = 7
    # latent vectors are [1, user_bias, factors] / [ad_bias, 1, factors], so
    # <u, a> = ad_bias + user_bias + <factors_u, factors_a>
    user_bias_std: float = 0.5
    ad_bias_std: float = 1.0
    interaction_std: float = 0.5
    span_days: float = 60.0
    click_gap_mean_s: float = 86400.0
    conv_delay_mean_s: float = 6 * 3600.0
    repeat_ad_prob: float = 0.0
    max_clicks: int = 12

    def validate(self) -> "GenConfig":
        for name in ("n_users", "n_ads", "n_industries", "latent_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.journeys_per_user_mean <= 0:
            raise ConfigError(f"journeys_per_user_mean must be positive, got {self.journeys_per_user_mean}")
        if len(self.industry_path_profile) != self.n_industries:
            raise ConfigError(
                f"industry_path_profile has {len(self.industry_path_profile)} entries but n_industries={self.n_industries}"
            )
        if self.n_ads < self.n_industries:
            raise ConfigError(f"n_ads ({self.n_ads}) must be >= n_industries ({self.n_industries})")
        for i, prof in enumerate(self.industry_path_profile):
            if prof.mean_clicks < 1:
                raise ConfigError(f"industry_path_profile[{i}].mean_clicks must be >= 1, got {prof.mean_clicks}")
            if not 0.0 <= prof.carryover_gamma <= 1.0:
                raise ConfigError(
                    f"industry_path_profile[{i}].carryover_gamma must lie in [0, 1], got {prof.carryover_gamma}"
                )
        if self.long_path_industries() == [] or self.short_path_industries() == []:
            raise ConfigError(
                "industry_path_profile needs at least one carryover_gamma >= 0.8 and one <= 0.3"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.span_days <= 0 or self.click_gap_mean_s <= 0 or self.conv_delay_mean_s <= 0:
            raise ConfigError("span_days, click_gap_mean_s and conv_delay_mean_s must be positive")
        if min(self.user_bias_std, self.ad_bias_std, self.interaction_std) < 0:
            raise ConfigError("latent standard deviations must be nonnegative")
        if not 0.0 <= self.repeat_ad_prob <= 1.0:
            raise ConfigError(f"repeat_ad_prob must lie in [0, 1], got {self.repeat_ad_prob}")
        if self.max_clicks < 1:
            raise ConfigError(f"max_clicks must be >= 1, got {self.max_clicks}")
        return self

    def long_path_industries(self) -> list[int]:
        return [i for i, p in enumerate(self.industry_path_profile) if p.carryover_gamma >= 0.8]

    def short_path_industries(self) -> list[int]:
        return [i for i, p in enumerate(self.industry_path_profile) if p.carryover_gamma <= 0.3]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["industry_path_profile"] = [asdict(p) for p in self.industry_path_profile]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "industry_path_profile" in d:
            d["industry_path_profile"] = tuple(
                p if isinstance(p, IndustryProfile) else IndustryProfile(**p) for p in d["industry_path_profile"]
            )
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Touchpoint:
    ad_id: int
    industry_id: int
    ts: int
    position: int


@dataclass(frozen=True)
class Journey:
    user_id: int
    journey_id: int
    industry_id: int
    clicks: tuple[Touchpoint, ...]
    conversion_ts: int | None = None

    @property
    def converted(self) -> bool:
        return self.conversion_ts is not None

    @property
    def completion_ts(self) -> int:
        return self.conversion_ts if self.conversion_ts is not None else self.clicks[-1].ts

    def validate(self) -> None:
        if not self.clicks:
            raise IntegrityError(f"journey {self.journey_id}: no clicks")
        for i, c in enumerate(self.clicks):
            if c.position != i:
                raise IntegrityError(f"journey {self.journey_id}: click {i} has position {c.position}")
            if i and c.ts <= self.clicks[i - 1].ts:
                raise IntegrityError(f"journey {self.journey_id}: click timestamps are not strictly increasing")
        if self.conversion_ts is not None and self.conversion_ts <= self.clicks[-1].ts:
            raise IntegrityError(f"journey {self.journey_id}: conversion precedes the last click")


@dataclass
class JourneyLog:
    journeys: list[Journey]
    gen_config_digest: str = ""

    def __len__(self) -> int:
        return len(self.journeys)

    def __iter__(self):
        return iter(self.journeys)


@dataclass(frozen=True)
class Latents:
    users: np.ndarray  # (n_users, latent_dim)
    ads: np.ndarray  # (n_ads, latent_dim)
    ad_industry: np.ndarray  # (n_ads,)


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed), (stream << 40) | index]))


def ad_industries(config: GenConfig) -> np.ndarray:
    return np.arange(config.n_ads) % config.n_industries


def make_latents(config: GenConfig) -> Latents:
    """Hidden user and ad vectors of width latent_dim + 2.  Never exposed to models."""
    rng = _rng(config.seed, _STREAM_LATENT)
    d = config.latent_dim
    # per-factor scale so that <factors_u, factors_a> has std interaction_std
    scale = math.sqrt(config.interaction_std) / d**0.25
    users = np.empty((config.n_users, d + 2))
    ads = np.empty((config.n_ads, d + 2))
    users[:, 0] = 1.0
    users[:, 1] = rng.normal(0.0, config.user_bias_std, size=config.n_users)
    users[:, 2:] = rng.normal(0.0, scale, size=(config.n_users, d))
    ads[:, 0] = rng.normal(0.0, config.ad_bias_std, size=config.n_ads)
    ads[:, 1] = 1.0
    ads[:, 2:] = rng.normal(0.0, scale, size=(config.n_ads, d))
    return Latents(users, ads, ad_industries(config))


def ground_truth_conv_prob(journey: Journey, latents: Latents, config: GenConfig) -> float:
    """sigma(bias + s*<u,a_k> + s*sum_{i<k} gamma^(k-1-i) <u,a_i>) for a k-click journey."""
    if not journey.clicks:
        raise ValueError("journey must have at least one click")
    gamma = config.industry_path_profile[journey.industry_id].carryover_gamma
    u = latents.users[journey.user_id]
    aff = latents.ads[[c.ad_id for c in journey.clicks]] @ u
    k = len(aff)
    decay = np.power(gamma, np.arange(k - 1, -1, -1, dtype=float)) if gamma > 0 else (np.arange(k) == k - 1).astype(float)
    return _logistic(config.conv_bias + config.affinity_scale * float(decay @ aff))


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _generate_user(user_id: int, config: GenConfig, latents: Latents, ads_by_industry: list[np.ndarray]) -> list[dict]:
    rng = _rng(config.seed, _STREAM_USER, user_id)
    n_j = max(1, int(rng.poisson(config.journeys_per_user_mean)))
    span = config.span_days * 86400.0
    out = []
    for _ in range(n_j):
        ind = int(rng.integers(config.n_industries))
        prof = config.industry_path_profile[ind]
        # 1-shifted geometric with mean mean_clicks
        k = 1 if prof.mean_clicks <= 1 else min(int(rng.geometric(1.0 / prof.mean_clicks)), config.max_clicks)
        pool = ads_by_industry[ind]
        ads = [int(pool[rng.integers(len(pool))])]
        for _ in range(k - 1):
            ads.append(ads[-1] if rng.random() < config.repeat_ad_prob else int(pool[rng.integers(len(pool))]))
        t = float(rng.uniform(0.0, span))
        ts = [int(t)]
        for _ in range(k - 1):
            ts.append(ts[-1] + 1 + int(rng.exponential(config.click_gap_mean_s)))
        clicks = tuple(Touchpoint(a, ind, s, i) for i, (a, s) in enumerate(zip(ads, ts)))
        j = Journey(user_id, -1, ind, clicks)
        p = ground_truth_conv_prob(j, latents, config)
        conv = ts[-1] + 1 + int(rng.exponential(config.conv_delay_mean_s)) if rng.random() < p else None
        out.append({"industry_id": ind, "clicks": clicks, "conversion_ts": conv})
    out.sort(key=lambda r: r["clicks"][0].ts)
    return out


def generate_dataset(config: GenConfig) -> JourneyLog:
    """Generate a deterministic journey log.  Journey ids ascend with (user_id, start ts)."""
    config.validate()
    latents = make_latents(config)
    ads_by_industry = [np.flatnonzero(latents.ad_industry == i) for i in range(config.n_industries)]
    journeys = []
    for uid in range(config.n_users):
        for rec in _generate_user(uid, config, latents, ads_by_industry):
            journeys.append(Journey(uid, len(journeys), rec["industry_id"], rec["clicks"], rec["conversion_ts"]))
    return JourneyLog(journeys, config.digest())


# ------------------------------------------------------------------------ io


def journey_to_json(j: Journey) -> str:
    rec = {
        "user_id": j.user_id,
        "journey_id": j.journey_id,
        "industry_id": j.industry_id,
        "clicks": [{"ad_id": c.ad_id, "ts": c.ts} for c in j.clicks],
        "conversion": None if j.conversion_ts is None else {"ts": j.conversion_ts},
    }
    return json.dumps(rec, separators=(",", ":"))


def journey_from_record(rec: dict) -> Journey:
    ind = int(rec["industry_id"])
    clicks = tuple(Touchpoint(int(c["ad_id"]), ind, int(c["ts"]), i) for i, c in enumerate(rec["clicks"]))
    conv = rec.get("conversion")
    return Journey(int(rec["user_id"]), int(rec["journey_id"]), ind, clicks, None if conv is None else int(conv["ts"]))


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_journeys(log: JourneyLog, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for j in log.journeys:
            fh.write(journey_to_json(j))
            fh.write("\n")
    meta_path(path).write_text(
        json.dumps({"gen_config_digest": log.gen_config_digest, "n_journeys": len(log)}, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def read_journeys(path) -> JourneyLog:
    path = Path(path)
    journeys: list[Journey] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                j = journey_from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path} line {lineno}: malformed journey record ({exc})") from exc
            j.validate()
            if j.journey_id in seen:
                raise IntegrityError(f"{path} line {lineno}: duplicate journey_id {j.journey_id}")
            seen.add(j.journey_id)
            journeys.append(j)
    digest = ""
    mp = meta_path(path)
    if mp.exists():
        digest = json.loads(mp.read_text(encoding="utf-8")).get("gen_config_digest", "")
    return JourneyLog(journeys, digest)


def split_train_test(
    log: JourneyLog, fraction: float | None = None, cutoff: int | None = None
) -> tuple[JourneyLog, JourneyLog]:
    """Temporal split on journey completion time (conversion, or last click).

    ``fraction`` is the share of journeys assigned to train; alternatively a
    ``cutoff`` timestamp puts journeys completing at or before it in train.
    """
    if (fraction is None) == (cutoff is None):
        raise ConfigError("give exactly one of fraction or cutoff")
    if not log.journeys:
        raise ConfigError("cannot split an empty journey log")
    if fraction is not None:
        if not 0.0 < fraction < 1.0:
            raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
        order = sorted(log.journeys, key=lambda j: (j.completion_ts, j.journey_id))
        n_train = int(round(fraction * len(order)))
        train, test = order[:n_train], order[n_train:]
    else:
        train = [j for j in log.journeys if j.completion_ts <= cutoff]
        test = [j for j in log.journeys if j.completion_ts > cutoff]
    if not train or not test:
        raise ConfigError(f"degenerate split: {len(train)} train / {len(test)} test journeys")
    train.sort(key=lambda j: j.journey_id)
    test.sort(key=lambda j: j.journey_id)
    return JourneyLog(train, log.gen_config_digest), JourneyLog(test, log.gen_config_digest)


def recency_bucket(gap_s: int | None) -> int:
    """0 for the first click of a journey, else 1 + index of the log-spaced gap bucket."""
    if gap_s is None:
        return 0
    b = 1
    for edge in RECENCY_EDGES_S:
        if gap_s < edge:
            return b
        b += 1
    return b


N_RECENCY_BUCKETS = len(RECENCY_EDGES_S) + 2
N_POSITION_BUCKETS = 4


def position_bucket(position: int) -> int:
    return min(position, N_POSITION_BUCKETS - 1)


def mean_journey_length(journeys: Sequence[Journey]) -> float:
    return float(np.mean([len(j.clicks) for j in journeys])) if journeys else 0.0
