"""Credit assignment, the fitted MTA stand-in, CAT labels and training samples."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .errors import CapacityError, ConfigError, DegenerateDataError, DomainError, ParseError
from .journeygen import (
    N_POSITION_BUCKETS,
    N_RECENCY_BUCKETS,
    Journey,
    JourneyLog,
    position_bucket,
    recency_bucket,
)

SHAPLEY_MAX_CLICKS = 12


class Tag(str, Enum):
    LAST_CLICK = "LastClick"
    FIRST_CLICK = "FirstClick"
    LINEAR = "Linear"
    TIME_DECAY = "TimeDecay"
    REMOVAL_EFFECT_MTA = "RemovalEffectMTA"
    SHAPLEY_MTA = "ShapleyMTA"

    def __str__(self) -> str:
        return self.value


DEFAULT_ORDER = (Tag.LAST_CLICK, Tag.FIRST_CLICK, Tag.LINEAR, Tag.REMOVAL_EFFECT_MTA)


@dataclass(frozen=True)
class MtaModel:
    theta: np.ndarray
    bias: float
    n_industries: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.theta)) or not np.isfinite(self.bias):
            raise DomainError("MtaModel coefficients must be finite")

    def click_scores(self, journey: Journey) -> np.ndarray:
        """theta . phi(t) for every click of the journey."""
        return mta_features(journey, self.n_industries) @ self.theta

    def set_value(self, scores: np.ndarray) -> float:
        return float(nc.sigmoid(self.bias + float(np.sum(scores))))

    def to_dict(self) -> dict:
        return {"theta": [float(x) for x in self.theta], "bias": float(self.bias), "n_industries": self.n_industries}

    @classmethod
    def from_dict(cls, d: dict) -> "MtaModel":
        return cls(np.asarray(d["theta"], dtype=float), float(d["bias"]), int(d["n_industries"]))


@dataclass(frozen=True)
class Mechanism:
    tag: Tag
    half_life: float | None = None
    mta: MtaModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "tag", Tag(self.tag))
        if self.tag is Tag.TIME_DECAY:
            if self.half_life is None or self.half_life <= 0:
                raise ConfigError(f"TimeDecay needs half_life > 0, got {self.half_life}")

    @property
    def needs_mta(self) -> bool:
        return self.tag in (Tag.REMOVAL_EFFECT_MTA, Tag.SHAPLEY_MTA)


# ------------------------------------------------------------------- credits


def mta_feature_dim(n_industries: int) -> int:
    return n_industries + N_POSITION_BUCKETS + N_RECENCY_BUCKETS


def mta_features(journey: Journey, n_industries: int) -> np.ndarray:
    """phi(t) per click: industry, position-bucket and recency-bucket one-hots."""
    k = len(journey.clicks)
    phi = np.zeros((k, mta_feature_dim(n_industries)))
    for i, c in enumerate(journey.clicks):
        gap = None if i == 0 else c.ts - journey.clicks[i - 1].ts
        phi[i, c.industry_id] = 1.0
        phi[i, n_industries + position_bucket(i)] = 1.0
        phi[i, n_industries + N_POSITION_BUCKETS + recency_bucket(gap)] = 1.0
    return phi


def _linear(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def _normalize_or_linear(raw: np.ndarray) -> np.ndarray:
    raw = np.maximum(raw, 0.0)
    total = raw.sum()
    if total <= 0.0:
        return _linear(len(raw))
    return raw / total


def removal_effects(model: MtaModel, journey: Journey) -> np.ndarray:
    s = model.click_scores(journey)
    full = model.set_value(s)
    total = s.sum()
    return np.array([full - float(nc.sigmoid(model.bias + total - si)) for si in s])


def shapley_values(model: MtaModel, journey: Journey) -> np.ndarray:
    """Exact (unclipped) Shapley values of v(S) = sigma(bias + sum_{t in S} theta.phi(t))."""
    s = model.click_scores(journey)
    n = len(s)
    if n > SHAPLEY_MAX_CLICKS:
        raise CapacityError(f"journey {journey.journey_id}: {n} clicks exceeds the exact Shapley bound of {SHAPLEY_MAX_CLICKS}")
    masks = np.arange(1 << n)
    bits = (masks[:, None] >> np.arange(n)) & 1
    v = nc.sigmoid(model.bias + bits @ s)
    size = bits.sum(axis=1)
    fact = np.array([np.prod(np.arange(1, m + 1), dtype=float) for m in range(n + 1)])
    out = np.empty(n)
    for i in range(n):
        without = bits[:, i] == 0
        m = masks[without]
        sz = size[without]
        w = fact[sz] * fact[n - sz - 1] / fact[n]
        out[i] = float(np.sum(w * (v[m | (1 << i)] - v[m])))
    return out


def attribute(mechanism: Mechanism, journey: Journey) -> np.ndarray:
    """Per-click credits.  Sums to 1 for a converting journey, all zero otherwise."""
    if mechanism.needs_mta and mechanism.mta is None:
        raise ConfigError(f"{mechanism.tag} requires a fitted MtaModel")
    k = len(journey.clicks)
    if journey.conversion_ts is None:
        if mechanism.tag is Tag.SHAPLEY_MTA and k > SHAPLEY_MAX_CLICKS:
            raise CapacityError(f"journey {journey.journey_id}: {k} clicks exceeds the exact Shapley bound")
        return np.zeros(k)
    tag = mechanism.tag
    if tag is Tag.LAST_CLICK:
        c = np.zeros(k)
        c[-1] = 1.0
        return c
    if tag is Tag.FIRST_CLICK:
        c = np.zeros(k)
        c[0] = 1.0
        return c
    if tag is Tag.LINEAR:
        return _linear(k)
    if tag is Tag.TIME_DECAY:
        age = np.array([journey.conversion_ts - c.ts for c in journey.clicks], dtype=float)
        # shift by the youngest age so the largest term is exactly 1
        raw = np.exp2(-(age - age.min()) / mechanism.half_life)
        return raw / raw.sum()
    if tag is Tag.REMOVAL_EFFECT_MTA:
        return _normalize_or_linear(removal_effects(mechanism.mta, journey))
    if tag is Tag.SHAPLEY_MTA:
        return _normalize_or_linear(shapley_values(mechanism.mta, journey))
    raise ConfigError(f"unknown mechanism {tag!r}")


# ------------------------------------------------------------------ MTA fit


@dataclass(frozen=True)
class MtaFitConfig:
    lr: float = 0.05
    steps: int = 400
    l2: float = 1e-4
    seed: int = 0


def journey_design(journeys: Sequence[Journey], n_industries: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows are sum_t phi(t) per journey; targets are conversion indicators."""
    X = np.stack([mta_features(j, n_industries).sum(axis=0) for j in journeys])
    y = np.array([1.0 if j.converted else 0.0 for j in journeys])
    return X, y


def mta_loss(X: np.ndarray, y: np.ndarray, theta: np.ndarray, bias: float, l2: float = 0.0) -> float:
    """Mean logistic loss plus l2 * ||theta||^2."""
    z = X @ theta + bias
    ll = np.mean(y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z))
    return float(ll + l2 * theta @ theta)


def fit_mta_arrays(X: np.ndarray, y: np.ndarray, n_industries: int, cfg: MtaFitConfig = MtaFitConfig()) -> MtaModel:
    if y.min() == y.max():
        raise DegenerateDataError("MTA fit needs both converting and non-converting journeys")
    store = nc.ParamStore()
    store.add("theta", np.zeros((X.shape[1], 1)))
    store.add("bias", np.zeros(1))
    n = len(y)
    hyper = nc.AdamHyper(lr=cfg.lr)
    for _ in range(cfg.steps):
        g = nc.Graph(store)
        logits = g.squeeze_last(g.linear(g.constant(X), "theta", "bias"))
        data = g.scale(g.weighted_bce(logits, y, np.ones(n)), 1.0 / n)
        loss = g.sum([data, g.scale(g.sum_squares(g.param("theta")), cfg.l2)]) if cfg.l2 else data
        nc.backward(g, loss)
        nc.adam_step(store, hyper)
    return MtaModel(store["theta"].value[:, 0].copy(), float(store["bias"].value[0]), n_industries)


def fit_mta_model(train: JourneyLog | Sequence[Journey], n_industries: int, cfg: MtaFitConfig = MtaFitConfig()) -> MtaModel:
    """Fit P(conv | J) = sigma(bias + sum_t theta.phi(t)) by L2-regularised logistic regression."""
    journeys = list(train)
    if not journeys:
        raise DegenerateDataError("MTA fit needs a non-empty training set")
    X, y = journey_design(journeys, n_industries)
    return fit_mta_arrays(X, y, n_industries, cfg)


# ---------------------------------------------------------------------- CAT


def cat_label(bits: Iterable[int]) -> int:
    out = 0
    n = 0
    for i, b in enumerate(bits):
        if b not in (0, 1) or isinstance(b, float) and not float(b).is_integer():
            raise DomainError(f"CAT bit {i} is {b!r}; bits must be 0 or 1")
        out += int(b) * (1 << i)
        n += 1
    if n == 0:
        raise DomainError("CAT label needs at least one bit")
    return out


def decode_cat(label: int, n: int) -> list[int]:
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    if not 0 <= label < (1 << n):
        raise DomainError(f"CAT label {label} outside [0, {(1 << n) - 1}]")
    return [(label >> i) & 1 for i in range(n)]


# ------------------------------------------------------------------ samples

LABEL_MODES = ("binary", "fractional")
COUNT_EDGES = (1, 2, 4, 8)  # clicks-so-far buckets: 1, 2, 3-4, 5-8, 9+
N_COUNT_BUCKETS = len(COUNT_EDGES) + 1


def count_bucket(n_so_far: int) -> int:
    for b, edge in enumerate(COUNT_EDGES):
        if n_so_far <= edge:
            return b
    return len(COUNT_EDGES)


FEATURE_NAMES = ("user_id", "ad_id", "industry_id", "position_bucket", "recency_bucket", "count_bucket")


@dataclass(frozen=True)
class Sample:
    features: dict
    labels: dict  # tag -> (l, w)
    cat_class: int
    user_id: int
    industry_id: int
    journey_id: int
    position: int


@dataclass
class SampleSet:
    """Column-oriented sample table; ``samples[i]`` yields a :class:`Sample`."""

    features: np.ndarray  # (n, 6) int64, columns FEATURE_NAMES
    journey_id: np.ndarray
    position: np.ndarray
    ts: np.ndarray
    credits: np.ndarray  # (n, M)
    labels: np.ndarray  # (n, M)
    weights: np.ndarray  # (n, M)
    cat: np.ndarray
    mechanism_order: tuple[Tag, ...]
    primary_tag: Tag
    label_mode: str = "binary"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        order = tuple(Tag(t) for t in self.mechanism_order)
        if len(set(order)) != len(order):
            raise ConfigError(f"mechanism_order has duplicates: {[str(t) for t in order]}")
        self.mechanism_order = order
        self.primary_tag = Tag(self.primary_tag)
        if self.primary_tag not in order:
            raise ConfigError(f"primary_tag {self.primary_tag} not in mechanism_order")

    def __len__(self) -> int:
        return len(self.cat)

    @property
    def user_id(self) -> np.ndarray:
        return self.features[:, 0]

    @property
    def industry_id(self) -> np.ndarray:
        return self.features[:, 2]

    def index(self, tag) -> int:
        return self.mechanism_order.index(Tag(tag))

    def positives(self, tag) -> np.ndarray:
        return self.credits[:, self.index(tag)] > 0

    def __getitem__(self, i: int) -> Sample:
        feats = dict(zip(FEATURE_NAMES, (int(x) for x in self.features[i])))
        labels = {
            str(t): (float(self.labels[i, m]), float(self.weights[i, m])) for m, t in enumerate(self.mechanism_order)
        }
        return Sample(feats, labels, int(self.cat[i]), feats["user_id"], feats["industry_id"],
                      int(self.journey_id[i]), int(self.position[i]))

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.features[idx], self.journey_id[idx], self.position[idx], self.ts[idx],
                         self.credits[idx], self.labels[idx], self.weights[idx], self.cat[idx],
                         self.mechanism_order, self.primary_tag, self.label_mode, dict(self.meta))


def labels_from_credits(credits: np.ndarray, label_mode: str) -> tuple[np.ndarray, np.ndarray]:
    if label_mode == "binary":
        pos = credits > 0
        return pos.astype(float), np.where(pos, credits, 1.0)
    if label_mode == "fractional":
        return credits.copy(), np.ones_like(credits)
    raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}")


def build_samples(
    journeys: JourneyLog | Sequence[Journey],
    mechanisms: Sequence[Mechanism],
    primary_tag=Tag.LAST_CLICK,
    label_mode: str = "binary",
) -> SampleSet:
    """One sample per click with per-mechanism (label, weight) and a CAT class."""
    if not mechanisms:
        raise ConfigError("at least one mechanism is required")
    for m in mechanisms:
        if m.needs_mta and m.mta is None:
            raise ConfigError(f"{m.tag} referenced but no fitted MtaModel supplied")
    if label_mode not in LABEL_MODES:
        raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}")
    order = tuple(m.tag for m in mechanisms)
    js = sorted(journeys, key=lambda j: j.journey_id)
    n = sum(len(j.clicks) for j in js)
    M = len(mechanisms)
    feats = np.zeros((n, len(FEATURE_NAMES)), dtype=np.int64)
    jid = np.zeros(n, dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)
    ts = np.zeros(n, dtype=np.int64)
    credits = np.zeros((n, M))
    r = 0
    for j in js:
        k = len(j.clicks)
        for i, c in enumerate(j.clicks):
            gap = None if i == 0 else c.ts - j.clicks[i - 1].ts
            feats[r + i] = (j.user_id, c.ad_id, j.industry_id, position_bucket(i), recency_bucket(gap), count_bucket(i + 1))
            jid[r + i] = j.journey_id
            pos[r + i] = i
            ts[r + i] = c.ts
        for m_idx, mech in enumerate(mechanisms):
            credits[r : r + k, m_idx] = attribute(mech, j)
        r += k
    labels, weights = labels_from_credits(credits, label_mode)
    bits = (credits > 0).astype(np.int64)
    cat = bits @ (1 << np.arange(M, dtype=np.int64))
    return SampleSet(feats, jid, pos, ts, credits, labels, weights, cat, order, primary_tag, label_mode)


def positive_ratio_report(samples: SampleSet, reference=Tag.LAST_CLICK) -> dict[str, float]:
    """positives(m) / positives(reference) for every mechanism in the set."""
    ref = Tag(reference)
    if ref not in samples.mechanism_order:
        raise ConfigError(f"reference {ref} not in mechanism_order")
    ref_pos = int(samples.positives(ref).sum())
    if ref_pos == 0:
        raise DegenerateDataError(f"no positives under reference mechanism {ref}")
    return {str(t): int(samples.positives(t).sum()) / ref_pos for t in samples.mechanism_order}


# --------------------------------------------------------------------- io


def write_samples(samples: SampleSet, path) -> None:
    header = {
        "mechanism_order": [str(t) for t in samples.mechanism_order],
        "primary_tag": str(samples.primary_tag),
        "label_mode": samples.label_mode,
        "meta": samples.meta,
    }
    names = [str(t) for t in samples.mechanism_order]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for i in range(len(samples)):
            rec = dict(zip(FEATURE_NAMES, (int(x) for x in samples.features[i])))
            rec["journey_id"] = int(samples.journey_id[i])
            rec["position"] = int(samples.position[i])
            rec["ts"] = int(samples.ts[i])
            for m, name in enumerate(names):
                rec[name] = {"l": float(samples.labels[i, m]), "w": float(samples.weights[i, m]),
                             "credit": float(samples.credits[i, m])}
            rec["cat"] = int(samples.cat[i])
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_samples(path) -> SampleSet:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
        names = header["mechanism_order"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"{path} line 1: malformed header ({exc})") from exc
    n, M = len(lines) - 1, len(names)
    feats = np.zeros((n, len(FEATURE_NAMES)), dtype=np.int64)
    jid, pos, ts, cat = (np.zeros(n, dtype=np.int64) for _ in range(4))
    credits, labels, weights = np.zeros((n, M)), np.zeros((n, M)), np.zeros((n, M))
    for r, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            feats[r] = [rec[f] for f in FEATURE_NAMES]
            jid[r], pos[r], ts[r], cat[r] = rec["journey_id"], rec["position"], rec["ts"], rec["cat"]
            for m, name in enumerate(names):
                labels[r, m] = rec[name]["l"]
                weights[r, m] = rec[name]["w"]
                credits[r, m] = rec[name]["credit"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path} line {r + 2}: malformed sample record ({exc})") from exc
    return SampleSet(feats, jid, pos, ts, credits, labels, weights, cat, tuple(names),
                     header["primary_tag"], header["label_mode"], header.get("meta", {}))
