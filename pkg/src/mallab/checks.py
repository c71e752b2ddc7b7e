"""Self-checks behind ``mallab check``: gradient checks and metric oracles."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import malnet
from . import numcore as nc
from .attribution import DEFAULT_ORDER, SampleSet, Tag
from .metrics import gauc_from_groups, pairwise_auc, weighted_auc

TOY_VOCAB = (30, 50, 8, 4, 7, 5)


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: str
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.3e} ({self.threshold}, {self.seconds:.1f}s)"


def toy_samples(n: int, seed: int) -> SampleSet:
    """Random features and credits shaped like a real sample set."""
    rng = np.random.default_rng(seed)
    feats = np.stack([rng.integers(0, v, n) for v in TOY_VOCAB], axis=1)
    M = len(DEFAULT_ORDER)
    credits = np.where(rng.random((n, M)) < 0.3, rng.uniform(0.2, 1.0, (n, M)), 0.0)
    pos = credits > 0
    z = np.zeros(n, dtype=np.int64)
    return SampleSet(feats, np.arange(n), z, np.arange(n), credits, pos.astype(float), np.where(pos, credits, 1.0),
                     pos.astype(np.int64) @ (1 << np.arange(M)), DEFAULT_ORDER, Tag.LAST_CLICK, "binary")


def unit_embeddings(model: malnet.MalModel, seed: int) -> None:
    # at the 0.01-scale init many ReLU inputs sit within a finite-difference step
    # of their kink, so the check runs at unit-scale embeddings instead
    rng = np.random.default_rng(seed)
    for name, p in model.store.items():
        if name.startswith("emb/"):
            p.value[...] = rng.normal(size=p.value.shape)


def model_grad_error(variant: str = "MAL", seed: int = 12, n: int = 24, fault: str | None = None) -> float:
    model = malnet.build_model(malnet.ArchConfig().for_variant(variant), TOY_VOCAB, DEFAULT_ORDER, Tag.LAST_CLICK,
                               seed)
    unit_embeddings(model, seed)
    s = toy_samples(n, seed)

    def fn(store):
        out = malnet.forward(model, s.features)
        return out.graph, malnet.total_loss(model, out, s.labels, s.weights, s.cat)[0]

    if fault is None:
        return nc.grad_check(fn, model.store, eps=1e-5, fraction=0.02, seed=1)
    with nc.inject_fault(fault):
        return nc.grad_check(fn, model.store, eps=1e-5, fraction=0.02, seed=1)


def auc_oracle_error(instances: int = 200, max_m: int = 2000, seed: int = 0) -> float:
    """Max |sort-based AUC - pairwise AUC| over random instances with ties and weights."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        m = int(rng.integers(2, max_m + 1))
        scores = rng.integers(0, max(2, m // 4), m).astype(float) if rng.random() < 0.5 else rng.normal(size=m)
        labels = rng.random(m) < rng.uniform(0.05, 0.95)
        labels[0], labels[1] = True, False
        weights = rng.uniform(0.1, 3.0, m)
        worst = max(worst, abs(weighted_auc(scores, labels, weights) - pairwise_auc(scores, labels, weights)))
    return worst


def gauc_example() -> float:
    groups = {"A": ([0.9, 0.1, 0.2], [1, 0, 0], [1, 1, 1]), "B": ([0.5, 0.5], [1, 0], [1, 1])}
    return float(gauc_from_groups(groups, click_counts={"A": 3, "B": 1}))


def _timed(name, fn, ok, threshold) -> CheckResult:
    t = time.perf_counter()
    v = float(fn())
    return CheckResult(name, v, threshold, ok(v), time.perf_counter() - t)


def run_checks() -> list[CheckResult]:
    results = [
        _timed(f"grad check {v}", lambda v=v: model_grad_error(v), lambda e: e < 1e-4, "< 1e-4")
        for v in malnet.VARIANTS
    ]
    results.append(_timed("grad check MAL with corrupted relu backward", lambda: model_grad_error("MAL", fault="relu"),
                          lambda e: e > 1e-2, "> 1e-2"))
    results.append(_timed("weighted AUC vs pairwise oracle (200 instances)", auc_oracle_error,
                          lambda e: e <= 1e-12, "<= 1e-12"))
    results.append(_timed("GAUC worked example", lambda: abs(gauc_example() - 0.875), lambda e: e == 0.0, "== 0"))
    return results
