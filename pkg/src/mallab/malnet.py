"""The MAL network, its ablations and baselines, built on :mod:`mallab.numcore`.

Wiring of the full model::

    features -> embeddings -> shared MLP -> v
    v -> one tower per attribution mechanism -> logit_a   (penultimate = K^a)
    v -> CAT tower -> 2^N logits                          (penultimate = K_CAT)
    v -> PTP MLP -> v_p ;  concat(K) -> projection -> v_a
    v_p + v_a -> primary head -> primary logit
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attribution import FEATURE_NAMES, SampleSet, Tag
from .errors import ConfigError, DataError, NumericError

VARIANTS = ("MAL", "MAL_noCAT", "MAL_noMultiAttr", "Base", "SharedBottomMTL")
_HAS_AKA = {"MAL", "MAL_noCAT", "MAL_noMultiAttr"}
_HAS_CAT = {"MAL", "MAL_noMultiAttr"}


@dataclass(frozen=True)
class ArchConfig:
    embedding_dim: int = 8
    shared_dims: tuple[int, ...] = (64, 32)
    tower_dims: tuple[int, ...] = (16, 8)
    ptp_dims: tuple[int, ...] = (32,)
    projection_dims: tuple[int, ...] = (32,)
    lambda_aux: float = 1.0
    lambda_cat: float = 1.0
    stop_gradient_at_K: bool = False
    variant: str = "MAL"

    def validate(self) -> "ArchConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.embedding_dim < 1 or not self.shared_dims or not self.tower_dims or not self.ptp_dims:
            raise ConfigError("embedding_dim and all layer lists must be non-empty and positive")
        if min(self.shared_dims + self.tower_dims + self.ptp_dims + self.projection_dims) < 1:
            raise ConfigError("layer widths must be positive")
        if self.variant in _HAS_AKA and (not self.projection_dims or self.projection_dims[-1] != self.ptp_dims[-1]):
            raise ConfigError(
                f"projection output dim {self.projection_dims[-1:] or None} must equal v_p dim {self.ptp_dims[-1]}"
            )
        if self.lambda_aux < 0 or self.lambda_cat < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.variant not in _HAS_CAT and self.lambda_cat != 0:
            raise ConfigError(f"variant {self.variant} has no CAT tower but lambda_cat={self.lambda_cat}")
        if self.variant == "Base" and self.lambda_aux != 0:
            raise ConfigError(f"variant Base has no auxiliary towers but lambda_aux={self.lambda_aux}")
        if self.stop_gradient_at_K and self.variant not in _HAS_AKA:
            raise ConfigError(f"stop_gradient_at_K needs a knowledge vector; variant {self.variant} has none")
        return self

    def for_variant(self, variant: str) -> "ArchConfig":
        """This config re-targeted at ``variant`` with inapplicable loss weights zeroed."""
        lam_cat = self.lambda_cat if variant in _HAS_CAT else 0.0
        lam_aux = 0.0 if variant == "Base" else self.lambda_aux
        sg = self.stop_gradient_at_K and variant in _HAS_AKA
        return replace(self, variant=variant, lambda_cat=lam_cat, lambda_aux=lam_aux, stop_gradient_at_K=sg)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class MalModel:
    arch: ArchConfig
    vocab_sizes: tuple[int, ...]
    mechanism_order: tuple[Tag, ...]
    primary_tag: Tag
    store: nc.ParamStore
    init_seed: int = 0

    @property
    def n_mechanisms(self) -> int:
        return len(self.mechanism_order)

    @property
    def cat_classes(self) -> int:
        return 1 << self.n_mechanisms

    @property
    def has_cat(self) -> bool:
        return self.arch.variant in _HAS_CAT

    @property
    def has_aka(self) -> bool:
        return self.arch.variant in _HAS_AKA

    @property
    def tower_tags(self) -> tuple[Tag, ...]:
        return () if self.arch.variant == "Base" else self.mechanism_order

    def knowledge_dim(self) -> int:
        if not self.has_aka:
            return 0
        width = self.arch.tower_dims[-1]
        return width * (len(self.tower_tags) + (1 if self.has_cat else 0))

    def param_count(self) -> int:
        return self.store.num_values()

    def descriptor(self) -> dict:
        return {
            "variant": self.arch.variant,
            "arch": self.arch.to_dict(),
            "vocab_sizes": list(self.vocab_sizes),
            "feature_names": list(FEATURE_NAMES),
            "mechanism_order": [str(t) for t in self.mechanism_order],
            "primary_tag": str(self.primary_tag),
            "init_seed": self.init_seed,
        }


@dataclass
class MalOutputs:
    graph: nc.Graph
    v: nc.Node
    tower_logits: dict
    tower_knowledge: dict
    cat_logits: nc.Node | None
    cat_knowledge: nc.Node | None
    K: nc.Node | None
    v_p: nc.Node | None
    v_a: nc.Node | None
    v_fusion: nc.Node | None
    primary_logit: nc.Node


# ------------------------------------------------------------------- build


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so that a parameter shared between variants gets identical init
    return np.random.Generator(np.random.Philox(key=[int(seed), zlib.crc32(name.encode("utf-8"))]))


def _add_dense(store: nc.ParamStore, prefix: str, dims: list[int], seed: int) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = f"{prefix}/{i}/W"
        limit = np.sqrt(6.0 / fan_in)
        store.add(w, _param_rng(seed, w).uniform(-limit, limit, size=(fan_in, fan_out)))
        store.add(f"{prefix}/{i}/b", np.zeros(fan_out))


def build_model(
    arch: ArchConfig,
    feature_vocab_sizes,
    mechanism_order=(Tag.LAST_CLICK, Tag.FIRST_CLICK, Tag.LINEAR, Tag.REMOVAL_EFFECT_MTA),
    primary_tag=Tag.LAST_CLICK,
    seed: int = 0,
) -> MalModel:
    arch.validate()
    vocab = tuple(int(v) for v in feature_vocab_sizes)
    if len(vocab) != len(FEATURE_NAMES) or min(vocab) < 1:
        raise ConfigError(f"need {len(FEATURE_NAMES)} positive vocab sizes, got {vocab}")
    order = tuple(Tag(t) for t in mechanism_order)
    primary = Tag(primary_tag)
    if primary not in order:
        raise ConfigError(f"primary_tag {primary} not in mechanism_order")
    store = nc.ParamStore()
    model = MalModel(arch, vocab, order, primary, store, seed)

    for fname, size in zip(FEATURE_NAMES, vocab):
        name = f"emb/{fname}"
        store.add(name, _param_rng(seed, name).normal(0.0, 0.01, size=(size, arch.embedding_dim)))
    in_dim = arch.embedding_dim * len(FEATURE_NAMES)
    _add_dense(store, "shared", [in_dim, *arch.shared_dims], seed)
    v_dim = arch.shared_dims[-1]

    for tag in model.tower_tags:
        _add_dense(store, f"tower/{tag}", [v_dim, *arch.tower_dims, 1], seed)
    if model.has_cat:
        _add_dense(store, "tower/CAT", [v_dim, *arch.tower_dims, model.cat_classes], seed)
    if arch.variant != "SharedBottomMTL":
        _add_dense(store, "ptp", [v_dim, *arch.ptp_dims], seed)
        _add_dense(store, "head", [arch.ptp_dims[-1], 1], seed)
    if model.has_aka:
        _add_dense(store, "proj", [model.knowledge_dim(), *arch.projection_dims], seed)
    return model


# ----------------------------------------------------------------- forward


def _mlp(g: nc.Graph, x: nc.Node, prefix: str, n_layers: int, relu_last: bool) -> tuple[nc.Node, nc.Node]:
    """Returns (output, penultimate activation)."""
    penult = x
    for i in range(n_layers):
        penult = x
        x = g.linear(x, f"{prefix}/{i}/W", f"{prefix}/{i}/b")
        if i < n_layers - 1 or relu_last:
            x = g.relu(x)
    return x, penult


def forward(model: MalModel, features: np.ndarray, row_stable: bool = False) -> MalOutputs:
    features = np.asarray(features, dtype=np.int64)
    arch = model.arch
    g = nc.Graph(model.store, row_stable=row_stable)
    embs = [g.embedding_lookup(g.param(f"emb/{f}"), features[:, i]) for i, f in enumerate(FEATURE_NAMES)]
    v, _ = _mlp(g, g.concat(embs), "shared", len(arch.shared_dims), relu_last=True)

    n_tower = len(arch.tower_dims) + 1
    tower_logits, tower_k = {}, {}
    for tag in model.tower_tags:
        out, pen = _mlp(g, v, f"tower/{tag}", n_tower, relu_last=False)
        tower_logits[tag] = g.squeeze_last(out)
        tower_k[tag] = pen
    cat_logits = cat_k = None
    if model.has_cat:
        cat_logits, cat_k = _mlp(g, v, "tower/CAT", n_tower, relu_last=False)

    K = v_p = v_a = v_fusion = None
    if arch.variant == "SharedBottomMTL":
        primary = tower_logits[model.primary_tag]
    else:
        v_p, _ = _mlp(g, v, "ptp", len(arch.ptp_dims), relu_last=True)
        fused = v_p
        if model.has_aka:
            K = g.concat([tower_k[t] for t in model.tower_tags] + ([cat_k] if cat_k is not None else []))
            k_in = g.stop_gradient(K) if arch.stop_gradient_at_K else K
            v_a, _ = _mlp(g, k_in, "proj", len(arch.projection_dims), relu_last=False)
            v_fusion = fused = g.add(v_p, v_a)
        primary = g.squeeze_last(g.linear(fused, "head/0/W", "head/0/b"))
    return MalOutputs(g, v, tower_logits, tower_k, cat_logits, cat_k, K, v_p, v_a, v_fusion, primary)


def supervision(model: MalModel, labels: np.ndarray, weights: np.ndarray, cat: np.ndarray):
    """Per-head (label, weight) columns and CAT classes as seen by this variant.

    MAL_noMultiAttr replaces every auxiliary label with the primary one, CAT
    included (class 0 or 2^N - 1).
    """
    p = model.mechanism_order.index(model.primary_tag)
    if model.arch.variant == "MAL_noMultiAttr":
        M = model.n_mechanisms
        labels = np.repeat(labels[:, p : p + 1], M, axis=1)
        weights = np.repeat(weights[:, p : p + 1], M, axis=1)
        cat = np.where(labels[:, p] > 0, (1 << M) - 1, 0)
    return labels, weights, cat


def total_loss(model: MalModel, out: MalOutputs, labels, weights, cat=None) -> tuple[nc.Node, dict]:
    """L_primary + lambda_aux * sum_a L_a + lambda_cat * L_CAT (sum reduction)."""
    labels = np.asarray(labels, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if labels.ndim != 2 or labels.shape[1] != model.n_mechanisms or labels.shape != weights.shape:
        raise DataError(f"expected labels/weights of shape (batch, {model.n_mechanisms}), got {labels.shape}")
    if model.has_cat and cat is None:
        raise DataError("CAT tower is wired but no CAT classes were supplied")
    labels, weights, cat = supervision(model, labels, weights, cat)
    g = out.graph
    arch = model.arch
    p = model.mechanism_order.index(model.primary_tag)
    parts: dict[str, nc.Node] = {"primary": g.weighted_bce(out.primary_logit, labels[:, p], weights[:, p])}
    terms = [parts["primary"]]
    for tag in model.tower_tags:
        if arch.variant == "SharedBottomMTL" and tag == model.primary_tag:
            continue
        m = model.mechanism_order.index(tag)
        parts[str(tag)] = g.weighted_bce(out.tower_logits[tag], labels[:, m], weights[:, m])
        if arch.lambda_aux:
            terms.append(g.scale(parts[str(tag)], arch.lambda_aux))
    if model.has_cat:
        parts["CAT"] = g.softmax_ce(out.cat_logits, cat)
        if arch.lambda_cat:
            terms.append(g.scale(parts["CAT"], arch.lambda_cat))
    return g.sum(terms), parts


def predict_primary(model: MalModel, features: np.ndarray, chunk: int = 8192) -> np.ndarray:
    features = np.asarray(features, dtype=np.int64)
    outs = [nc.sigmoid(forward(model, features[i : i + chunk], row_stable=True).primary_logit.value)
            for i in range(0, len(features), chunk)]
    return np.concatenate(outs) if outs else np.zeros(0)


def predict_logits(model: MalModel, features: np.ndarray, chunk: int = 8192) -> np.ndarray:
    features = np.asarray(features, dtype=np.int64)
    outs = [forward(model, features[i : i + chunk], row_stable=True).primary_logit.value
            for i in range(0, len(features), chunk)]
    return np.concatenate(outs) if outs else np.zeros(0)


# ------------------------------------------------------------------- train


@dataclass
class TrainStats:
    steps: int
    window: int
    head_losses: dict = field(default_factory=dict)  # head -> per-window mean per-sample loss
    total_losses: list = field(default_factory=list)  # per step, sum reduction

    def to_dict(self) -> dict:
        return {"steps": self.steps, "window": self.window, "head_losses": self.head_losses,
                "total_losses": self.total_losses}


def shuffled_order(n: int, seed: int) -> np.ndarray:
    return np.random.Generator(np.random.Philox(key=[int(seed), 0x5EED])).permutation(n)


def train(
    model: MalModel,
    samples: SampleSet,
    hyper: nc.AdamHyper = nc.AdamHyper(),
    seed: int = 0,
    batch_size: int = 256,
    epochs: int = 1,
    window: int = 50,
) -> TrainStats:
    """Single-pass (by default) minibatch Adam over a seed-shuffled order."""
    if len(samples) == 0:
        raise DataError("training set is empty")
    if samples.primary_tag != model.primary_tag or samples.mechanism_order != model.mechanism_order:
        raise ConfigError("sample set mechanisms do not match the model's wiring")
    stats = TrainStats(0, window)
    acc: dict[str, float] = {}
    acc_n = 0
    step = 0
    for epoch in range(epochs):
        order = shuffled_order(len(samples), seed + epoch)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            try:
                out = forward(model, samples.features[idx])
                loss, parts = total_loss(model, out, samples.labels[idx], samples.weights[idx], samples.cat[idx])
                if not np.isfinite(loss.value):
                    raise NumericError("non-finite loss")
                nc.backward(out.graph, loss)
                nc.adam_step(model.store, hyper)
            except NumericError as exc:
                raise NumericError(f"numeric failure at step {step}: {exc}") from exc
            stats.total_losses.append(float(loss.value))
            for k, node in parts.items():
                acc[k] = acc.get(k, 0.0) + float(node.value)
            acc_n += len(idx)
            step += 1
            if step % window == 0:
                for k, v in acc.items():
                    stats.head_losses.setdefault(k, []).append(v / acc_n)
                acc, acc_n = {}, 0
    if acc_n:
        for k, v in acc.items():
            stats.head_losses.setdefault(k, []).append(v / acc_n)
    stats.steps = step
    return stats


# --------------------------------------------------------------------- io


def save_model(model: MalModel, path) -> None:
    path = Path(path)
    nc.save_checkpoint(model.store, path, meta=model.descriptor())
    path.with_name(path.name + ".arch.json").write_text(
        json.dumps(model.descriptor(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def load_model(path) -> MalModel:
    path = Path(path)
    desc = json.loads(path.with_name(path.name + ".arch.json").read_text(encoding="utf-8"))
    model = build_model(ArchConfig.from_dict(desc["arch"]), desc["vocab_sizes"], desc["mechanism_order"],
                        desc["primary_tag"], desc.get("init_seed", 0))
    nc.load_checkpoint(path, into=model.store)
    return model
