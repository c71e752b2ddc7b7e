import math
from dataclasses import replace

import numpy as np
import pytest

from mallab import malnet
from mallab import numcore as nc
from mallab.attribution import DEFAULT_ORDER, FEATURE_NAMES, SampleSet, Tag
from mallab.errors import ConfigError, CorruptionError, DataError, MalIndexError, NumericError

VOCAB = (30, 50, 8, 4, 7, 5)
M = len(DEFAULT_ORDER)


def _model(variant="MAL", seed=0, **arch):
    return malnet.build_model(malnet.ArchConfig(**arch).for_variant(variant), VOCAB, DEFAULT_ORDER, Tag.LAST_CLICK, seed)


def _features(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, v, n) for v in VOCAB], axis=1)


def _sample_set(n=600, seed=0, separable=False):
    rng = np.random.default_rng(seed)
    feats = _features(n, seed)
    if separable:
        # the label is decided by the ad id alone
        credit_last = (feats[:, 1] % 2 == 0).astype(float)
    else:
        credit_last = (rng.random(n) < 0.2).astype(float)
    credits = np.zeros((n, M))
    credits[:, 0] = credit_last
    credits[:, 1] = (rng.random(n) < 0.2) * 1.0
    credits[:, 2] = np.where(rng.random(n) < 0.3, rng.uniform(0.2, 1, n), 0.0)
    credits[:, 3] = np.where(rng.random(n) < 0.25, rng.uniform(0.2, 1, n), 0.0)
    pos = credits > 0
    labels = pos.astype(float)
    weights = np.where(pos, credits, 1.0)
    cat = pos.astype(np.int64) @ (1 << np.arange(M))
    z = np.zeros(n, dtype=np.int64)
    return SampleSet(feats, np.arange(n), z, np.arange(n), credits, labels, weights, cat, DEFAULT_ORDER,
                     Tag.LAST_CLICK, "binary")


def _zero(model):
    for _, p in model.store.items():
        p.value[...] = 0.0


# ------------------------------------------------------------------ wiring


def test_knowledge_dim_mal():
    m = _model()
    assert m.knowledge_dim() == 4 * 8 + 8 == 40
    out = malnet.forward(m, _features(5))
    assert out.K.shape == (5, 40)
    assert out.cat_logits.shape == (5, 16)


def test_no_cat_drops_one_tower_width():
    assert _model("MAL").knowledge_dim() - _model("MAL_noCAT").knowledge_dim() == 8
    assert malnet.forward(_model("MAL_noCAT"), _features(3)).cat_logits is None


def test_parameter_count_control():
    assert _model("MAL").param_count() == _model("MAL_noMultiAttr").param_count()
    assert _model("Base").param_count() < _model("MAL").param_count()


def test_shared_parameters_identically_initialised_across_variants():
    mal, base = _model("MAL", seed=3), _model("Base", seed=3)
    for name in base.store.names():
        assert np.array_equal(mal.store[name].value, base.store[name].value), name


def test_fusion_algebra():
    out = malnet.forward(_model(seed=1), _features(64, 1))
    assert np.max(np.abs(out.v_fusion.value - out.v_p.value - out.v_a.value)) <= 1e-12


def test_zero_projection_gives_v_p():
    m = _model(seed=2)
    for name in m.store.names():
        if name.startswith("proj/"):
            m.store[name].value[...] = 0.0
    out = malnet.forward(m, _features(10))
    assert np.array_equal(out.v_fusion.value, out.v_p.value)


@pytest.mark.parametrize("variant", malnet.VARIANTS)
def test_zero_parameters_predict_half(variant):
    m = _model(variant)
    _zero(m)
    out = malnet.forward(m, _features(7))
    assert not out.primary_logit.value.any()
    assert all(not v.value.any() for v in out.tower_logits.values())
    assert (malnet.predict_primary(m, _features(7)) == 0.5).all()


def test_out_of_vocab_is_index_error():
    bad = _features(2)
    bad[1, 1] = VOCAB[1]
    with pytest.raises(MalIndexError):
        malnet.forward(_model(), bad)


@pytest.mark.parametrize(
    "kw",
    [
        {"variant": "MAL_noCAT", "lambda_cat": 1.0},
        {"variant": "Base", "lambda_aux": 1.0, "lambda_cat": 0.0},
        {"variant": "Base", "lambda_aux": 0.0, "lambda_cat": 0.0, "stop_gradient_at_K": True},
        {"projection_dims": (16,)},
        {"variant": "Unknown"},
    ],
)
def test_inconsistent_arch_is_config_error(kw):
    with pytest.raises(ConfigError):
        malnet.build_model(malnet.ArchConfig(**kw), VOCAB)


def test_arch_descriptor_roundtrip():
    m = _model("MAL_noCAT")
    assert malnet.ArchConfig.from_dict(m.descriptor()["arch"]) == m.arch


# -------------------------------------------------------------------- loss


def test_hand_evaluated_total_loss():
    m = _model()
    _zero(m)
    x = _features(1)
    out = malnet.forward(m, x)
    loss, parts = malnet.total_loss(m, out, np.ones((1, M)), np.ones((1, M)), np.array([15]))
    assert float(loss.value) == pytest.approx(5 * math.log(2) + math.log(16), abs=1e-12)
    assert set(parts) == {"primary", "CAT", *map(str, DEFAULT_ORDER)}


def test_zero_lambdas_reduce_to_primary():
    m = _model(lambda_aux=0.0, lambda_cat=0.0)
    s = _sample_set(32)
    out = malnet.forward(m, s.features)
    loss, parts = malnet.total_loss(m, out, s.labels, s.weights, s.cat)
    assert float(loss.value) == float(parts["primary"].value)


def test_no_cat_loss_has_no_cat_term():
    m = _model("MAL_noCAT")
    s = _sample_set(16)
    _, parts = malnet.total_loss(m, malnet.forward(m, s.features), s.labels, s.weights, s.cat)
    assert "CAT" not in parts


def test_missing_labels_is_data_error():
    m = _model()
    s = _sample_set(8)
    out = malnet.forward(m, s.features)
    with pytest.raises(DataError):
        malnet.total_loss(m, out, s.labels[:, :2], s.weights[:, :2], s.cat)
    with pytest.raises(DataError):
        malnet.total_loss(m, out, s.labels, s.weights, None)


def test_no_multi_attr_supervises_every_head_with_primary():
    m = _model("MAL_noMultiAttr")
    s = _sample_set(50)
    labels, weights, cat = malnet.supervision(m, s.labels, s.weights, s.cat)
    for k in range(M):
        assert np.array_equal(labels[:, k], s.labels[:, 0])
        assert np.array_equal(weights[:, k], s.weights[:, 0])
    assert set(np.unique(cat)) <= {0, 15}


# --------------------------------------------------------------- gradients


def _primary_grads(model, s):
    out = malnet.forward(model, s.features)
    _, parts = malnet.total_loss(model, out, s.labels, s.weights, s.cat)
    nc.backward(out.graph, parts["primary"])
    return {n: p.grad.copy() for n, p in model.store.items()}


def test_stop_gradient_isolates_towers():
    s = _sample_set(40)
    stopped = _primary_grads(_model(seed=4, stop_gradient_at_K=True), s)
    flowing = _primary_grads(_model(seed=4), s)
    towers = [n for n in stopped if n.startswith("tower/")]
    assert towers
    assert all(not stopped[n].any() for n in towers)
    assert any(flowing[n].any() for n in towers)


def test_stop_gradient_leaves_forward_unchanged():
    x = _features(20)
    a = malnet.predict_logits(_model(seed=5, stop_gradient_at_K=True), x)
    b = malnet.predict_logits(_model(seed=5), x)
    assert np.array_equal(a, b)


def _unit_embeddings(model, seed):
    # at the 0.01-scale init thousands of ReLU inputs sit within a finite-difference
    # step of their kink; unit-scale embeddings move the check onto smooth ground
    rng = np.random.default_rng(seed)
    for name, p in model.store.items():
        if name.startswith("emb/"):
            p.value[...] = rng.normal(size=p.value.shape)


@pytest.mark.parametrize("variant", malnet.VARIANTS)
def test_variant_gradients_match_finite_differences(variant):
    m = _model(variant, seed=12)
    _unit_embeddings(m, 12)
    s = _sample_set(24, seed=12)

    def fn(store):
        out = malnet.forward(m, s.features)
        return out.graph, malnet.total_loss(m, out, s.labels, s.weights, s.cat)[0]

    assert nc.grad_check(fn, m.store, eps=1e-5, fraction=0.02, seed=1) < 1e-4


# ------------------------------------------------------------------ train


def test_train_separable_toy_converges():
    m = _model("Base", seed=0)
    s = _sample_set(2000, separable=True)
    malnet.train(m, s, nc.AdamHyper(lr=0.01), seed=0, epochs=5)
    logits = malnet.predict_logits(m, s.features)
    y = s.labels[:, 0]
    assert nc.Graph().weighted_bce(nc.Graph().constant(logits), y, np.ones_like(y)).value / len(y) < 0.1


def test_train_is_seed_deterministic():
    s = _sample_set(700)
    a, b = _model(seed=1), _model(seed=1)
    sa = malnet.train(a, s, seed=9)
    sb = malnet.train(b, s, seed=9)
    assert sa.to_dict() == sb.to_dict()
    assert a.store.state_equal(b.store)
    assert sa.steps == math.ceil(700 / 256)


def test_zero_lambda_mal_matches_base_trajectory():
    # with lambda = 0 and the projection pinned at zero, MAL's primary path is Base's graph
    s = _sample_set(1500)
    base = _model("Base", seed=6)
    mal = _model("MAL", seed=6, lambda_aux=0.0, lambda_cat=0.0)
    for name in mal.store.names():
        if name.startswith("proj/"):
            mal.store[name].value[...] = 0.0
            mal.store.frozen.add(name)
    sb = malnet.train(base, s, seed=2)
    sm = malnet.train(mal, s, seed=2)
    assert sm.total_losses == sb.total_losses
    for name in base.store.names():
        assert np.array_equal(base.store[name].value, mal.store[name].value), name


def test_non_finite_loss_reports_step():
    m = _model("Base")
    s = _sample_set(600)
    m.store["head/0/b"].value[...] = 1e308
    with pytest.raises(NumericError, match="step 0"):
        malnet.train(m, s)


def test_prediction_batch_invariance():
    m = _model(seed=7)
    x = _features(40, 7)
    full = malnet.predict_primary(m, x)
    single = np.concatenate([malnet.predict_primary(m, x[i : i + 1]) for i in range(len(x))])
    assert np.array_equal(full, single)
    assert ((full > 0) & (full < 1)).all()


def test_prediction_monotone_in_head_bias():
    m = _model(seed=8)
    x = _features(10)
    lo = malnet.predict_primary(m, x)
    m.store["head/0/b"].value += 0.5
    assert (malnet.predict_primary(m, x) > lo).all()


# --------------------------------------------------------------------- io


def test_save_load_roundtrip(tmp_path):
    m = _model("MAL", seed=3)
    malnet.train(m, _sample_set(300), seed=1)
    path = tmp_path / "model.ckpt"
    malnet.save_model(m, path)
    back = malnet.load_model(path)
    assert back.arch == m.arch and back.mechanism_order == m.mechanism_order
    x = _features(25)
    assert np.array_equal(malnet.predict_primary(back, x), malnet.predict_primary(m, x))


def test_corrupted_model_file(tmp_path):
    m = _model("Base")
    path = tmp_path / "model.ckpt"
    malnet.save_model(m, path)
    data = bytearray(path.read_bytes())
    data[-1] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptionError):
        malnet.load_model(path)
