import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mallab.errors import ConfigError, IntegrityError, ParseError
from mallab.journeygen import (
    GenConfig,
    IndustryProfile,
    Journey,
    JourneyLog,
    Latents,
    Touchpoint,
    generate_dataset,
    ground_truth_conv_prob,
    mean_journey_length,
    meta_path,
    read_journeys,
    recency_bucket,
    split_train_test,
    write_journeys,
)

SMALL = GenConfig(n_users=60, n_ads=40, journeys_per_user_mean=5.0)


def _journey(ads, gamma_industry=0, ts=None, conv=None, user=0, jid=0):
    ts = ts or list(range(100, 100 + 10 * len(ads), 10))
    clicks = tuple(Touchpoint(a, gamma_industry, t, i) for i, (a, t) in enumerate(zip(ads, ts)))
    return Journey(user, jid, gamma_industry, clicks, conv)


def _latents(user_vec, ad_vecs):
    return Latents(np.array([user_vec], float), np.array(ad_vecs, float), np.zeros(len(ad_vecs), int))


def _cfg(gammas, bias=0.0, scale=1.0):
    profs = tuple(IndustryProfile(1.0, g) for g in gammas) + (IndustryProfile(1.0, 1.0), IndustryProfile(1.0, 0.0))
    return GenConfig(n_industries=len(profs), industry_path_profile=profs, conv_bias=bias, affinity_scale=scale)


# ------------------------------------------------------- ground truth model


def test_zero_affinity_single_click_is_half():
    lat = _latents([0.0, 0.0], [[0.0, 0.0]])
    assert ground_truth_conv_prob(_journey([0]), lat, _cfg([0.0])) == 0.5


def test_gamma_zero_depends_on_last_click_only():
    lat = _latents([1.0, 0.0], [[0.3, 0.0], [-2.0, 0.0], [5.0, 0.0], [0.7, 0.0]])
    cfg = _cfg([0.0], bias=-1.0)
    p = ground_truth_conv_prob(_journey([0, 1, 3]), lat, cfg)
    assert p == ground_truth_conv_prob(_journey([2, 0, 3]), lat, cfg)
    assert p == pytest.approx(1 / (1 + np.exp(-(-1.0 + 0.7))), rel=1e-15)


def test_gamma_one_sums_equal_affinities():
    a, s = 0.4, 1.7
    lat = _latents([1.0, 0.0], [[a, 0.0]])
    p = ground_truth_conv_prob(_journey([0, 0, 0]), lat, _cfg([1.0], scale=s))
    assert p == pytest.approx(1 / (1 + np.exp(-3 * s * a)), rel=1e-14)


def test_geometric_carryover_weights():
    lat = _latents([1.0, 0.0], [[1.0, 0.0], [2.0, 0.0], [4.0, 0.0]])
    p = ground_truth_conv_prob(_journey([0, 1, 2]), lat, _cfg([0.5], bias=-3.0))
    assert p == pytest.approx(1 / (1 + np.exp(-(-3.0 + 4.0 + 0.5 * 2.0 + 0.25 * 1.0))), rel=1e-14)


# --------------------------------------------------------------- generator


def test_generation_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_journeys(generate_dataset(SMALL), a)
    write_journeys(generate_dataset(SMALL), b)
    assert a.read_bytes() == b.read_bytes()
    assert meta_path(a).read_bytes() == meta_path(b).read_bytes()


def test_different_seed_changes_log():
    assert generate_dataset(SMALL).journeys != generate_dataset(replace(SMALL, seed=8)).journeys


def test_generated_journeys_are_valid():
    log = generate_dataset(SMALL)
    ids = [j.journey_id for j in log.journeys]
    assert ids == list(range(len(ids)))
    users = [j.user_id for j in log.journeys]
    assert users == sorted(users)
    for j in log.journeys:
        j.validate()
        assert len(j.clicks) >= 1
        assert all(c.industry_id == j.industry_id for c in j.clicks)
        assert j.conversion_ts is None or j.conversion_ts > j.clicks[-1].ts
    assert log.gen_config_digest == SMALL.digest()


def test_mean_clicks_one_gives_single_click_journeys():
    profs = (IndustryProfile(1.0, 1.0), IndustryProfile(1.0, 0.0))
    cfg = GenConfig(n_users=5000, n_ads=50, n_industries=2, industry_path_profile=profs, journeys_per_user_mean=20.0)
    log = generate_dataset(cfg)
    assert len(log.journeys) >= 100_000
    assert mean_journey_length(log.journeys) == pytest.approx(1.0, rel=0.05)


def test_mean_length_matches_geometric_and_long_exceeds_short():
    profs = (IndustryProfile(2.5, 0.9), IndustryProfile(1.3, 0.1))
    cfg = GenConfig(
        n_users=5000, n_ads=50, n_industries=2, industry_path_profile=profs, journeys_per_user_mean=20.0, max_clicks=60
    )
    log = generate_dataset(cfg)
    assert len(log.journeys) >= 100_000
    by_ind = [[j for j in log.journeys if j.industry_id == i] for i in range(2)]
    long_len, short_len = (mean_journey_length(js) for js in by_ind)
    assert long_len == pytest.approx(2.5, rel=0.05)
    assert short_len == pytest.approx(1.3, rel=0.05)
    assert long_len > short_len


def test_default_config_long_paths_are_longer():
    cfg = GenConfig()
    log = generate_dataset(replace(cfg, n_users=2000))
    lengths = np.array([len(j.clicks) for j in log.journeys])
    ind = np.array([j.industry_id for j in log.journeys])
    assert lengths[np.isin(ind, cfg.long_path_industries())].mean() > lengths[np.isin(ind, cfg.short_path_industries())].mean()


@pytest.mark.parametrize(
    "change, field",
    [
        ({"n_users": 0}, "n_users"),
        ({"n_ads": 0}, "n_ads"),
        ({"journeys_per_user_mean": 0.0}, "journeys_per_user_mean"),
        ({"industry_path_profile": (IndustryProfile(0.5, 1.0),) * 8}, "mean_clicks"),
        ({"industry_path_profile": (IndustryProfile(2.0, 1.5),) * 8}, "carryover_gamma"),
        ({"industry_path_profile": (IndustryProfile(2.0, 0.5),) * 8}, "carryover_gamma"),
        ({"n_industries": 3}, "industry_path_profile"),
    ],
)
def test_invalid_config_names_field(change, field):
    with pytest.raises(ConfigError, match=field):
        generate_dataset(replace(GenConfig(), **change))


def test_config_dict_roundtrip():
    cfg = GenConfig(conv_bias=-1.25)
    assert GenConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert GenConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()


# -------------------------------------------------------------------- files


def test_write_read_roundtrip(tmp_path):
    log = generate_dataset(SMALL)
    path = tmp_path / "j.jsonl"
    write_journeys(log, path)
    back = read_journeys(path)
    assert back.journeys == log.journeys
    assert back.gen_config_digest == log.gen_config_digest


def test_file_format_fields(tmp_path):
    path = tmp_path / "j.jsonl"
    write_journeys(JourneyLog([_journey([3, 4], conv=500, jid=9)], "abc"), path)
    raw = path.read_bytes()
    assert raw.endswith(b"\n") and b"\r" not in raw
    rec = json.loads(raw.decode("utf-8"))
    assert rec == {
        "user_id": 0,
        "journey_id": 9,
        "industry_id": 0,
        "clicks": [{"ad_id": 3, "ts": 100}, {"ad_id": 4, "ts": 110}],
        "conversion": {"ts": 500},
    }
    assert json.loads(meta_path(path).read_text())["gen_config_digest"] == "abc"


def test_empty_file_is_empty_log(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert read_journeys(path).journeys == []


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = '{"user_id":0,"journey_id":1,"industry_id":0,"clicks":[{"ad_id":1,"ts":5}],"conversion":null}'
    path.write_text(good + "\n{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        read_journeys(path)


def test_duplicate_journey_id_rejected(tmp_path):
    path = tmp_path / "dup.jsonl"
    line = '{"user_id":0,"journey_id":1,"industry_id":0,"clicks":[{"ad_id":1,"ts":5}],"conversion":null}\n'
    path.write_text(line * 2)
    with pytest.raises(IntegrityError, match="1"):
        read_journeys(path)


def test_non_monotone_timestamps_rejected_with_id(tmp_path):
    path = tmp_path / "ts.jsonl"
    path.write_text(
        '{"user_id":0,"journey_id":42,"industry_id":0,"clicks":[{"ad_id":1,"ts":9},{"ad_id":2,"ts":9}],"conversion":null}\n'
    )
    with pytest.raises(IntegrityError, match="42"):
        read_journeys(path)


def test_conversion_before_last_click_rejected():
    with pytest.raises(IntegrityError):
        _journey([1, 2], ts=[10, 20], conv=15).validate()


# ------------------------------------------------------------------ helpers


def test_temporal_split_orders_by_completion():
    log = generate_dataset(SMALL)
    train, test = split_train_test(log, fraction=0.8)
    assert len(train.journeys) + len(test.journeys) == len(log.journeys)
    assert max(j.completion_ts for j in train.journeys) <= min(j.completion_ts for j in test.journeys)


def test_degenerate_split_is_config_error():
    log = generate_dataset(SMALL)
    with pytest.raises(ConfigError):
        split_train_test(log, cutoff=-1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**8), st.integers(0, 10**8))
def test_recency_bucket_monotone(a, b):
    lo, hi = sorted((a, b))
    assert 1 <= recency_bucket(lo) <= recency_bucket(hi) <= 6
    assert recency_bucket(None) == 0
