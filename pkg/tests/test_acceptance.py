"""Acceptance criteria 1-10 at their stated tolerances.

Each test records one pass/fail line (printed in the terminal summary) and
then asserts, so a failing criterion stays red.  Criteria 5-10 share two runs
of the full default pipeline.
"""

import itertools
import json
import time

import numpy as np
import pytest

from mallab import checks, cli
from mallab.attribution import DEFAULT_ORDER, Mechanism, Tag, attribute, cat_label, decode_cat, fit_mta_model
from mallab.config import ExperimentConfig
from mallab.journeygen import generate_dataset, split_train_test

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def default_log():
    return generate_dataset(ExperimentConfig().gen)


def _run_pipeline(workdir):
    t = time.perf_counter()
    assert cli.main(["run", "--set", f'paths.workdir="{workdir}"']) == 0
    return time.perf_counter() - t


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    work = tmp_path_factory.mktemp("bench") / "w"
    seconds = _run_pipeline(work)
    report = json.loads((work / "reports" / "report.json").read_text())
    return work, report, seconds


def _seeds(report, primary, variant):
    return np.array(report["primaries"][primary]["gauc_per_seed"][variant])


def test_c01_attribution_conservation(default_log, acceptance_record):
    cfg = ExperimentConfig()
    train, _ = split_train_test(default_log, fraction=cfg.attribution.train_fraction)
    mta = fit_mta_model(train, cfg.gen.n_industries)
    mechs = [
        Mechanism(Tag.LAST_CLICK),
        Mechanism(Tag.FIRST_CLICK),
        Mechanism(Tag.LINEAR),
        Mechanism(Tag.TIME_DECAY, half_life=cfg.attribution.time_decay_half_life),
        Mechanism(Tag.REMOVAL_EFFECT_MTA, mta=mta),
        Mechanism(Tag.SHAPLEY_MTA, mta=mta),
    ]
    converting = [j for j in default_log.journeys if j.converted][:10_000]
    others = [j for j in default_log.journeys if not j.converted]
    t = time.perf_counter()
    worst = max(abs(attribute(m, j).sum() - 1.0) for j in converting for m in mechs)
    seconds = time.perf_counter() - t
    zeros = all(not attribute(m, j).any() for j in others for m in mechs)
    ok = len(converting) == 10_000 and worst <= 1e-9 and zeros and seconds < 10
    acceptance_record(1, ok, f"max |sum-1| {worst:.1e} over {len(converting)} journeys x 6 mechanisms, "
                             f"non-converting all zero: {zeros}, {seconds:.1f}s")
    assert ok


def test_c02_cat_roundtrip(acceptance_record):
    ok = cat_label([1, 0, 1, 1]) == 13 and DEFAULT_ORDER[0] is Tag.LAST_CLICK
    for n in range(1, 7):
        ok &= all(cat_label(decode_cat(c, n)) == c for c in range(1 << n))
        ok &= all(decode_cat(cat_label(b), n) == list(b) for b in itertools.product((0, 1), repeat=n))
    acceptance_record(2, ok, f"exhaustive roundtrip N=1..6, [1,0,1,1] -> {cat_label([1, 0, 1, 1])}")
    assert ok


def test_c03_gradient_fidelity(acceptance_record):
    t = time.perf_counter()
    clean = checks.model_grad_error("MAL")
    faulty = checks.model_grad_error("MAL", fault="relu")
    seconds = time.perf_counter() - t
    ok = clean < 1e-4 and faulty > 1e-2 and seconds < 60
    acceptance_record(3, ok, f"MAL max rel err {clean:.2e}, corrupted relu {faulty:.2e}, {seconds:.1f}s")
    assert ok


def test_c04_metric_oracles(acceptance_record):
    err = checks.auc_oracle_error(instances=200, max_m=2000)
    g = checks.gauc_example()
    ok = err <= 1e-12 and g == 0.875
    acceptance_record(4, ok, f"max |AUC - pairwise| {err:.1e} over 200 instances, GAUC example {g!r}")
    assert ok


def test_c05_positive_ratios(bench, acceptance_record):
    r = bench[1]["positive_ratio"]
    lin, mta = r["Linear"], r["RemovalEffectMTA"]
    ok = 1.2 <= lin <= 1.6 and mta > 1.0
    acceptance_record(5, ok, f"Linear/LastClick {lin:.3f}, MTA/LastClick {mta:.3f}")
    assert ok


def test_c06_main_result(bench, acceptance_record):
    _, report, seconds = bench
    d_last = _seeds(report, "LastClick", "MAL") - _seeds(report, "LastClick", "Base")
    d_mta = _seeds(report, "RemovalEffectMTA", "MAL") - _seeds(report, "RemovalEffectMTA", "Base")
    wins = int((d_last > 0).sum())
    ok = d_last.mean() >= 0.003 and wins == 5 and d_mta.mean() > 0 and seconds < 1800
    acceptance_record(6, ok, f"LastClick MAL-Base {d_last.mean():+.4f} (wins {wins}/5), "
                             f"RemovalEffectMTA {d_mta.mean():+.4f}, pipeline {seconds / 60:.1f} min")
    assert ok


def test_c07_ablation(bench, acceptance_record):
    report = bench[1]
    gap = float((_seeds(report, "LastClick", "MAL_noMultiAttr") - _seeds(report, "LastClick", "Base")).mean())
    wins = int((_seeds(report, "LastClick", "MAL") >= _seeds(report, "LastClick", "MAL_noCAT")).sum())
    ok = abs(gap) <= 0.001 and wins >= 4
    acceptance_record(7, ok, f"noMultiAttr-Base {gap:+.4f} (need |.| <= 0.001), MAL >= noCAT in {wins}/5 seeds")
    assert ok


def test_c08_information_gain_trend(bench, acceptance_record):
    ub = bench[1]["primaries"]["LastClick"]["user_buckets"]
    rho = ub["spearman_bucket_vs_delta"]
    ok = ub["buckets"] >= 4 and rho > 0 and ub["zero_bucket_smallest"]
    acceptance_record(8, ok, f"{ub['buckets']} buckets, Spearman {rho:.2f}, "
                             f"zero-gain bucket smallest: {ub['zero_bucket_smallest']}")
    assert ok


def test_c09_industry_trend(bench, acceptance_record):
    ind = bench[1]["primaries"]["LastClick"]["industries"]
    lo, sh = ind["long_path_delta_auc"], ind["short_path_delta_auc"]
    ok = lo >= sh
    acceptance_record(9, ok, f"long-path dAUC {lo:+.4f}, short-path dAUC {sh:+.4f}")
    assert ok


def test_c10_determinism(bench, tmp_path, acceptance_record):
    first = bench[0] / "reports"
    second = tmp_path / "w"
    _run_pipeline(second)
    names = sorted(p.name for p in first.iterdir() if p.is_file())
    same = [n for n in names if (first / n).read_bytes() == (second / "reports" / n).read_bytes()]
    ok = len(names) > 0 and same == names and names == sorted(p.name for p in (second / "reports").iterdir()
                                                              if p.is_file())
    acceptance_record(10, ok, f"{len(same)}/{len(names)} report files byte-identical across two runs")
    assert ok
