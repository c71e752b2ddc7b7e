"""Cross-seed aggregation into text, JSON and CSV tables plus PNG figures."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import Tag
from .config import ExperimentConfig
from .errors import DependencyError
from .metrics import group_lift_report, spearman, user_gain_buckets
from .pipeline import MANIFEST, Job, _sha, claim, load_eval, load_split, notice, read_manifest, write_json

ABLATION_VARIANTS = ("MAL", "MAL_noCAT", "MAL_noMultiAttr", "Base")
REFERENCE = "Base"


def _stats(values) -> dict:
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max())}


def _fmt(x, digits=4) -> str:
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.{digits}f}"
    return str(x)


def text_table(title: str, header: list[str], rows: list[list]) -> str:
    cells = [header] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(line(header))
    return "\n".join([title, rule, line(header), rule, *(line(r) for r in cells[1:]), rule, ""])


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(c) if isinstance(c, float) else c for c in r])
    return buf.getvalue()


@dataclass
class Table:
    name: str
    title: str
    header: list
    rows: list

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": self.header, "rows": self.rows}


# ------------------------------------------------------------- collection


def collect(cfg: ExperimentConfig, primary: str, variants, seeds) -> dict:
    """variant -> list over seeds of (metrics dict, predictions)."""
    out = {}
    for v in variants:
        out[v] = [load_eval(cfg, Job(primary, v, s)) for s in seeds]
    return out


def comparison_table(name: str, title: str, runs: dict, variants, seeds) -> Table:
    base = np.array([m["gauc"] for m, _ in runs[REFERENCE]]) if REFERENCE in runs else None
    rows = []
    for v in variants:
        g = [m["gauc"] for m, _ in runs[v]]
        a = [m["auc"] for m, _ in runs[v]]
        gs = _stats(g)
        if base is not None:
            d = np.array(g) - base
            delta, wins = float(d.mean()), int((d > 0).sum())
        else:
            delta, wins = float("nan"), 0
        rows.append([v, gs["mean"], gs["min"], gs["max"], _stats(a)["mean"], delta, f"{wins}/{len(seeds)}"])
    header = ["variant", "gauc_mean", "gauc_min", "gauc_max", "auc_mean", "delta_gauc_vs_base", "wins_vs_base"]
    return Table(name, title, header, rows)


def ratio_table(cfg: ExperimentConfig) -> Table | None:
    p = cfg.path("samples") / "ratios.json"
    if not p.exists():
        raise DependencyError(f"missing upstream artifact {p}")
    d = json.loads(p.read_text(encoding="utf-8"))
    if not d["positive_ratio"]:
        return None
    rows = [[m, d["positives"][m], float(d["positive_ratio"][m])] for m in cfg.attribution.mechanisms]
    return Table("ratios", "Positive samples per mechanism (training split, ratio to LastClick)",
                 ["mechanism", "positives", "ratio_to_lastclick"], rows)


def user_gain(cfg: ExperimentConfig, primary: str) -> dict:
    """Per-user Linear-minus-LastClick positive count over the trailing training window."""
    train = load_split(cfg, "train", primary)
    ts = np.sort(train.ts)
    cut = ts[min(len(ts) - 1, int(np.floor((1.0 - cfg.report.user_window) * len(ts))))]
    m = train.ts >= cut
    extra = train.positives(Tag.LINEAR)[m].astype(np.int64) - train.positives(Tag.LAST_CLICK)[m].astype(np.int64)
    users = train.user_id[m]
    gain = np.bincount(users, weights=extra, minlength=cfg.gen.n_users)
    return {int(u): int(round(g)) for u, g in enumerate(gain)}


def _quiet_lift(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return group_lift_report(*args, **kw)


def user_bucket_table(cfg: ExperimentConfig, primary: str, runs: dict, model="MAL") -> tuple[Table, dict]:
    test = load_split(cfg, "test", primary)
    gain = user_gain(cfg, primary)
    buckets = user_gain_buckets(gain, cfg.report.gain_edges)
    group = np.array([buckets.get(int(u), 0) for u in test.user_id])
    k = test.index(primary)
    per_bucket: dict = {}
    dropped = 0
    for (_, pb), (_, pm) in zip(runs[REFERENCE], runs[model]):
        t = _quiet_lift(pb, pm, test.labels[:, k], test.weights[:, k], test.user_id, group, "user")
        dropped = max(dropped, t.dropped)
        for r in t.rows:
            per_bucket.setdefault(r.key, []).append((r.metric_a, r.metric_b, r.n_samples))
    edges = list(cfg.report.gain_edges)
    rows = []
    for b in sorted(per_bucket):
        vals = np.array(per_bucket[b])
        members = [g for u, g in gain.items() if buckets[u] == b]
        label = f">={edges[b]}" if b == len(edges) - 1 else (f"{edges[b]}" if edges[b + 1] - edges[b] == 1
                                                             else f"{edges[b]}-{edges[b + 1] - 1}")
        rows.append([b, label, len(members), float(np.mean(members)) if members else float("nan"),
                     int(vals[0, 2]), float(vals[:, 0].mean()), float(vals[:, 1].mean()),
                     float((vals[:, 1] - vals[:, 0]).mean()), len(vals)])
    deltas = [r[7] for r in rows]
    summary = {
        "buckets": len(rows),
        "dropped": dropped,
        "spearman_bucket_vs_delta": spearman([r[0] for r in rows], deltas) if len(rows) >= 2 else float("nan"),
        "zero_bucket_smallest": bool(rows and rows[0][0] == 0 and deltas[0] == min(deltas)),
    }
    header = ["bucket", "pos_gain", "users", "mean_pos_gain", "test_samples", "gauc_base", f"gauc_{model}",
              "delta_gauc", "seeds"]
    return Table(f"user_buckets_{primary}", f"GAUC lift by user positive-gain bucket ({model} vs Base, {primary})",
                 header, rows), summary


def industry_table(cfg: ExperimentConfig, primary: str, runs: dict, model="MAL") -> tuple[Table, dict]:
    test = load_split(cfg, "test", primary)
    train = load_split(cfg, "train", primary)
    k = test.index(primary)
    growth = {}
    for i in range(cfg.gen.n_industries):
        m = train.industry_id == i
        last = int(train.positives(Tag.LAST_CLICK)[m].sum())
        growth[i] = int(train.positives(Tag.LINEAR)[m].sum()) / last - 1.0 if last else float("nan")
    per_ind: dict = {}
    for (_, pb), (_, pm) in zip(runs[REFERENCE], runs[model]):
        t = _quiet_lift(pb, pm, test.labels[:, k], test.weights[:, k], test.user_id, test.industry_id, "industry",
                        pos_growth=growth)
        for r in t.rows:
            per_ind.setdefault(r.key, []).append((r.metric_a, r.metric_b, r.n_samples))
    long_i, short_i = cfg.gen.long_path_industries(), cfg.gen.short_path_industries()
    profiles = cfg.gen.industry_path_profile
    rows = []
    for i in sorted(per_ind):
        vals = np.array(per_ind[i])
        kind = "long" if i in long_i else "short" if i in short_i else "mid"
        rows.append([i, kind, profiles[i].mean_clicks, profiles[i].carryover_gamma, growth[i], int(vals[0, 2]),
                     float(vals[:, 0].mean()), float(vals[:, 1].mean()), float((vals[:, 1] - vals[:, 0]).mean())])
    d = {r[0]: r[8] for r in rows}
    long_d = [d[i] for i in long_i if i in d]
    short_d = [d[i] for i in short_i if i in d]
    summary = {
        "long_path_delta_auc": float(np.mean(long_d)) if long_d else float("nan"),
        "short_path_delta_auc": float(np.mean(short_d)) if short_d else float("nan"),
    }
    header = ["industry", "path", "mean_clicks", "carryover_gamma", "pos_growth", "test_samples", "auc_base",
              f"auc_{model}", "delta_auc"]
    return Table(f"industries_{primary}", f"AUC lift by industry ({model} vs Base, {primary})", header, rows), summary


# ---------------------------------------------------------------- figures


def _figure(width=6.0, height=None):
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    height = height or width * 0.618
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    ax.grid(axis="y", alpha=0.3)
    ax.spines[["top", "right"]].set_visible(False)
    return fig, ax


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    # no software/date metadata so reruns produce identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})


def plot_comparison(table: Table, path: Path) -> None:
    names = [r[0] for r in table.rows]
    mean = np.array([r[1] for r in table.rows])
    lo, hi = mean - np.array([r[2] for r in table.rows]), np.array([r[3] for r in table.rows]) - mean
    fig, ax = _figure()
    x = np.arange(len(names))
    ax.bar(x, mean, color="#4c72b0", width=0.6)
    ax.errorbar(x, mean, yerr=[lo, hi], fmt="none", ecolor="black", capsize=4, lw=1)
    ax.set_xticks(x, names, rotation=20, ha="right")
    span = max(float((mean + hi).max() - (mean - lo).min()), 1e-3)
    ax.set_ylim(float((mean - lo).min()) - 0.5 * span, float((mean + hi).max()) + 0.3 * span)
    ax.set_ylabel("GAUC (mean, min-max over seeds)")
    ax.set_title(table.title, fontsize=9)
    _save(fig, path)


def plot_lift(table: Table, key_col: int, delta_col: int, xlabel: str, ylabel: str, path: Path) -> None:
    keys = [str(r[key_col]) for r in table.rows]
    d = np.array([r[delta_col] for r in table.rows])
    fig, ax = _figure()
    ax.bar(np.arange(len(keys)), d, color=np.where(d >= 0, "#55a868", "#c44e52"), width=0.6)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(np.arange(len(keys)), keys)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(table.title, fontsize=9)
    _save(fig, path)


# ------------------------------------------------------------------ report


def _write_tables(out: Path, header_lines: list[str], tables: list[Table], summary: dict) -> None:
    text = "\n".join(header_lines) + "\n\n" + "\n".join(text_table(t.title, t.header, t.rows) for t in tables)
    (out / "report.txt").write_text(text, encoding="utf-8")
    for t in tables:
        (out / f"{t.name}.csv").write_text(csv_text(t.header, t.rows), encoding="utf-8")
    write_json(out / "report.json", dict(summary, tables={t.name: t.to_dict() for t in tables}))


def report_digest(cfg: ExperimentConfig, variants, seeds) -> str:
    return _sha({"config": cfg.digest(), "variants": list(variants), "seeds": list(seeds)})


def build_report(cfg: ExperimentConfig, out: Path, variants, seeds, full: bool = True) -> dict:
    digest = cfg.digest()
    tables: list[Table] = []
    summary: dict = {"config_digest": digest, "seeds": list(seeds), "variants": list(variants), "primaries": {}}
    figures = []
    if full:
        rt = ratio_table(cfg)
        if rt is not None:
            tables.append(rt)
            summary["positive_ratio"] = {r[0]: r[2] for r in rt.rows}
    mechs = cfg.attribution.mechanisms
    for primary in cfg.attribution.primary_tags:
        runs = collect(cfg, primary, variants, seeds)
        psum: dict = {}
        name = "main" if full else "ablation"
        title = ("Main comparison" if full else "Ablation") + f" (primary {primary}, {len(seeds)} seeds)"
        main = comparison_table(f"{name}_{primary}", title, runs, variants, seeds)
        tables.append(main)
        figures.append((plot_comparison, (main, out / f"fig_{name}_{primary}.png")))
        psum[name] = {r[0]: {"gauc_mean": r[1], "gauc_min": r[2], "gauc_max": r[3], "auc_mean": r[4],
                             "delta_gauc_vs_base": r[5]} for r in main.rows}
        psum["gauc_per_seed"] = {v: [m["gauc"] for m, _ in runs[v]] for v in variants}
        if full:
            abl = [v for v in ABLATION_VARIANTS if v in variants]
            if len(abl) > 1:
                tables.append(comparison_table(f"ablation_{primary}", f"Ablation (primary {primary})", runs, abl,
                                               seeds))
        if {"MAL", REFERENCE} <= set(variants) and full:
            if str(Tag.LINEAR) in mechs and str(Tag.LAST_CLICK) in mechs:
                ub, ub_sum = user_bucket_table(cfg, primary, runs)
                tables.append(ub)
                psum["user_buckets"] = ub_sum
                figures.append((plot_lift, (ub, 1, 7, "Linear minus LastClick positives per user",
                                            "GAUC lift (MAL - Base)", out / f"fig_user_buckets_{primary}.png")))
                it, it_sum = industry_table(cfg, primary, runs)
                tables.append(it)
                psum["industries"] = it_sum
                figures.append((plot_lift, (it, 0, 8, "industry", "AUC lift (MAL - Base)",
                                            out / f"fig_industries_{primary}.png")))
        summary["primaries"][primary] = psum
    header = [f"config digest {digest}", f"seeds {list(seeds)}"]
    _write_tables(out, header, tables, summary)
    if cfg.report.figures:
        for fn, args in figures:
            fn(*args)
    return summary


def cmd_report(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = cfg.path("reports")
    variants, seeds = cfg.train.variants, cfg.train.seeds
    digest = report_digest(cfg, variants, seeds)
    if claim(out, digest, force, "report"):
        build_report(cfg, out, variants, seeds, full=True)
        write_json(out / MANIFEST, {"stage": "report", "digest": digest, "seeds": list(seeds)})
        notice(f"report: wrote {out / 'report.txt'}")
    return out


def cmd_ablation_report(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = cfg.path("reports") / "ablation"
    variants = list(ABLATION_VARIANTS)
    digest = report_digest(cfg, variants, cfg.train.seeds)
    if claim(out, digest, force, "ablate report"):
        build_report(cfg, out, variants, cfg.train.seeds, full=False)
        write_json(out / MANIFEST, {"stage": "ablate", "digest": digest, "seeds": list(cfg.train.seeds)})
        notice(f"ablate: wrote {out / 'report.txt'}")
    return out


__all__ = ["cmd_report", "cmd_ablation_report", "build_report", "read_manifest"]
