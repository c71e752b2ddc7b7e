"""Pipeline stages: gen -> attribute -> train -> eval.

Every stage directory ends with a ``manifest.json`` written last, so its
presence marks a completed stage.  A manifest records the digest of the
config sections the stage depends on; downstream stages compare that digest
against the current config and refuse to run on stale inputs.
"""

from __future__ import annotations

import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import malnet
from . import numcore as nc
from .attribution import (
    N_COUNT_BUCKETS,
    Mechanism,
    MtaFitConfig,
    MtaModel,
    SampleSet,
    Tag,
    build_samples,
    fit_mta_model,
    positive_ratio_report,
    read_samples,
    write_samples,
)
from .config import ExperimentConfig
from .errors import DependencyError, StalenessError
from .journeygen import (
    N_POSITION_BUCKETS,
    N_RECENCY_BUCKETS,
    generate_dataset,
    meta_path,
    read_journeys,
    split_train_test,
    write_journeys,
)
from .metrics import gauc_detail, weighted_auc

MANIFEST = "manifest.json"


def notice(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_manifest(directory: Path) -> dict | None:
    p = directory / MANIFEST
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def require_manifest(directory: Path, digest: str, stage: str) -> dict:
    """Upstream check: the stage must be complete and built from the current config."""
    man = read_manifest(directory)
    if man is None:
        raise DependencyError(f"missing upstream artifact {directory / MANIFEST}; run `{stage}` first")
    if man["digest"] != digest:
        raise StalenessError(
            f"{directory} was produced by a different config (digest {man['digest'][:12]}, "
            f"expected {digest[:12]}); rerun `{stage}`"
        )
    return man


def claim(directory: Path, digest: str, force: bool, label: str) -> bool:
    """True if the stage should run; False if it is already complete."""
    man = read_manifest(directory)
    if man is not None and not force:
        if man["digest"] == digest:
            notice(f"{label}: up to date, skipping")
            return False
        raise StalenessError(
            f"{directory} holds output from a different config (digest {man['digest'][:12]}); "
            "pass --force to overwrite"
        )
    directory.mkdir(parents=True, exist_ok=True)
    (directory / MANIFEST).unlink(missing_ok=True)
    return True


# ---------------------------------------------------------------- digests


def gen_digest(cfg: ExperimentConfig) -> str:
    return cfg.gen.digest()


def attribute_digest(cfg: ExperimentConfig) -> str:
    return cfg.digest("gen", "attribution")


def job_digest(cfg: ExperimentConfig, primary: str, variant: str, seed: int) -> str:
    t = cfg.train
    return _sha({
        "samples": attribute_digest(cfg),
        "arch": cfg.arch.for_variant(variant).to_dict(),
        "optim": [t.lr, t.beta1, t.beta2, t.adam_eps, t.batch_size, t.epochs],
        "primary": primary,
        "seed": seed,
    })


# -------------------------------------------------------------------- gen


def journeys_path(cfg: ExperimentConfig) -> Path:
    return cfg.path("dataset") / "journeys.jsonl"


def cmd_gen(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = cfg.path("dataset")
    digest = gen_digest(cfg)
    if claim(out, digest, force, "gen"):
        log = generate_dataset(cfg.gen)
        write_journeys(log, journeys_path(cfg))
        write_json(out / MANIFEST, {"stage": "gen", "digest": digest, "seed": cfg.gen.seed,
                                    "n_journeys": len(log.journeys)})
        notice(f"gen: wrote {len(log.journeys)} journeys to {journeys_path(cfg)}")
    return out


# -------------------------------------------------------------- attribute


def make_mechanisms(cfg: ExperimentConfig, mta: MtaModel | None) -> list[Mechanism]:
    out = []
    for name in cfg.attribution.mechanisms:
        tag = Tag(name)
        out.append(Mechanism(
            tag,
            half_life=cfg.attribution.time_decay_half_life if tag is Tag.TIME_DECAY else None,
            mta=mta if "MTA" in tag.value else None,
        ))
    return out


def cmd_attribute(cfg: ExperimentConfig, force: bool = False) -> Path:
    src = cfg.path("dataset")
    require_manifest(src, gen_digest(cfg), "gen")
    jpath = journeys_path(cfg)
    if not jpath.exists() or not meta_path(jpath).exists():
        raise DependencyError(f"missing upstream artifact {jpath}")
    out = cfg.path("samples")
    digest = attribute_digest(cfg)
    if not claim(out, digest, force, "attribute"):
        return out
    log = read_journeys(jpath)
    if log.gen_config_digest != gen_digest(cfg):
        raise StalenessError(f"{jpath} was generated from a different GenConfig; rerun `gen`")
    a = cfg.attribution
    train, test = split_train_test(log, fraction=a.train_fraction)
    mta = None
    if any("MTA" in m for m in a.mechanisms):
        # fitted on the training split only so test conversions never leak into labels
        mta = fit_mta_model(train, cfg.gen.n_industries, MtaFitConfig(lr=a.mta_lr, steps=a.mta_steps, l2=a.mta_l2))
        write_json(out / "mta.json", mta.to_dict())
    mechs = make_mechanisms(cfg, mta)
    primary = a.primary_tags[0]
    meta = {"config_digest": digest}
    for name, part in (("train", train), ("test", test)):
        s = build_samples(part, mechs, primary, a.label_mode)
        s.meta = dict(meta, split=name)
        write_samples(s, out / f"{name}.jsonl")
        if name == "train":
            ratios = positive_ratio_report(s) if Tag.LAST_CLICK in s.mechanism_order else {}
            write_json(out / "ratios.json", {"config_digest": digest, "positive_ratio": ratios,
                                             "positives": {str(t): int(s.positives(t).sum()) for t in s.mechanism_order},
                                             "n_samples": len(s)})
        notice(f"attribute: {name} split has {len(s)} samples")
    write_json(out / MANIFEST, {"stage": "attribute", "digest": digest, "gen_digest": gen_digest(cfg),
                                "n_train_journeys": len(train.journeys), "n_test_journeys": len(test.journeys)})
    return out


_SAMPLE_CACHE: dict = {}


def load_split(cfg: ExperimentConfig, split: str, primary: str) -> SampleSet:
    """Sample file for ``split`` re-targeted at ``primary`` (cached per process)."""
    path = cfg.path("samples") / f"{split}.jsonl"
    if not path.exists():
        raise DependencyError(f"missing upstream artifact {path}")
    key = (str(path.resolve()), path.stat().st_mtime_ns)
    if key not in _SAMPLE_CACHE:
        _SAMPLE_CACHE.clear()
        _SAMPLE_CACHE[key] = read_samples(path)
    s = _SAMPLE_CACHE[key]
    return s if str(s.primary_tag) == primary else replace(s, primary_tag=Tag(primary))


# ------------------------------------------------------------ train / eval


@dataclass(frozen=True)
class Job:
    primary: str
    variant: str
    seed: int

    @property
    def rel(self) -> Path:
        return Path(self.primary) / self.variant / f"seed{self.seed}"

    @property
    def label(self) -> str:
        return f"{self.primary}/{self.variant}/seed{self.seed}"


def jobs_for(cfg: ExperimentConfig, variants=None, seeds=None, primaries=None) -> list[Job]:
    return [
        Job(p, v, s)
        for p in (primaries or cfg.attribution.primary_tags)
        for v in (variants or cfg.train.variants)
        for s in (seeds or cfg.train.seeds)
    ]


def vocab_sizes(cfg: ExperimentConfig) -> tuple[int, ...]:
    g = cfg.gen
    return (g.n_users, g.n_ads, g.n_industries, N_POSITION_BUCKETS, N_RECENCY_BUCKETS, N_COUNT_BUCKETS)


def train_job(cfg: ExperimentConfig, job: Job, force: bool) -> str:
    out = cfg.path("checkpoints") / job.rel
    digest = job_digest(cfg, job.primary, job.variant, job.seed)
    if not claim(out, digest, force, f"train {job.label}"):
        return "skipped"
    samples = load_split(cfg, "train", job.primary)
    t = cfg.train
    model = malnet.build_model(cfg.arch.for_variant(job.variant), vocab_sizes(cfg), samples.mechanism_order,
                               job.primary, seed=job.seed)
    stats = malnet.train(model, samples, nc.AdamHyper(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.adam_eps),
                         seed=job.seed, batch_size=t.batch_size, epochs=t.epochs)
    malnet.save_model(model, out / "model.ckpt")
    write_json(out / "stats.json", dict(stats.to_dict(), config_digest=digest, seed=job.seed))
    write_json(out / MANIFEST, {"stage": "train", "digest": digest, "seed": job.seed, "variant": job.variant,
                                "primary": job.primary, "samples_digest": attribute_digest(cfg)})
    notice(f"train {job.label}: {stats.steps} steps")
    return "trained"


def eval_job(cfg: ExperimentConfig, job: Job, force: bool) -> str:
    digest = job_digest(cfg, job.primary, job.variant, job.seed)
    ckpt_dir = cfg.path("checkpoints") / job.rel
    require_manifest(ckpt_dir, digest, "train")
    out = cfg.path("evals") / job.rel
    if not claim(out, digest, force, f"eval {job.label}"):
        return "skipped"
    test = load_split(cfg, "test", job.primary)
    model = malnet.load_model(ckpt_dir / "model.ckpt")
    pred = malnet.predict_primary(model, test.features)
    k = test.index(job.primary)
    y, w = test.labels[:, k], test.weights[:, k]
    g = gauc_detail(pred, y, w, test.user_id)
    np.save(out / "pred.npy", pred)
    write_json(out / "metrics.json", {
        "config_digest": digest,
        "seed": job.seed,
        "variant": job.variant,
        "primary": job.primary,
        "auc": weighted_auc(pred, y, w),
        "gauc": g.value,
        "users_counted": g.users_counted,
        "users_skipped": g.users_skipped,
        "n_samples": len(test),
    })
    write_json(out / MANIFEST, {"stage": "eval", "digest": digest, "seed": job.seed})
    return "evaluated"


def _run_job(args) -> str:
    kind, cfg, job, force = args
    return (train_job if kind == "train" else eval_job)(cfg, job, force)


def run_jobs(kind: str, cfg: ExperimentConfig, jobs: list[Job], n_jobs: int = 1, force: bool = False) -> list[str]:
    """Run (variant x seed) jobs, up to ``n_jobs`` at a time.  Results are in job order."""
    if kind == "train":
        require_manifest(cfg.path("samples"), attribute_digest(cfg), "attribute")
    tasks = [(kind, cfg, j, force) for j in jobs]
    if n_jobs <= 1 or len(tasks) <= 1:
        return [_run_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_job, tasks))


def cmd_train(cfg: ExperimentConfig, n_jobs: int = 1, force: bool = False, variants=None) -> list[str]:
    return run_jobs("train", cfg, jobs_for(cfg, variants), n_jobs, force)


def cmd_eval(cfg: ExperimentConfig, n_jobs: int = 1, force: bool = False, variants=None) -> list[str]:
    require_manifest(cfg.path("samples"), attribute_digest(cfg), "attribute")
    return run_jobs("eval", cfg, jobs_for(cfg, variants), n_jobs, force)


def load_eval(cfg: ExperimentConfig, job: Job) -> tuple[dict, np.ndarray]:
    d = cfg.path("evals") / job.rel
    require_manifest(d, job_digest(cfg, job.primary, job.variant, job.seed), "eval")
    return json.loads((d / "metrics.json").read_text(encoding="utf-8")), np.load(d / "pred.npy")
