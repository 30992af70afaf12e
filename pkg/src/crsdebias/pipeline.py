"""Experiment stages and run-directory management.

A run directory holds::

    manifest.json    config echo, seeds, stage log, content hashes
    catalog/         prepared catalog (tsv)
    split.bin        train/valid/test interaction arrays
    stats.json       catalog statistics
    model.bin        trained recommender
    mapper.bin       attribute -> embedding mapper (CSM stage)
    policy_*.bin     policy networks (single, pop, unpop)
    episodes.jsonl   one simulated episode per line
    metrics.json     MetricsReport

Stages always run in the order prepare, recommender (PAL), CSM, policy (DPL),
simulate, report.
"""

from __future__ import annotations

import copy
import datetime as _dt
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .coldstart import AttributeMapper, apply_csm, fit_mapper
from .config import ConfigError, ExperimentConfig
from .dataset import (
    CatalogError,
    DataSplit,
    compute_popularity_and_tiers,
    filter_min_interactions,
    generate_synthetic,
    load_catalog,
    save_catalog,
    split_interactions,
)
from .kernels import BACKEND
from .metrics import METRIC_FIELDS, MetricsReport, compute_report, rows_to_csv
from .policy import (
    DualPolicy,
    PolicyNetwork,
    dual_agent_factory,
    maxent_agent_factory,
    network_agent_factory,
    train_dual,
    train_network,
)
from .recommender import FactorizationModel, train
from .simulator import read_logs, run_suite, write_logs

log = logging.getLogger(__name__)

VARIANTS = ("full", "-PAL", "-CSM", "-DPL", "baseline")
REPORT_FORMATS = ("json", "csv", "markdown")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ run directory

def new_run_dir(cfg: ExperimentConfig) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = Path(cfg.output_dir) / f"{stamp}-{cfg.name}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def _manifest_path(run_dir) -> Path:
    return Path(run_dir) / "manifest.json"


def read_manifest(run_dir) -> dict:
    path = _manifest_path(run_dir)
    if not path.exists():
        raise ConfigError(f"{run_dir} is not a run directory (no manifest.json)")
    return json.loads(path.read_text(encoding="utf-8"))


def _write_manifest(run_dir, manifest: dict):
    _manifest_path(run_dir).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _record(run_dir, stage: str, outputs, **extra):
    manifest = read_manifest(run_dir)
    hashes = manifest.setdefault("hashes", {})
    for name in outputs:
        p = Path(run_dir) / name
        if p.is_file():
            hashes[name] = checkpoint.file_sha256(p)
    manifest.setdefault("stages", []).append({"stage": stage, **extra})
    _write_manifest(run_dir, manifest)


def config_of(run_dir) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_manifest(run_dir)["config"])


def _require(run_dir, name: str, message: str) -> Path:
    p = Path(run_dir) / name
    if not p.exists():
        raise ConfigError(message)
    return p


# ------------------------------------------------------------------ stages

def prepare(cfg: ExperimentConfig, run_dir) -> dict:
    """Load or generate the catalog, filter, split and annotate it."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset
    if ds.path is not None:
        catalog = load_catalog(ds.path, ds.format)
        source = {"path": str(ds.path), "format": ds.format}
    else:
        sp = ds.synthetic
        catalog = generate_synthetic(
            sp.n_users, sp.n_items, sp.n_attrs, sp.attrs_per_item, sp.interactions_per_user,
            sp.zipf_exponent, sp.seed, head_pool=sp.head_pool, head_pool_bias=sp.head_pool_bias,
            prefs_per_user=sp.prefs_per_user, affinity=sp.affinity, attr_skew=sp.attr_skew,
            taste=sp.taste, taste_dim=sp.taste_dim,
        )
        source = {"synthetic": True}
    raw_stats = catalog.stats()
    catalog = filter_min_interactions(catalog, ds.min_interactions)
    split = split_interactions(catalog, ds.ratios, cfg.seed)
    catalog = compute_popularity_and_tiers(catalog, split)
    save_catalog(catalog, run_dir / "catalog")
    save_split(split, run_dir / "split.bin")
    stats = {"raw": raw_stats, "filtered": catalog.stats(), "split": {
        "train": int(len(split.train)), "valid": int(len(split.valid)), "test": int(len(split.test))},
        "select_threshold": catalog.select_threshold, "cold_items": int(catalog.cold_mask.sum())}
    (run_dir / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    manifest = {"config": cfg.to_dict(), "version": __version__, "kernel_backend": BACKEND,
                "seed": cfg.seed, "source": source, "stages": [], "hashes": {}}
    if ds.path is not None:
        manifest["input_hashes"] = {p.name: checkpoint.file_sha256(p) for p in sorted(Path(ds.path).glob("*.tsv"))}
    _write_manifest(run_dir, manifest)
    _record(run_dir, "prepare", ["split.bin", "stats.json", "catalog/items.tsv", "catalog/interactions.tsv"])
    log.info("prepared: %s", json.dumps(stats["filtered"]))
    return stats


def save_split(split: DataSplit, path):
    header = {"kind": "data_split", "ratios": list(split.ratios), "seed": split.seed}
    return checkpoint.save_arrays(path, header, {"train": split.train, "valid": split.valid, "test": split.test})


def load_split(path) -> DataSplit:
    header, arrays = checkpoint.load_arrays(path)
    if header.get("kind") != "data_split":
        raise checkpoint.CheckpointError(f"{path}: not a data split")
    as_int = {k: arrays[k].astype(np.int64).reshape(-1, 2) for k in ("train", "valid", "test")}
    return DataSplit(as_int["train"], as_int["valid"], as_int["test"], tuple(header["ratios"]), header["seed"])


def load_prepared(run_dir):
    run_dir = Path(run_dir)
    _require(run_dir, "split.bin", f"{run_dir}: run 'prepare' first")
    catalog = load_catalog(run_dir / "catalog")
    split = load_split(run_dir / "split.bin")
    expected = json.loads((run_dir / "stats.json").read_text())["filtered"]
    if catalog.n_users != expected["users"] or catalog.n_items != expected["items"]:
        raise ConfigError(f"{run_dir}: prepared catalog does not match stats.json")
    return compute_popularity_and_tiers(catalog, split), split


def train_recommender_stage(cfg: ExperimentConfig, run_dir) -> FactorizationModel:
    catalog, split = load_prepared(run_dir)
    pcfg = replace(cfg.recommender, seed=cfg.seed)
    if cfg.rec_mode == "none":
        model = FactorizationModel.init(catalog.n_users, catalog.n_items, catalog.n_attrs, pcfg.dim, pcfg.seed)
        model.meta = {"mode": "none", "seed": pcfg.seed}
    else:
        t0 = time.perf_counter()
        model = train(catalog, split, pcfg, cfg.rec_mode)
        log.info("recommender (%s) trained in %.1fs", cfg.rec_mode, time.perf_counter() - t0)
    model.save(Path(run_dir) / "model.bin")
    _record(run_dir, "recommender", ["model.bin"], mode=cfg.rec_mode, seed=pcfg.seed)
    return model


def fit_csm_stage(cfg: ExperimentConfig, run_dir) -> AttributeMapper:
    path = Path(run_dir) / "model.bin"
    if not path.exists():
        raise ConfigError("CSM requires trained model")
    model = FactorizationModel.load(path)
    if model.meta.get("mode") in (None, "none"):
        raise ConfigError("CSM requires trained model")
    catalog, _ = load_prepared(run_dir)
    c = cfg.csm
    mapper = fit_mapper(model, catalog, lam=c.lam, epochs=c.epochs, learning_rate=c.learning_rate, seed=cfg.seed)
    mapper.save(Path(run_dir) / "mapper.bin")
    _record(run_dir, "csm", ["mapper.bin"], final_loss=mapper.final_loss)
    return mapper


def load_ranker(cfg: ExperimentConfig, run_dir):
    """The recommender as used in conversations: CSM applied when the stage is on."""
    run_dir = Path(run_dir)
    model = FactorizationModel.load(_require(run_dir, "model.bin", f"{run_dir}: run 'train-rec' first"))
    catalog, split = load_prepared(run_dir)
    if cfg.csm.enabled:
        mapper = AttributeMapper.load(_require(run_dir, "mapper.bin", f"{run_dir}: run 'fit-csm' first"))
        model = apply_csm(model, mapper, catalog)
    return model, catalog, split


def _policy_train_cfg(cfg: ExperimentConfig, kind: str):
    tcfg = replace(cfg.policy.train, rec_threshold=cfg.policy.rec_threshold, seed=cfg.seed)
    if kind == "single-rl":
        # the exposure penalty belongs to dual-policy learning; a plain RL agent ignores it
        tcfg = replace(tcfg, reward=replace(tcfg.reward, w_bias=0.0))
    return tcfg


def train_policy_stage(cfg: ExperimentConfig, run_dir):
    model, catalog, split = load_ranker(cfg, run_dir)
    kind = cfg.policy.kind
    tcfg = _policy_train_cfg(cfg, kind)
    t0 = time.perf_counter()
    if kind == "maxent":
        _record(run_dir, "policy", [], kind=kind)
        return None
    if kind == "single-rl":
        net = train_network(catalog, split.valid, model, cfg.session, tcfg)
        net.save(Path(run_dir) / "policy_single.bin")
        outputs = ["policy_single.bin"]
        result = net
    else:
        dual = train_dual(catalog, split.valid, model, cfg.session, tcfg)
        dual.pn_pop.save(Path(run_dir) / "policy_pop.bin")
        dual.pn_unpop.save(Path(run_dir) / "policy_unpop.bin")
        outputs = ["policy_pop.bin", "policy_unpop.bin"]
        result = dual
    log.info("policy (%s) trained in %.1fs", kind, time.perf_counter() - t0)
    _record(run_dir, "policy", outputs, kind=kind, seed=tcfg.seed)
    return result


def agent_factory(cfg: ExperimentConfig, run_dir, catalog):
    run_dir = Path(run_dir)
    kind = cfg.policy.kind
    if kind == "maxent":
        return maxent_agent_factory(cfg.policy.rec_threshold)
    if kind == "single-rl":
        return network_agent_factory(PolicyNetwork.load(_require(run_dir, "policy_single.bin",
                                                                 f"{run_dir}: run 'train-policy' first")))
    pop = PolicyNetwork.load(_require(run_dir, "policy_pop.bin", f"{run_dir}: run 'train-policy' first"))
    unpop = PolicyNetwork.load(_require(run_dir, "policy_unpop.bin", f"{run_dir}: run 'train-policy' first"))
    return dual_agent_factory(DualPolicy(pop, unpop, float(catalog.select_threshold)))


def simulate_stage(cfg: ExperimentConfig, run_dir, parallelism: int | None = None):
    model, catalog, split = load_ranker(cfg, run_dir)
    factory = agent_factory(cfg, run_dir, catalog)
    session = replace(cfg.session, seed=cfg.seed)
    t0 = time.perf_counter()
    logs = run_suite(split.test, catalog, model, factory, session, parallelism or cfg.parallelism)
    write_logs(logs, Path(run_dir) / "episodes.jsonl")
    log.info("simulated %d episodes in %.1fs", len(logs), time.perf_counter() - t0)
    _record(run_dir, "simulate", ["episodes.jsonl"], episodes=len(logs))
    return logs


def report_stage(cfg: ExperimentConfig, run_dir) -> MetricsReport:
    run_dir = Path(run_dir)
    logs = read_logs(_require(run_dir, "episodes.jsonl", f"{run_dir}: run 'simulate' first"))
    stats = json.loads((run_dir / "stats.json").read_text())
    t_pop = stats["filtered"]["head_threshold"]
    report = compute_report(logs, cfg.session.max_turns, cfg.session.top_k, t_pop)
    (run_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    _record(run_dir, "report", ["metrics.json"])
    return report


def _run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, CatalogError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, exc) from exc


def run_pipeline(cfg: ExperimentConfig, run_dir=None) -> Path:
    """Run every stage in order; partial outputs stay on disk if a stage fails."""
    cfg.validate()
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(cfg)
    log.info("run directory %s (stages: %s)", run_dir, ", ".join(cfg.stages) or "none")
    _run_stage("prepare", prepare, cfg, run_dir)
    _run_stage("recommender", train_recommender_stage, cfg, run_dir)
    if cfg.csm.enabled:
        _run_stage("csm", fit_csm_stage, cfg, run_dir)
    _run_stage("policy", train_policy_stage, cfg, run_dir)
    _run_stage("simulate", simulate_stage, cfg, run_dir)
    _run_stage("report", report_stage, cfg, run_dir)
    return run_dir


# ------------------------------------------------------------------ ablation

def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Full-debias config with one stage (or all, for ``baseline``) switched off."""
    v = copy.deepcopy(cfg)
    v.rec_mode, v.csm.enabled, v.policy.kind = "pal", True, "dual-rl"
    if variant in ("-PAL", "baseline"):
        v.rec_mode = "bpr"
    if variant in ("-CSM", "baseline"):
        v.csm.enabled = False
    if variant in ("-DPL", "baseline"):
        v.policy.kind = cfg.policy.base
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    v.name = f"{cfg.name}{variant}" if variant != "full" else cfg.name
    return v


def ablation_variants(skip) -> list:
    skip = {s.upper() for s in skip}
    bad = skip - {"PAL", "CSM", "DPL"}
    if bad:
        raise ConfigError(f"cannot skip unknown stage(s) {sorted(bad)}")
    return ["full"] + [f"-{s}" for s in ("PAL", "CSM", "DPL") if s in skip] + ["baseline"]


def run_ablation(cfg: ExperimentConfig, skip, run_dir=None) -> Path:
    cfg.validate()
    variants = ablation_variants(skip)
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        vcfg = variant_config(cfg, variant).validate()
        sub = run_dir / _slug(variant)
        log.info("ablation variant %s -> %s", variant, sub)
        run_pipeline(vcfg, sub)
        report = MetricsReport.from_dict(json.loads((sub / "metrics.json").read_text()))
        rows.append({"variant": variant, "dir": sub.name, "stages": list(vcfg.stages), **report.to_dict()})
    table = {"config": cfg.to_dict(), "skip": sorted(s.upper() for s in skip), "rows": rows}
    (run_dir / "ablation.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return run_dir


def _slug(variant: str) -> str:
    return "full" if variant == "full" else ("baseline" if variant == "baseline" else "no" + variant[1:].lower())


# ------------------------------------------------------------------ reports

TABLE_COLUMNS = ("per", "psr", "pcu", "sr", "hsr", "tsr", "at")


def _rows(run_dir) -> list:
    run_dir = Path(run_dir)
    if (run_dir / "ablation.json").exists():
        table = json.loads((run_dir / "ablation.json").read_text())
        return [(r["variant"], MetricsReport.from_dict({k: r[k] for k in MetricsReport.__dataclass_fields__}))
                for r in table["rows"]]
    if (run_dir / "metrics.json").exists():
        report = MetricsReport.from_dict(json.loads((run_dir / "metrics.json").read_text()))
        return [(read_manifest(run_dir)["config"].get("name", run_dir.name), report)]
    raise ConfigError(f"{run_dir}: no metrics.json or ablation.json to report")


def render_markdown(rows) -> str:
    def cell(v):
        return "n/a" if v is None else f"{v:.4f}"
    lines = ["| variant | " + " | ".join(c.upper() for c in TABLE_COLUMNS) + " |",
             "|---|" + "---:|" * len(TABLE_COLUMNS)]
    for label, rep in rows:
        lines.append(f"| {label} | " + " | ".join(cell(getattr(rep, c)) for c in TABLE_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def emit_report(run_dir, fmt: str = "json", out=None) -> Path:
    """Render the run's metrics (or ablation table) as json, csv or a markdown table."""
    if fmt not in REPORT_FORMATS:
        raise ConfigError(f"format must be one of {REPORT_FORMATS}")
    run_dir = Path(run_dir)
    rows = _rows(run_dir)
    if fmt == "json":
        if len(rows) == 1 and not (run_dir / "ablation.json").exists():
            text = rows[0][1].to_json()
        else:
            text = json.dumps([{"variant": label, **rep.to_dict()} for label, rep in rows],
                              sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        text = rows_to_csv(rows)
    else:
        text = render_markdown(rows)
    suffix = {"json": "json", "csv": "csv", "markdown": "md"}[fmt]
    out = Path(out) if out is not None else run_dir / f"report.{suffix}"
    out.write_text(text, encoding="utf-8")
    return out


__all__ = ["run_pipeline", "run_ablation", "emit_report", "prepare", "VARIANTS", "METRIC_FIELDS", "StageError"]
