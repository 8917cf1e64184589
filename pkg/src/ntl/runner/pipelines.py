"""Per-mode experiment pipelines writing into append-only run directories."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ntl.attacks import run_attack, trigger_accuracy
from ntl.augmentation import generate_auxiliary
from ntl.domains import DomainDataset, apply_patch, ingest_dataset, make_synthetic_domain_pair, save_dataset
from ntl.errors import NTLError
from ntl.mi_probe import ProbeConfig, probe_model
from ntl.models import accuracy, build_model, save_checkpoint
from ntl.objective import train_supervised, train_target_specified
from ntl.protection import evaluate_authorization, train_authorized, train_ownership, verify_ownership
from ntl.runner.config import ExperimentConfig

log = logging.getLogger("ntl.runner")

STATUS_FILE = "status.json"


@dataclass
class Domains:
    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset


@dataclass
class RunArtifacts:
    run_dir: Path
    config_path: Path
    seed_dirs: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def load_domains(cfg: ExperimentConfig) -> Domains:
    ds = cfg.dataset
    if ds.source.startswith("synthetic"):
        src, tgt = make_synthetic_domain_pair(ds.seed, ds.shift(), ds.n_samples)
        if ds.source == "synthetic-shifted":
            src, tgt = tgt.with_tag(0), src.with_tag(1)
        s_tr, s_te = src.split(ds.n_test)
        t_tr, t_te = tgt.split(ds.n_test)
        return Domains(s_tr, s_te, t_tr, t_te)
    load = lambda name, split: ingest_dataset(name, ds.root, split, seed=ds.seed)  # noqa: E731
    return Domains(load(ds.source, "train"), load(ds.source, "test"),
                   load(ds.target, "train").with_tag(1), load(ds.target, "test").with_tag(1))


def new_run_dir(cfg: ExperimentConfig) -> Path:
    base = Path(cfg.output_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = base / f"{cfg.name}-{cfg.mode}-{stamp}"
    i = 1
    while run_dir.exists():
        run_dir = base / f"{cfg.name}-{cfg.mode}-{stamp}-{i}"
        i += 1
    run_dir.mkdir(parents=True)
    return run_dir


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _mi_hook(cfg: ExperimentConfig, seed: int, d0: DomainDataset, d1: DomainDataset):
    if not cfg.probe.enabled:
        return None
    pcfg = ProbeConfig(cfg.probe.hidden, cfg.probe.epochs)

    def hook(model, epoch):
        return {"mi": probe_model(model, d0, d1, seed, cfg.probe.n, pcfg)["mi"]}

    return hook


def _model(cfg: ExperimentConfig, seed: int, data: Domains):
    return build_model(cfg.model.spec(data.source_train.geometry[0]), seed)


# ---------------------------------------------------------------------------
# pipelines: each returns the seed's report dict

def run_supervised(cfg, seed, data: Domains, out: Path) -> dict:
    model, _ = train_supervised(data.source_train, _model(cfg, seed, data), cfg.ntl.build(seed),
                                {"source": data.source_test, "target": data.target_test}, out / "history.jsonl")
    save_checkpoint(model, out / "model.ckpt", {"seed": seed, "mode": cfg.mode})
    return {"source_acc": accuracy(model, data.source_test), "target_acc": accuracy(model, data.target_test)}


def _ntl_with_aux(cfg, seed, data: Domains, out: Path, aux: DomainDataset, eval_aux: DomainDataset):
    model0 = _model(cfg, seed, data)
    hook = _mi_hook(cfg, seed, data.source_test, eval_aux)
    report = {}
    if hook is not None:
        report["mi_init"] = hook(model0, 0)["mi"]
    model, history = train_target_specified(data.source_train, aux, model0, cfg.ntl.build(seed),
                                            data.source_test, eval_aux, out / "history.jsonl", hook)
    save_checkpoint(model, out / "model.ckpt", {"seed": seed, "mode": cfg.mode})
    report.update(source_acc=accuracy(model, data.source_test), target_acc=accuracy(model, data.target_test))
    if hook is not None:
        report["mi_final"] = history[-1]["mi"]
    return report, model


def run_target_specified(cfg, seed, data: Domains, out: Path) -> dict:
    return _ntl_with_aux(cfg, seed, data, out, data.target_train, data.target_test)[0]


def run_source_only(cfg, seed, data: Domains, out: Path) -> dict:
    aug = cfg.aug.build(seed, cfg.ntl.kernel.build())
    aux = generate_auxiliary(data.source_train, aug)
    save_dataset(aux, out / "auxiliary")
    report, model = _ntl_with_aux(cfg, seed, data, out, aux, data.target_test)
    report["aux_acc"] = accuracy(model, aux)
    return report


def run_ownership(cfg, seed, data: Domains, out: Path) -> dict:
    patch = cfg.patch.build()
    ntl_cfg = cfg.ntl.build(seed)
    patched_test = apply_patch(data.source_test, patch)
    hook = _mi_hook(cfg, seed, data.source_test, patched_test)
    model0 = _model(cfg, seed, data)
    report: dict = {"threshold": cfg.threshold}
    if hook is not None:
        report["mi_init"] = hook(model0, 0)["mi"]
    model, history = train_ownership(data.source_train, patch, model0, ntl_cfg, data.source_test,
                                     out / "history.jsonl", hook)
    save_checkpoint(model, out / "model.ckpt", {"seed": seed, "mode": cfg.mode, "patch": cfg.patch.model_dump()})
    report["ntl"] = verify_ownership(model, data.source_test, patch, cfg.threshold).to_dict()
    if hook is not None:
        report["mi_final"] = history[-1]["mi"]
    if cfg.baseline:
        base, _ = train_supervised(data.source_train, _model(cfg, seed, data), ntl_cfg,
                                   {"source": data.source_test, "patched": patched_test},
                                   out / "baseline_history.jsonl")
        save_checkpoint(base, out / "baseline.ckpt", {"seed": seed, "mode": "supervised"})
        report["baseline"] = verify_ownership(base, data.source_test, patch, cfg.threshold).to_dict()
    report["attacks"] = {}
    for section in cfg.attacks:
        acfg = section.build(seed)
        started = time.time()
        attacked = run_attack(model, data.source_train, acfg, unlabeled=data.target_train)
        entry = verify_ownership(attacked, data.source_test, patch, cfg.threshold).to_dict()
        if acfg.method == "overwrite":
            entry["trigger_acc"] = trigger_accuracy(attacked, data.source_test, acfg)
        entry["seconds"] = round(time.time() - started, 3)
        entry["config"] = acfg.to_dict()
        report["attacks"][acfg.method] = entry
        log.info("seed %d attack %s: clean %.3f patched %.3f", seed, acfg.method,
                 entry["acc_without_patch"], entry["acc_with_patch"])
    return report


def run_authorization(cfg, seed, data: Domains, out: Path) -> dict:
    patch = cfg.patch.build()
    aug = cfg.aug.build(seed, cfg.ntl.kernel.build())
    model, _, generated = train_authorized(data.source_train, patch, aug, cfg.ntl.build(seed),
                                           _model(cfg, seed, data), eval_source=data.source_test,
                                           history_path=out / "history.jsonl")
    save_dataset(generated, out / "auxiliary")
    save_checkpoint(model, out / "model.ckpt", {"seed": seed, "mode": cfg.mode, "patch": cfg.patch.model_dump()})
    rep = evaluate_authorization(model, [data.source_test, data.target_test], patch, ["source", "target"])
    return rep.to_dict()


PIPELINES = {
    "supervised": run_supervised,
    "target-specified": run_target_specified,
    "source-only": run_source_only,
    "ownership": run_ownership,
    "authorization": run_authorization,
}


# ---------------------------------------------------------------------------

def flatten(report: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in report.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[key] = float(v)
    return out


def summarize(reports: dict) -> dict:
    """Mean and sample standard deviation of every numeric report entry across seeds."""
    flat = [flatten(r) for r in reports.values()]
    keys = sorted(set().union(*flat)) if flat else []
    summary = {}
    for k in keys:
        if k in ("seed", "seconds") or ".config." in k or k.endswith(".seconds") or k.endswith("threshold"):
            continue
        vals = np.array([f[k] for f in flat if k in f])
        summary[k] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                      "n": int(vals.size)}
    return summary


def run_experiment(cfg: ExperimentConfig, data: Optional[Domains] = None) -> RunArtifacts:
    run_dir = new_run_dir(cfg)
    config_path = run_dir / "config.yaml"
    config_path.write_text(cfg.to_yaml())
    write_json(run_dir / STATUS_FILE, {"state": "running", "mode": cfg.mode})
    art = RunArtifacts(run_dir, config_path)
    try:
        data = data or load_domains(cfg)
        for seed in cfg.seeds:
            out = run_dir / f"seed-{seed}"
            out.mkdir()
            log.info("%s seed %d -> %s", cfg.mode, seed, out)
            started = time.time()
            report = PIPELINES[cfg.mode](cfg, seed, data, out)
            report.update(seed=seed, mode=cfg.mode, seconds=round(time.time() - started, 3))
            write_json(out / "report.json", report)
            art.seed_dirs[seed] = out
            art.reports[seed] = report
    except NTLError as exc:
        write_json(run_dir / STATUS_FILE, {"state": "failed", "mode": cfg.mode, "error": str(exc)})
        raise
    except Exception as exc:
        write_json(run_dir / STATUS_FILE, {"state": "failed", "mode": cfg.mode, "error": repr(exc)})
        raise NTLError(f"{cfg.mode} pipeline failed: {exc!r}") from exc
    art.summary = summarize(art.reports)
    write_json(run_dir / "summary.json", art.summary)
    write_json(run_dir / STATUS_FILE, {"state": "complete", "mode": cfg.mode, "seeds": list(cfg.seeds)})
    return art
