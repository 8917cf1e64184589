"""Command line entry point.

Every scalar config key is also a flag: the dotted key with dots and
underscores turned into dashes (``ntl.epochs`` -> ``--ntl-epochs``). List keys
take comma-separated values. Flags override the ``--config`` file, and
``NTL_OUTPUT_DIR`` / ``NTL_THREADS`` override both.

Exit codes: 0 success, 2 invalid config or usage, 1 pipeline failure.
"""

from __future__ import annotations

import json
import logging
import sys
import time
import typing
from pathlib import Path

import click
import yaml
from pydantic import BaseModel

from ntl.attacks import METHODS, run_attack, trigger_accuracy
from ntl.augmentation import generate_auxiliary
from ntl.domains import apply_patch, save_dataset
from ntl.errors import NTLError, ValidationError
from ntl.mi_probe import ProbeConfig, probe_model
from ntl.models import load_checkpoint, save_checkpoint
from ntl.protection import verify_ownership
from ntl.runner.config import ExperimentConfig, apply_env, configure_threads, parse_config, set_key
from ntl.runner.pipelines import load_domains, run_experiment
from ntl.runner.report import report as render_report

log = logging.getLogger("ntl.cli")


def _unwrap(annotation):
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    if typing.get_origin(annotation) is typing.Union and len(args) == 1:
        return args[0]
    return annotation


def config_keys(model: type[BaseModel] = ExperimentConfig, prefix: str = "") -> dict:
    """Dotted key -> True for list-valued keys, False for scalars; nested sections are walked."""
    keys = {}
    for name, f in model.model_fields.items():
        ann = _unwrap(f.annotation)
        dotted = prefix + name
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            keys.update(config_keys(ann, dotted + "."))
        elif typing.get_origin(ann) is list:
            args = typing.get_args(ann)
            if args and isinstance(args[0], type) and issubclass(args[0], BaseModel):
                continue
            keys[dotted] = True
        else:
            keys[dotted] = False
    return keys


CONFIG_KEYS = config_keys()


def flag_name(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _param_name(key: str) -> str:
    return "cfg__" + key.replace(".", "__")


def config_options(fn):
    for key in sorted(CONFIG_KEYS, reverse=True):
        is_list = CONFIG_KEYS[key]
        fn = click.option(flag_name(key), _param_name(key), default=None, metavar="LIST" if is_list else "VALUE",
                          help=f"config key {key}" + (" (comma-separated)" if is_list else ""))(fn)
    fn = click.option("--attacks", "attack_names", default=None, metavar="LIST",
                      help=f"attack methods to run, comma-separated from {', '.join(METHODS)}")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                      help="YAML experiment config")(fn)
    return fn


def _parse_value(raw: str, is_list: bool):
    if is_list:
        return [yaml.safe_load(x) for x in raw.split(",") if x.strip()]
    return yaml.safe_load(raw)


def build_config(config_path, overrides: dict, attack_names=None, defaults: dict | None = None) -> ExperimentConfig:
    data = yaml.safe_load(Path(config_path).read_text()) if config_path else {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError("config must be a mapping")
    for k, v in (defaults or {}).items():
        data.setdefault(k, v)
    for param, raw in overrides.items():
        if not param.startswith("cfg__") or raw is None:
            continue
        key = param[len("cfg__"):].replace("__", ".")
        set_key(data, key, _parse_value(raw, CONFIG_KEYS[key]))
    if attack_names is not None:
        data["attacks"] = [{"method": m.strip()} for m in attack_names.split(",") if m.strip()]
    return parse_config(apply_env(data))


def _emit(data) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level):
    """Non-transferable learning experiments."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    configure_threads()


@cli.command()
@config_options
def train(config_path, attack_names, **overrides):
    """Run the configured mode for every seed and write a run directory."""
    cfg = build_config(config_path, overrides, attack_names)
    art = run_experiment(cfg)
    _emit({"run_dir": str(art.run_dir), "summary": art.summary})


@cli.command()
@config_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="dataset directory (default: <output_dir>/augment-<timestamp>)")
def augment(config_path, attack_names, out_dir, **overrides):
    """Train the GAN on the source split and save the generated auxiliary domain."""
    cfg = build_config(config_path, overrides, attack_names, {"mode": "source-only", "aug": {}})
    data = load_domains(cfg)
    aux = generate_auxiliary(data.source_train, cfg.aug.build(cfg.seeds[0], cfg.ntl.kernel.build()))
    out = Path(out_dir) if out_dir else Path(cfg.output_dir) / f"augment-{time.strftime('%Y%m%d-%H%M%S')}"
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"{out} exists and is not empty")
    save_dataset(aux, out, {"aug": cfg.aug.model_dump(), "seed": cfg.seeds[0]})
    _emit({"dataset_dir": str(out), "count": len(aux), "cells": len(aux.meta["cells"])})


def _checkpoint_option(fn):
    return click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)(fn)


@cli.command()
@config_options
@_checkpoint_option
def verify(config_path, attack_names, checkpoint, **overrides):
    """Clean vs patched accuracy of a checkpoint on the source test split."""
    cfg = build_config(config_path, overrides, attack_names, {"mode": "ownership"})
    model = load_checkpoint(checkpoint)
    data = load_domains(cfg)
    _emit(verify_ownership(model, data.source_test, cfg.patch.build(), cfg.threshold).to_dict())


@cli.command()
@config_options
@_checkpoint_option
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="attacked checkpoint path")
def attack(config_path, attack_names, checkpoint, method, out_path, **overrides):
    """Attack a checkpoint and report verification before and after."""
    cfg = build_config(config_path, overrides, attack_names, {"mode": "ownership"})
    section = next((a for a in cfg.attacks if a.method == method), None)
    acfg = section.build(cfg.seeds[0]) if section else parse_config(
        {**cfg.model_dump(mode="json"), "attacks": [{"method": method}]}).attacks[0].build(cfg.seeds[0])
    model = load_checkpoint(checkpoint)
    data = load_domains(cfg)
    patch = cfg.patch.build()
    attacked = run_attack(model, data.source_train, acfg, unlabeled=data.target_train)
    result = {"method": method, "before": verify_ownership(model, data.source_test, patch, cfg.threshold).to_dict(),
              "after": verify_ownership(attacked, data.source_test, patch, cfg.threshold).to_dict()}
    if method == "overwrite":
        result["trigger_acc"] = trigger_accuracy(attacked, data.source_test, acfg)
    if out_path:
        save_checkpoint(attacked, out_path, {"attack": acfg.to_dict()})
        result["checkpoint"] = out_path
    _emit(result)


@cli.command("probe-mi")
@config_options
@_checkpoint_option
def probe_mi(config_path, attack_names, checkpoint, **overrides):
    """Estimate I(z; n) between source test data and its patched copy (or the target, without a patch)."""
    cfg = build_config(config_path, overrides, attack_names, {"mode": "target-specified"})
    model = load_checkpoint(checkpoint)
    data = load_domains(cfg)
    other = apply_patch(data.source_test, cfg.patch.build()) if cfg.patch else data.target_test
    pcfg = ProbeConfig(cfg.probe.hidden, cfg.probe.epochs)
    _emit(probe_model(model, data.source_test, other, cfg.seeds[0], cfg.probe.n, pcfg))


@cli.command()
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True, file_okay=False))
@click.option("--tsv", is_flag=True, help="tab-separated output")
def report(run_dirs, tsv):
    """Render tables from completed run directories."""
    out = render_report(run_dirs)
    click.echo(out["tsv" if tsv else "text"], nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ntl", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except NTLError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
