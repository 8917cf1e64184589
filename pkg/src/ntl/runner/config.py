"""Experiment configuration: one YAML file per experiment, validated with pydantic."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from ntl.attacks import METHODS, AttackConfig
from ntl.augmentation import AugConfig
from ntl.domains import PatchSpec, SyntheticShiftSpec
from ntl.errors import ValidationError
from ntl.kernels import KernelConfig
from ntl.models import ArchitectureSpec, tiny_spec, vgg_spec
from ntl.objective import NtlConfig

MODES = ("supervised", "target-specified", "source-only", "ownership", "authorization")
ENV_OUTPUT_DIR = "NTL_OUTPUT_DIR"
ENV_THREADS = "NTL_THREADS"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    source: str = "synthetic"
    # target for target-specified runs and the extra evaluation domain otherwise
    target: str = "synthetic-shifted"
    root: Optional[str] = None
    seed: int = 2021
    image_size: int = 16
    n_samples: int = 2500
    n_test: int = 500
    shift_tint: list[float] = Field(default_factory=lambda: [10.0, 90.0, 130.0])
    shift_texture: float = 20.0
    shift_permutation: list[int] = Field(default_factory=lambda: [0, 1, 2])

    def shift(self) -> SyntheticShiftSpec:
        return SyntheticShiftSpec(tuple(self.shift_tint), self.shift_texture,
                                  tuple(self.shift_permutation), self.image_size)


class ModelSection(_Section):
    arch: Literal["tiny", "vgg11", "vgg13", "vgg19"] = "tiny"
    widths: list[int] = Field(default_factory=lambda: [32, 64, 64, 128])
    hidden: int = 256
    num_classes: int = 10

    def spec(self, image_size: int) -> ArchitectureSpec:
        if self.arch == "tiny":
            return tiny_spec(self.num_classes, image_size, tuple(self.widths), self.hidden)
        return vgg_spec(self.arch, self.num_classes, image_size)


class KernelSection(_Section):
    mul: float = 2.0
    num: int = 5

    def build(self) -> KernelConfig:
        return KernelConfig(self.mul, self.num)


class NtlSection(_Section):
    objective: Literal["ntl", "ntl_star"] = "ntl"
    alpha: float = 0.1
    beta: float = 1.0
    alpha_prime: float = 0.1
    beta_prime: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 0.0
    kernel: KernelSection = Field(default_factory=KernelSection)

    def build(self, seed: int) -> NtlConfig:
        return NtlConfig(self.alpha, self.beta, self.alpha_prime, self.beta_prime, self.learning_rate,
                         self.batch_size, self.epochs, seed, self.kernel.build(), self.objective,
                         self.weight_decay)


class AugSection(_Section):
    dis_list: list[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    num_directions: int = 4
    gan_epochs: int = 30
    aug_epochs: int = 5
    latent_dim: int = 256
    batch_size: int = 64
    learning_rate: float = 2e-4
    mse_weight: float = 1.0
    samples_per_cell: Optional[int] = None

    def build(self, seed: int, kernel: KernelConfig) -> AugConfig:
        return AugConfig(tuple(self.dis_list), self.num_directions, self.gan_epochs, self.aug_epochs,
                         self.latent_dim, seed, kernel, self.batch_size, self.learning_rate, (0.5, 0.999),
                         self.mse_weight, self.samples_per_cell)


class PatchSection(_Section):
    v: int = 20
    channel: int = 0

    def build(self) -> PatchSpec:
        return PatchSpec(self.v, self.channel)


class AttackSection(_Section):
    method: str
    data_fraction: float = 0.30
    epochs: int = 50
    learning_rate: float = 1e-4
    batch_size: int = 32
    prune_ratio: float = 0.70
    poison_fraction: float = 1 / 15
    trigger_size: int = 3
    target_label: int = 0
    aux_unlabeled_ratio: float = 1.0
    ewc_lambda: float = 1.0

    def build(self, seed: int) -> AttackConfig:
        return AttackConfig(seed=seed, **self.model_dump())


class ProbeSection(_Section):
    enabled: bool = False
    n: int = 500
    hidden: int = 64
    epochs: int = 300


class ExperimentConfig(_Section):
    mode: Literal["supervised", "target-specified", "source-only", "ownership", "authorization"]
    name: str = "experiment"
    seeds: list[int] = Field(default_factory=lambda: [2021, 2022, 2023])
    output_dir: str = "runs"
    threshold: float = 0.5
    baseline: bool = True
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    ntl: NtlSection = Field(default_factory=NtlSection)
    aug: Optional[AugSection] = None
    patch: Optional[PatchSection] = None
    attacks: list[AttackSection] = Field(default_factory=list)
    probe: ProbeSection = Field(default_factory=ProbeSection)

    @model_validator(mode="after")
    def _mode_requirements(self):
        missing = []
        if self.mode in ("ownership", "authorization") and self.patch is None:
            missing.append("patch")
        if self.mode in ("source-only", "authorization") and self.aug is None:
            missing.append("aug")
        if missing:
            raise ValueError(f"mode {self.mode!r} requires: {', '.join(missing)}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.attacks and self.mode != "ownership":
            raise ValueError("attacks are only run in ownership mode")
        # build every sub-config once so domain-level checks surface at load time
        self.ntl.build(self.seeds[0])
        self.dataset.shift().validate()
        self.model.spec(self.dataset.image_size).validate()
        if self.aug is not None:
            self.aug.build(self.seeds[0], self.ntl.kernel.build())
        if self.patch is not None:
            self.patch.build()
        for a in self.attacks:
            if a.method not in METHODS:
                raise ValueError(f"unknown attack {a.method!r}")
            a.build(self.seeds[0])
        return self

    # -- serialization -----------------------------------------------------

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True, default_flow_style=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        data = yaml.safe_load(text)
        if not isinstance(data, dict):
            raise ValidationError("config must be a mapping")
        return parse_config(data)


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a raw mapping; every violated field is listed in one error."""
    try:
        return ExperimentConfig.model_validate(data)
    except PydanticError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{loc}: {err['msg']}")
        raise ValidationError("invalid config:\n  " + "\n  ".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_yaml(Path(path).read_text())


def set_key(data: dict, dotted: str, value) -> None:
    """Assign ``value`` at a dotted key path, creating sections as needed."""
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def apply_env(data: dict) -> dict:
    """Environment overrides; only the output directory is config-visible."""
    if os.environ.get(ENV_OUTPUT_DIR):
        data["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    return data


def configure_threads() -> None:
    import torch

    threads = os.environ.get(ENV_THREADS)
    if threads:
        try:
            n = int(threads)
        except ValueError:
            raise ValidationError(f"{ENV_THREADS} must be an integer") from None
        if n < 1:
            raise ValidationError(f"{ENV_THREADS} must be >= 1")
        torch.set_num_threads(n)
