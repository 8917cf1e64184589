"""Patch-triggered ownership verification and patch-gated applicability authorization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ntl.augmentation import AugConfig, generate_auxiliary
from ntl.domains import DomainDataset, PatchSpec, apply_patch, concat
from ntl.errors import DegenerateAuxiliary, IncompatibleDomains, ValidationError
from ntl.models import ModelBundle, accuracy
from ntl.objective import NtlConfig, train_target_specified

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class VerificationReport:
    acc_without_patch: float
    acc_with_patch: float
    gap: float
    verified: bool
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AuthorizationReport:
    authorized_acc: float
    # "<domain>/<patched|clean>" -> accuracy, authorized cell excluded
    unauthorized_accs: dict = field(default_factory=dict)
    authorized_cell: str = ""

    @property
    def max_unauthorized(self) -> float:
        return max(self.unauthorized_accs.values(), default=0.0)

    def to_dict(self) -> dict:
        return {"authorized_cell": self.authorized_cell, "authorized_acc": self.authorized_acc,
                "unauthorized_accs": dict(self.unauthorized_accs), "max_unauthorized": self.max_unauthorized}


def _require_nontrivial(patch: PatchSpec) -> None:
    if patch.v == 0:
        raise DegenerateAuxiliary("a v = 0 patch leaves the data unchanged")


def train_ownership(source: DomainDataset, patch: PatchSpec, model: ModelBundle, cfg: NtlConfig,
                    eval_source: Optional[DomainDataset] = None, history_path=None, epoch_hook=None):
    """Target-specified NTL with the patched source as the auxiliary domain; returns ``(model, history)``."""
    _require_nontrivial(patch)
    aux = apply_patch(source, patch)
    eval_aux = apply_patch(eval_source, patch) if eval_source is not None else None
    return train_target_specified(source, aux, model, cfg, eval_source, eval_aux, history_path, epoch_hook)


def verify_ownership(model: ModelBundle, source_test: DomainDataset, patch: PatchSpec,
                     threshold: float = DEFAULT_THRESHOLD) -> VerificationReport:
    clean = accuracy(model, source_test)
    patched = accuracy(model, apply_patch(source_test, patch))
    gap = clean - patched
    return VerificationReport(clean, patched, gap, bool(gap >= threshold), threshold)


def authorization_aux(source: DomainDataset, generated: DomainDataset, patch: PatchSpec) -> DomainDataset:
    """Union of clean source, generated neighbors and patched neighbors; one group per part."""
    parts = [source.with_tag(1), generated.with_tag(1), apply_patch(generated, patch).with_tag(1)]
    return concat(parts, f"{source.name}/unauthorized", domain_tag=1, group_by_part=True)


def train_authorized(source: DomainDataset, patch: PatchSpec, aug_cfg: AugConfig, cfg: NtlConfig,
                     model: ModelBundle, generated: Optional[DomainDataset] = None,
                     eval_source: Optional[DomainDataset] = None, history_path=None):
    """Source-only NTL where only patched source data counts as the source domain.

    ``generated`` may be passed to reuse a previously synthesized auxiliary set.
    Returns ``(model, history, generated)``.
    """
    _require_nontrivial(patch)
    if generated is None:
        generated = generate_auxiliary(source, aug_cfg)
    authorized = apply_patch(source, patch)
    aux = authorization_aux(source, generated, patch)
    eval_src = apply_patch(eval_source, patch) if eval_source is not None else None
    eval_aux = eval_source.with_tag(1) if eval_source is not None else None
    trained, history = train_target_specified(authorized, aux, model, cfg, eval_src, eval_aux, history_path)
    return trained, history, generated


def evaluate_authorization(model: ModelBundle, domains: list, patch: PatchSpec,
                           names: Optional[list] = None) -> AuthorizationReport:
    """Accuracy on every (domain, patch state); the first domain patched is the authorized cell."""
    if not domains:
        raise ValidationError("need at least one domain")
    if len({d.num_classes for d in domains}) != 1:
        raise IncompatibleDomains("domains must share the label set")
    names = names or [d.name for d in domains]
    if len(set(names)) != len(names):
        names = [f"{i}:{n}" for i, n in enumerate(names)]
    authorized_cell = f"{names[0]}/patched"
    authorized, others = 0.0, {}
    for name, ds in zip(names, domains):
        for state, data in (("patched", apply_patch(ds, patch)), ("clean", ds)):
            acc = accuracy(model, data)
            key = f"{name}/{state}"
            if key == authorized_cell:
                authorized = acc
            else:
                others[key] = acc
    return AuthorizationReport(authorized, others, authorized_cell)


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
