"""Watermark-removal attacks: four fine-tuning variants, backdoor overwriting, magnitude pruning."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from ntl.domains import DomainDataset
from ntl.errors import UnknownAttack, ValidationError
from ntl.models import ModelBundle, clone, predict_probs, reinit_classifier
from ntl.objective import kl_class_loss

METHODS = ("ftal", "rtal", "ewc", "au", "overwrite", "prune")
FINETUNE_METHODS = ("ftal", "rtal", "ewc", "au")


@dataclass(frozen=True)
class AttackConfig:
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
    seed: int = 2021

    def __post_init__(self):
        if self.method not in METHODS:
            raise UnknownAttack(self.method)
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValidationError("data_fraction must be in (0, 1]")
        if not 0.0 < self.prune_ratio < 1.0:
            raise ValidationError("prune_ratio must be in (0, 1)")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ValidationError("poison_fraction must be in [0, 1]")
        if self.aux_unlabeled_ratio <= 0:
            raise ValidationError("aux_unlabeled_ratio must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("epochs >= 0, batch_size >= 1, learning_rate > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


def attacker_data(data: DomainDataset, cfg: AttackConfig) -> DomainDataset:
    return data.stratified_fraction(cfg.data_fraction, cfg.seed, f"{data.name}[attacker]")


def _finetune(model: ModelBundle, data: DomainDataset, cfg: AttackConfig,
              lr_scale: Optional[dict] = None) -> ModelBundle:
    """Adam fine-tuning of every parameter; ``lr_scale`` rescales each parameter's step."""
    if cfg.epochs == 0 or len(data) == 0:
        return model
    dtype = next(model.parameters()).dtype
    x_all, y_all = data.to_tensor().to(dtype), data.label_tensor()
    rng = np.random.default_rng(cfg.seed + 1)
    bs = min(cfg.batch_size, len(data))
    steps = max(1, len(data) // bs)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        opt = torch.optim.Adam([p for _, p in named], lr=cfg.learning_rate)
        model.train()
        for _ in range(cfg.epochs):
            order = rng.permutation(len(data))
            for step in range(steps):
                idx = order[step * bs:(step + 1) * bs]
                _, probs = model(x_all[idx])
                loss = kl_class_loss(probs, y_all[idx])
                opt.zero_grad()
                loss.backward()
                if lr_scale is None:
                    opt.step()
                else:
                    before = [p.detach().clone() for _, p in named]
                    opt.step()
                    with torch.no_grad():
                        for (n, p), old in zip(named, before):
                            p.copy_(old + (p - old) * lr_scale[n])
                model.train_step_count += 1
    model.eval()
    return model


def fisher_diagonal(model: ModelBundle, data: DomainDataset) -> dict:
    """Empirical diagonal Fisher: mean per-sample squared gradient of the KL class loss."""
    dtype = next(model.parameters()).dtype
    x_all, y_all = data.to_tensor().to(dtype), data.label_tensor()
    fisher = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    was_training = model.training
    model.eval()
    for i in range(len(data)):
        model.zero_grad()
        _, probs = model(x_all[i:i + 1])
        kl_class_loss(probs, y_all[i:i + 1]).backward()
        for n, p in model.named_parameters():
            if p.grad is not None:
                fisher[n] += p.grad.detach() ** 2
    model.zero_grad()
    model.train(was_training)
    return {n: f / max(1, len(data)) for n, f in fisher.items()}


def finetune_attack(model: ModelBundle, data: DomainDataset, cfg: AttackConfig,
                    unlabeled: Optional[DomainDataset] = None) -> ModelBundle:
    """FTAL, RTAL, EWC or AU fine-tuning on the attacker's share of ``data``.

    AU additionally needs ``unlabeled`` samples from another domain; they are
    pseudo-labeled by the attacked model itself.
    """
    if cfg.method not in FINETUNE_METHODS:
        raise UnknownAttack(f"{cfg.method} is not a fine-tuning attack")
    model = clone(model)
    if cfg.epochs == 0:
        return model
    att = attacker_data(data, cfg)
    if cfg.method == "ftal":
        return _finetune(model, att, cfg)
    if cfg.method == "rtal":
        reinit_classifier(model, cfg.seed)
        return _finetune(model, att, cfg)
    if cfg.method == "ewc":
        fisher = fisher_diagonal(model, att)
        scale = {n: 1.0 / (1.0 + cfg.ewc_lambda * f) for n, f in fisher.items()}
        return _finetune(model, att, cfg, lr_scale=scale)
    if unlabeled is None or len(unlabeled) == 0:
        raise ValidationError("AU needs unlabeled samples from another domain")
    n_extra = min(len(unlabeled), int(round(cfg.aux_unlabeled_ratio * len(att))))
    pick = np.random.default_rng(cfg.seed + 2).permutation(len(unlabeled))[:n_extra]
    extra = unlabeled.subset(pick)
    dtype = next(model.parameters()).dtype
    pseudo = predict_probs(model, extra.to_tensor().to(dtype)).argmax(1).numpy()
    union = DomainDataset(
        np.concatenate([att.as_uint8(), extra.as_uint8()]),
        np.concatenate([att.labels, pseudo]),
        att.num_classes, 0, f"{att.name}+pseudo",
    )
    return _finetune(model, union, cfg)


def stamp_trigger(data: DomainDataset, size: int = 3) -> DomainDataset:
    """White ``size x size`` square in the bottom-right corner."""
    images = data.as_uint8().copy()
    images[:, -size:, -size:, :] = 255
    return DomainDataset(images, data.labels, data.num_classes, data.domain_tag,
                         f"{data.name}+corner", data.groups, dict(data.meta))


def overwrite_attack(model: ModelBundle, data: DomainDataset, cfg: AttackConfig) -> ModelBundle:
    """Embed a new corner-trigger backdoor by fine-tuning on partially poisoned attacker data."""
    model = clone(model)
    att = attacker_data(data, cfg)
    n_poison = int(round(cfg.poison_fraction * len(att)))
    if n_poison > 0:
        idx = np.random.default_rng(cfg.seed + 3).permutation(len(att))[:n_poison]
        images = att.as_uint8().copy()
        labels = att.labels.copy()
        images[idx] = stamp_trigger(att.subset(idx), cfg.trigger_size).images
        labels[idx] = cfg.target_label
        att = DomainDataset(images, labels, att.num_classes, 0, f"{att.name}+poison")
    return _finetune(model, att, cfg)


def trigger_accuracy(model: ModelBundle, test: DomainDataset, cfg: AttackConfig) -> float:
    """Share of non-target test samples sent to the target label once stamped."""
    keep = np.flatnonzero(test.labels != cfg.target_label)
    stamped = stamp_trigger(test.subset(keep), cfg.trigger_size)
    dtype = next(model.parameters()).dtype
    pred = predict_probs(model, stamped.to_tensor().to(dtype)).argmax(1)
    return float((pred == cfg.target_label).double().mean())


def _prunable(model: nn.Module):
    for name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            yield name, mod


def prune_attack(model: ModelBundle, cfg: AttackConfig) -> ModelBundle:
    """Zero the ``floor(ratio * count)`` smallest-magnitude weights of every layer; biases untouched."""
    model = clone(model)
    with torch.no_grad():
        for _, mod in _prunable(model):
            w = mod.weight.view(-1)
            k = int(np.floor(cfg.prune_ratio * w.numel()))
            if k == 0:
                continue
            idx = torch.argsort(w.abs(), stable=True)[:k]
            w[idx] = 0.0
    return model


def run_attack(model: ModelBundle, data: DomainDataset, cfg: AttackConfig,
               unlabeled: Optional[DomainDataset] = None) -> ModelBundle:
    if cfg.method in FINETUNE_METHODS:
        return finetune_attack(model, data, cfg, unlabeled)
    if cfg.method == "overwrite":
        return overwrite_attack(model, data, cfg)
    return prune_attack(model, cfg)
