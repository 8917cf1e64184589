"""NTL losses and the paired source/auxiliary training loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch

from ntl.domains import DomainDataset
from ntl.errors import IncompatibleDomains, InvalidDistribution, ValidationError
from ntl.kernels import KernelConfig, mmd_exp
from ntl.models import ModelBundle, accuracy, clone

PROB_EPS = 1e-12


@dataclass(frozen=True)
class NtlConfig:
    alpha: float = 0.1
    beta: float = 1.0
    alpha_prime: float = 0.1
    beta_prime: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 2021
    kernel: KernelConfig = field(default_factory=KernelConfig)
    # "ntl" is the MMD-weighted objective, "ntl_star" the plain clipped difference
    objective: str = "ntl"
    # decoupled (AdamW) decay; 0 keeps plain Adam
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or self.alpha_prime <= 0:
            raise ValidationError("alpha and alpha_prime must be > 0")
        if self.beta <= 0 or self.beta_prime <= 0:
            raise ValidationError("beta and beta_prime must be > 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("learning_rate > 0, batch_size >= 1, epochs >= 0 required")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.objective not in ("ntl", "ntl_star"):
            raise ValidationError(f"unknown objective {self.objective!r}")


@dataclass
class LossParts:
    l_s: torch.Tensor
    l_a: torch.Tensor
    l_dis: torch.Tensor
    total: torch.Tensor

    def as_record(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_s", "l_a", "l_dis", "total")}


def kl_class_loss(probs: torch.Tensor, labels: torch.Tensor, tol: float = 1e-4) -> torch.Tensor:
    """Mean ``KL(onehot(y) || p) = -log p[y]``, with ``p`` clamped below at 1e-12."""
    if probs.ndim != 2:
        raise InvalidDistribution("probs must be (batch, K)")
    with torch.no_grad():
        if (probs < 0).any() or ((probs.sum(1) - 1).abs() > tol).any():
            raise InvalidDistribution("rows must be nonnegative and sum to 1")
    picked = probs.gather(1, labels.long()[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_EPS)).mean()


def _clip(x, bound: float):
    if isinstance(x, torch.Tensor):
        return x.clamp(max=bound)
    return min(bound, x)


def ntl_star_loss(l_s, l_a, cfg: NtlConfig):
    return l_s - _clip(cfg.alpha * l_a, cfg.beta)


def compose_ntl(l_s, l_a, mmd, cfg: NtlConfig):
    """``(l_dis, total)`` from the three raw quantities; the clip sits outside the product."""
    l_dis = _clip(cfg.alpha_prime * mmd, cfg.beta_prime)
    return l_dis, l_s - _clip(cfg.alpha * l_a * l_dis, cfg.beta)


def ntl_loss(source_batch, aux_batch, model: ModelBundle, cfg: NtlConfig) -> LossParts:
    """Loss parts on one pair of ``(images, labels)`` batches, sharing a single forward pass."""
    xs, ys = source_batch
    xa, ya = aux_batch
    if xs.shape[0] == 0 or xa.shape[0] == 0:
        raise ValidationError("batches must be nonempty")
    if xs.shape[0] != xa.shape[0]:
        raise ValidationError("source and auxiliary batches must have equal size")
    z, probs = model(torch.cat([xs, xa]))
    n = xs.shape[0]
    l_s = kl_class_loss(probs[:n], ys)
    l_a = kl_class_loss(probs[n:], ya)
    if cfg.objective == "ntl_star":
        zero = torch.zeros((), dtype=l_s.dtype)
        return LossParts(l_s, l_a, zero, ntl_star_loss(l_s, l_a, cfg))
    mmd = mmd_exp(z[:n], z[n:], cfg.kernel)
    l_dis, total = compose_ntl(l_s, l_a, mmd, cfg)
    return LossParts(l_s, l_a, l_dis, total)


# ---------------------------------------------------------------------------
# batching

def _stratified_order(groups: Optional[np.ndarray], n: int, rng: np.random.Generator) -> np.ndarray:
    """A permutation of ``range(n)``; with groups, parts are interleaved so each batch mixes them evenly."""
    if groups is None:
        return rng.permutation(n)
    ids = np.unique(groups)
    members = [rng.permutation(np.flatnonzero(groups == g)) for g in ids]
    # rank each member by its relative position inside its own part, then merge
    keys = np.concatenate([(np.arange(m.size) + rng.uniform(0, 1)) / m.size for m in members])
    flat = np.concatenate(members)
    return flat[np.argsort(keys, kind="stable")]


def _aux_stream(ds: DomainDataset, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    buf = np.empty(0, dtype=np.int64)
    while True:
        while buf.size < batch_size:
            buf = np.concatenate([buf, _stratified_order(ds.groups, len(ds), rng)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def _check_compatible(a: DomainDataset, b: DomainDataset) -> None:
    if a.num_classes != b.num_classes:
        raise IncompatibleDomains(f"K differs: {a.num_classes} vs {b.num_classes}")
    if a.geometry != b.geometry:
        raise IncompatibleDomains(f"geometry differs: {a.geometry} vs {b.geometry}")


def _append_jsonl(path: Optional[Path], record: dict) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


EpochHook = Callable[[ModelBundle, int], dict]


def _fit(model: ModelBundle, source: DomainDataset, aux: Optional[DomainDataset], cfg: NtlConfig,
         eval_sets: dict, history_path, epoch_hook: Optional[EpochHook]):
    model = clone(model)
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history
    dtype = next(model.parameters()).dtype
    xs_all, ys_all = source.to_tensor().to(dtype), source.label_tensor()
    if aux is not None:
        xa_all, ya_all = aux.to_tensor().to(dtype), aux.label_tensor()
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(source))
    steps = max(1, len(source) // bs)
    params = [p for p in model.parameters() if p.requires_grad]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.weight_decay > 0:
            opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        else:
            opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        stream = _aux_stream(aux, bs, rng) if aux is not None else None
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(source))
            sums = {"l_s": 0.0, "l_a": 0.0, "l_dis": 0.0, "total": 0.0}
            for step in range(steps):
                idx = order[step * bs:(step + 1) * bs]
                if stream is None:
                    _, probs = model(xs_all[idx])
                    l_s = kl_class_loss(probs, ys_all[idx])
                    zero = torch.zeros((), dtype=l_s.dtype)
                    parts = LossParts(l_s, zero, zero, l_s)
                else:
                    aidx = next(stream)
                    parts = ntl_loss((xs_all[idx], ys_all[idx]), (xa_all[aidx], ya_all[aidx]), model, cfg)
                opt.zero_grad()
                parts.total.backward()
                opt.step()
                model.train_step_count += 1
                for k, v in parts.as_record().items():
                    sums[k] += v
            record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
            for key, ds in eval_sets.items():
                record[f"{key}_acc"] = accuracy(model, ds)
            if epoch_hook is not None:
                record.update(epoch_hook(model, epoch))
            history.append(record)
            _append_jsonl(history_path, record)
    model.eval()
    return model, history


def train_target_specified(source: DomainDataset, aux: DomainDataset, model: ModelBundle, cfg: NtlConfig,
                           eval_source: Optional[DomainDataset] = None, eval_aux: Optional[DomainDataset] = None,
                           history_path=None, epoch_hook: Optional[EpochHook] = None):
    """Train a copy of ``model`` to fit ``source`` and fail on ``aux``; returns ``(model, history)``.

    Each step pairs an independent source batch with an auxiliary batch of the
    same size. History rows carry the epoch-mean loss parts and the
    accuracies on ``eval_source``/``eval_aux`` (the training sets if omitted).
    """
    _check_compatible(source, aux)
    eval_sets = {"source": eval_source or source, "aux": eval_aux or aux}
    return _fit(model, source, aux, cfg, eval_sets, history_path, epoch_hook)


def train_supervised(source: DomainDataset, model: ModelBundle, cfg: NtlConfig,
                     eval_sets: Optional[dict] = None, history_path=None):
    """Plain KL (cross-entropy) training on the source only: the transferable baseline."""
    return _fit(model, source, None, cfg, eval_sets or {"source": source}, history_path, None)
