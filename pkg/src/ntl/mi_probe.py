"""Discriminator-based estimate of the mutual information between representations and the domain tag."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ntl.domains import DomainDataset
from ntl.errors import DimensionMismatch, ValidationError
from ntl.models import ModelBundle, extract_features

CLAMP = 1e-6
LOG2 = math.log(2.0)


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    epochs: int = 300
    learning_rate: float = 1e-3
    train_fraction: float = 0.7
    # share of the probe training data held back to pick the best epoch
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.hidden < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValidationError("probe hidden >= 1, epochs >= 0, learning_rate > 0")
        if not 0 < self.train_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValidationError("train_fraction in (0, 1), val_fraction in [0, 1)")


def _mlp(dim: int, hidden: int) -> nn.Module:
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                         nn.Linear(hidden, 1))


class ProbeBundle(nn.Module):
    """theta0 scores "comes from domain 0", theta1 scores "comes from domain 1"."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.theta0 = _mlp(dim, hidden)
        self.theta1 = _mlp(dim, hidden)
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("scale", torch.ones(dim, dtype=torch.float64))
        self.losses: dict = {}

    def _prep(self, z):
        return ((torch.as_tensor(z, dtype=torch.float64) - self.mean) / self.scale).float()

    def p0(self, z) -> torch.Tensor:
        return torch.sigmoid(self.theta0(self._prep(z))).squeeze(1).double().clamp(CLAMP, 1 - CLAMP)

    def p1(self, z) -> torch.Tensor:
        return torch.sigmoid(self.theta1(self._prep(z))).squeeze(1).double().clamp(CLAMP, 1 - CLAMP)


def _check(z0, z1):
    z0 = torch.as_tensor(z0, dtype=torch.float64).flatten(1)
    z1 = torch.as_tensor(z1, dtype=torch.float64).flatten(1)
    if z0.shape[0] == 0 or z1.shape[0] == 0:
        raise ValidationError("probe inputs must be nonempty")
    if z0.shape[1] != z1.shape[1]:
        raise DimensionMismatch(f"{z0.shape[1]} vs {z1.shape[1]}")
    return z0, z1


def train_probes(z0, z1, seed: int, cfg: ProbeConfig = ProbeConfig()) -> ProbeBundle:
    """Fit both discriminators with full-batch Adam; the larger set is subsampled to equal counts."""
    z0, z1 = _check(z0, z1)
    rng = np.random.default_rng(seed)
    n = min(len(z0), len(z1))
    z0 = z0[np.sort(rng.permutation(len(z0))[:n])]
    z1 = z1[np.sort(rng.permutation(len(z1))[:n])]
    joint = torch.cat([z0, z1])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bundle = ProbeBundle(joint.shape[1], cfg.hidden)
        bundle.mean.copy_(joint.mean(0))
        bundle.scale.copy_(joint.std(0).clamp_min(1e-8))
        x = bundle._prep(joint)
        own = torch.cat([torch.ones(n), torch.zeros(n)])
        n_val = int(round(cfg.val_fraction * n)) if n >= 10 else 0
        val = np.zeros(2 * n, dtype=bool)
        if n_val:
            val[rng.permutation(n)[:n_val]] = True
            val[n + rng.permutation(n)[:n_val]] = True
        fit = ~val
        for name, net, target in (("theta0", bundle.theta0, own), ("theta1", bundle.theta1, 1 - own)):
            opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
            best, best_state = math.inf, None
            for _ in range(cfg.epochs):
                # maximizing E_own log T + E_other log(1 - T) is minimizing this BCE
                loss = F.binary_cross_entropy_with_logits(net(x[fit]).squeeze(1), target[fit])
                opt.zero_grad()
                loss.backward()
                opt.step()
                if n_val:
                    with torch.no_grad():
                        v = float(F.binary_cross_entropy_with_logits(net(x[val]).squeeze(1), target[val]))
                    if v < best:
                        best, best_state = v, {k: t.clone() for k, t in net.state_dict().items()}
            if best_state is not None:
                net.load_state_dict(best_state)
            bundle.losses[name] = best if n_val else float(loss.detach())
    bundle.eval()
    return bundle


def estimate_terms(p0_on_z0: torch.Tensor, p1_on_z1: torch.Tensor) -> float:
    """``0.5 mean log 2 p0(z0) + 0.5 mean log 2 p1(z1)`` from already clamped probe outputs."""
    p0 = torch.as_tensor(p0_on_z0, dtype=torch.float64).clamp(CLAMP, 1 - CLAMP)
    p1 = torch.as_tensor(p1_on_z1, dtype=torch.float64).clamp(CLAMP, 1 - CLAMP)
    return float(0.5 * torch.log(2 * p0).mean() + 0.5 * torch.log(2 * p1).mean())


@torch.no_grad()
def estimate_mi(bundle: ProbeBundle, z0, z1) -> float:
    z0, z1 = _check(z0, z1)
    return estimate_terms(bundle.p0(z0), bundle.p1(z1))


def split_and_estimate(z0, z1, seed: int, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Train on a ``train_fraction`` share of each set and estimate on the rest."""
    z0, z1 = _check(z0, z1)
    rng = np.random.default_rng(seed)
    n = min(len(z0), len(z1))
    if n < 4:
        raise ValidationError("need at least 4 samples per domain")
    i0 = rng.permutation(len(z0))[:n]
    i1 = rng.permutation(len(z1))[:n]
    cut = max(1, min(n - 1, int(round(cfg.train_fraction * n))))
    bundle = train_probes(z0[i0[:cut]], z1[i1[:cut]], seed, cfg)
    value = estimate_mi(bundle, z0[i0[cut:]], z1[i1[cut:]])
    return {"mi": value, "mi_clipped": max(0.0, value)}


def probe_model(model: ModelBundle, d0: DomainDataset, d1: DomainDataset, seed: int,
                n: int = 500, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """MI estimate between the model's representations and the tag separating ``d0`` from ``d1``."""
    rng = np.random.default_rng(seed)
    i0 = np.sort(rng.permutation(len(d0))[:n])
    i1 = np.sort(rng.permutation(len(d1))[:n])
    dtype = next(model.parameters()).dtype
    z0 = extract_features(model, d0.to_tensor(i0).to(dtype))
    z1 = extract_features(model, d1.to_tensor(i1).to(dtype))
    return split_and_estimate(z0, z1, seed, cfg)


def shuffled_control(z0, z1, seed: int, rounds: int = 10, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Mean estimate after randomly permuting the domain tags."""
    z0, z1 = _check(z0, z1)
    joint = torch.cat([z0, z1])
    rng = np.random.default_rng(seed)
    values = []
    for r in range(rounds):
        perm = rng.permutation(len(joint))
        values.append(split_and_estimate(joint[perm[:len(z0)]], joint[perm[len(z0):]], seed + r, cfg)["mi"])
    return float(np.mean(values))
