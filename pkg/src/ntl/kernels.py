"""Multi-bandwidth Gaussian-kernel MMD (biased V-statistic)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from ntl.errors import DegenerateBandwidth, DimensionMismatch, ValidationError


@dataclass(frozen=True)
class KernelConfig:
    mul: float = 2.0
    num: int = 5
    # bypasses the data-driven ladder when set, e.g. (1.0,) for a single unit-bandwidth kernel
    fixed_bandwidths: Optional[tuple] = None

    def __post_init__(self):
        if self.num < 1:
            raise ValidationError("num must be >= 1")
        if self.mul <= 0:
            raise ValidationError("mul must be > 0")
        if self.fixed_bandwidths is not None:
            if len(self.fixed_bandwidths) == 0 or any(b <= 0 for b in self.fixed_bandwidths):
                raise ValidationError("fixed bandwidths must be positive")


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    if t.ndim == 1:
        t = t[:, None]
    return t


def sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise squared Euclidean distances via explicit differences (exact, no cancellation)."""
    return (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)


def _ordered_mean(t: torch.Tensor) -> torch.Tensor:
    # reducing in sorted order makes the result independent of argument order
    return torch.sort(t.flatten()).values.mean()


def bandwidths(joint, cfg: KernelConfig = KernelConfig()) -> list[float]:
    """Ascending ladder ``base * mul**(i - num//2)``, base = mean off-diagonal squared distance."""
    joint = _as_tensor(joint).detach()
    n = joint.shape[0]
    if n < 2:
        raise DegenerateBandwidth("need at least two vectors to set a bandwidth")
    base = float(torch.sort(sq_dists(joint, joint).flatten()).values.sum()) / (n * n - n)
    if base <= 0.0:
        raise DegenerateBandwidth("all joint vectors are identical")
    return sorted(base * cfg.mul ** (i - cfg.num // 2) for i in range(cfg.num))


def mmd_exp(a, b, cfg: KernelConfig = KernelConfig(),
            bandwidth_list: Optional[Sequence[float]] = None) -> torch.Tensor:
    """``mean k(A,A) - 2 mean k(A,B) + mean k(B,B)`` with ``k`` a sum of Gaussian kernels.

    Bandwidths come from the detached joint batch unless given. Differentiable
    in ``a`` and ``b``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValidationError("MMD needs nonempty batches")
    if a.shape[1:] != b.shape[1:]:
        raise DimensionMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = a.flatten(1), b.flatten(1)
    joint = torch.cat([a, b])
    d2 = sq_dists(joint, joint)
    if bandwidth_list is None:
        bandwidth_list = cfg.fixed_bandwidths
    if bandwidth_list is None:
        n = joint.shape[0]
        base = torch.sort(d2.detach().flatten()).values.sum() / (n * n - n)
        if not base > 0:
            raise DegenerateBandwidth("all joint vectors are identical")
        bws = [base * cfg.mul ** (i - cfg.num // 2) for i in range(cfg.num)]
    else:
        bws = list(bandwidth_list)
    k = sum(torch.exp(-d2 / bw) for bw in bws)
    na = a.shape[0]
    xx = _ordered_mean(k[:na, :na])
    yy = _ordered_mean(k[na:, na:])
    xy = _ordered_mean(k[:na, na:])
    return xx + yy - 2 * xy
