"""Generative adversarial augmentation of the source domain for source-only NTL.

A label-conditional generator is trained against a discriminator with a shared
extractor and two heads (real/fake score, class distribution). Copies of the
trained generator are then pushed to bounded MMD distances from the source,
with a growing share of every layer's channels frozen to get distinct
directions. The union of the samples forms the auxiliary domain.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ntl.domains import DomainDataset
from ntl.errors import ValidationError
from ntl.kernels import KernelConfig, mmd_exp
from ntl.objective import kl_class_loss


@dataclass(frozen=True)
class AugConfig:
    dis_list: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    num_directions: int = 4
    gan_epochs: int = 30
    aug_epochs: int = 5
    latent_dim: int = 256
    seed: int = 2021
    kernel: KernelConfig = field(default_factory=KernelConfig)
    batch_size: int = 64
    learning_rate: float = 2e-4
    betas: tuple = (0.5, 0.999)
    mse_weight: float = 1.0
    # per-cell sample count; None matches the source size across all cells
    samples_per_cell: Optional[int] = None

    def __post_init__(self):
        if len(self.dis_list) == 0:
            raise ValidationError("dis_list must not be empty")
        if any(d <= 0 for d in self.dis_list):
            raise ValidationError("every augmentation distance must be > 0")
        if list(self.dis_list) != sorted(self.dis_list):
            raise ValidationError("dis_list must be ascending")
        if self.num_directions < 1:
            raise ValidationError("num_directions must be >= 1")
        if self.gan_epochs < 0 or self.aug_epochs < 0 or self.latent_dim < 1 or self.batch_size < 1:
            raise ValidationError("epochs >= 0, latent_dim >= 1, batch_size >= 1 required")


class _ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Generator(nn.Module):
    """(noise, one-hot label) -> image in [-1, 1]; 4x4 seed map doubled up to the image size."""

    def __init__(self, latent_dim: int, num_classes: int, image_size: int, channels: int = 3, width: int = 128):
        super().__init__()
        ups = int(round(math.log2(image_size / 4)))
        if 4 * 2 ** ups != image_size:
            raise ValidationError("generator needs a power-of-two image size >= 4")
        self.num_classes = num_classes
        self.width = width
        self.fc = nn.Linear(latent_dim + num_classes, width * 16)
        blocks: list[nn.Module] = []
        c = width
        for i in range(ups):
            blocks += [nn.ConvTranspose2d(c, c // 2, 4, 2, 1), nn.ReLU()]
            c //= 2
            if i == 0:
                blocks += [_ResBlock(c), _ResBlock(c)]
        self.body = nn.Sequential(*blocks)
        self.out = nn.Conv2d(c, channels, 3, 1, 1)

    def forward(self, noise, labels):
        onehot = F.one_hot(labels.long(), self.num_classes).to(noise.dtype)
        h = F.relu(self.fc(torch.cat([noise, onehot], 1))).view(-1, self.width, 4, 4)
        return torch.tanh(self.out(self.body(h)))


class Discriminator(nn.Module):
    def __init__(self, num_classes: int, image_size: int, channels: int = 3, dropout: float = 0.25):
        super().__init__()
        layers, c = [], channels
        for out in (32, 64, 128, 256):
            layers += [nn.Conv2d(c, out, 3, 2, 1), nn.LeakyReLU(0.2), nn.Dropout(dropout)]
            c = out
        self.extractor = nn.Sequential(*layers, nn.Flatten())
        side = image_size
        for _ in range(4):
            side = (side - 1) // 2 + 1
        feat = 256 * side * side

        def head(out_dim):
            return nn.Sequential(
                nn.Linear(feat, 128), nn.ReLU(), nn.Dropout(dropout),
                nn.Linear(128, 64), nn.ReLU(), nn.Dropout(dropout),
                nn.Linear(64, out_dim),
            )

        self.head_b = head(1)
        self.head_m = head(num_classes)

    def forward(self, x):
        z = self.extractor(x)
        return z, torch.sigmoid(self.head_b(z)).squeeze(1), torch.softmax(self.head_m(z), 1)


class GanBundle(nn.Module):
    def __init__(self, num_classes: int, image_size: int, latent_dim: int = 256, channels: int = 3):
        super().__init__()
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.generator = Generator(latent_dim, num_classes, image_size, channels)
        self.discriminator = Discriminator(num_classes, image_size, channels)
        # parameter name -> (channel axis, number of leading channels frozen)
        self.frozen: dict[str, tuple[int, int]] = {}

    def generate(self, noise, labels):
        return self.generator(noise, labels)

    def discriminate(self, x):
        return self.discriminator(x)

    def mask_frozen_grads(self) -> None:
        params = dict(self.generator.named_parameters())
        for name, (axis, n) in self.frozen.items():
            g = params[name].grad
            if g is not None and n > 0:
                g.narrow(axis, 0, n).zero_()


def build_gan(num_classes: int, image_size: int, latent_dim: int, seed: int) -> GanBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GanBundle(num_classes, image_size, latent_dim)


def to_signed(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] model input -> [-1, 1] generator range."""
    return x * 2 - 1


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """[-1, 1] (N, C, H, W) -> uint8 (N, H, W, C)."""
    x = ((x.detach().clamp(-1, 1) + 1) / 2 * 255).round()
    return x.permute(0, 2, 3, 1).to(torch.uint8).numpy()


# ---------------------------------------------------------------------------
# losses

def gan_loss_terms(b_real, m_real, labels, b_fake, m_fake_uniform, uniform_labels):
    """``(L_D, L_G, L_GD)`` from discriminator outputs.

    ``b_fake`` scores generated samples with source labels, ``m_fake_uniform``
    classifies generated samples with uniformly drawn labels.
    """
    l_d = (0.5 * ((b_real - 1) ** 2 + b_fake ** 2)).mean() + kl_class_loss(m_real, labels)
    l_g = ((b_fake - 1) ** 2).mean()
    l_gd = kl_class_loss(m_fake_uniform, uniform_labels)
    return l_d, l_g, l_gd


def gan_losses(real_batch, labels, fake_batch, fake_uniform_batch, uniform_labels, bundle: GanBundle):
    _, b_real, m_real = bundle.discriminate(real_batch)
    _, b_fake, _ = bundle.discriminate(fake_batch)
    _, _, m_fake_u = bundle.discriminate(fake_uniform_batch)
    return gan_loss_terms(b_real, m_real, labels, b_fake, m_fake_u, uniform_labels)


def compose_aug_loss(mmd, ce, dis: float):
    if isinstance(mmd, torch.Tensor):
        return -mmd.clamp(max=dis) + ce
    return -min(dis, mmd) + ce


def aug_loss(bundle: GanBundle, real_batch, labels, dis: float, noise=None,
             kernel: KernelConfig = KernelConfig()):
    """Push generated samples up to MMD ``dis`` away in discriminator-feature space while keeping labels."""
    if dis <= 0:
        raise ValidationError("dis must be > 0")
    if noise is None:
        noise = torch.randn(real_batch.shape[0], bundle.latent_dim)
    fake = bundle.generate(noise, labels)
    z_real, _, _ = bundle.discriminate(real_batch)
    z_fake, _, m_fake = bundle.discriminate(fake)
    mmd = mmd_exp(z_real, z_fake, kernel)
    return compose_aug_loss(mmd, kl_class_loss(m_fake, labels), dis)


# ---------------------------------------------------------------------------
# training

def train_gan(source: DomainDataset, cfg: AugConfig, history: Optional[list] = None) -> GanBundle:
    """Alternate generator, discriminator and joint label steps once per mini-batch."""
    image_size = source.geometry[0]
    bundle = build_gan(source.num_classes, image_size, cfg.latent_dim, cfg.seed)
    if cfg.gan_epochs == 0:
        return bundle
    x_all = to_signed(source.to_tensor())
    y_all = source.label_tensor()
    k = source.num_classes
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(source))
    steps = max(1, len(source) // bs)
    g, d = bundle.generator, bundle.discriminator
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        opt_g = torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas))
        opt_d = torch.optim.Adam(d.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas))
        bundle.train()
        for epoch in range(cfg.gan_epochs):
            order = rng.permutation(len(source))
            sums = np.zeros(4)
            for step in range(steps):
                idx = order[step * bs:(step + 1) * bs]
                real, labels = x_all[idx], y_all[idx]

                # generator: fool the binary head, stay close to same-label real samples
                fake = g(torch.randn(bs, cfg.latent_dim), labels)
                _, b_fake, _ = d(fake)
                l_g = ((b_fake - 1) ** 2).mean()
                l_mse = F.mse_loss(fake, real)
                opt_g.zero_grad()
                (l_g + cfg.mse_weight * l_mse).backward()
                opt_g.step()

                # discriminator: real vs fake plus labels of real data
                _, b_real, m_real = d(real)
                _, b_fake, _ = d(fake.detach())
                l_d = (0.5 * ((b_real - 1) ** 2 + b_fake ** 2)).mean() + kl_class_loss(m_real, labels)
                opt_d.zero_grad()
                l_d.backward()
                opt_d.step()

                # joint: generated samples of uniform labels must be classified as those labels
                uniform = torch.from_numpy(rng.integers(0, k, bs))
                _, _, m_u = d(g(torch.randn(bs, cfg.latent_dim), uniform))
                l_gd = kl_class_loss(m_u, uniform)
                opt_g.zero_grad()
                opt_d.zero_grad()
                l_gd.backward()
                opt_g.step()
                opt_d.step()
                sums += [float(t.detach()) for t in (l_d, l_g, l_gd, l_mse)]
            if history is not None:
                history.append(dict(zip(("epoch", "l_d", "l_g", "l_gd", "l_mse"),
                                        [epoch + 1, *(sums / steps).tolist()])))
    bundle.eval()
    return bundle


def _channel_axis(module: nn.Module, pname: str) -> int:
    if isinstance(module, nn.ConvTranspose2d) and pname == "weight":
        return 1
    return 0


def freeze_mask(bundle: GanBundle, dir: int, num_directions: int) -> GanBundle:
    """Copy of ``bundle`` with D frozen and the first ``floor(dir * d(l) / DIR)`` channels of every G layer frozen."""
    if not 0 <= dir < num_directions:
        raise ValidationError(f"dir must be in [0, {num_directions})")
    out = copy.deepcopy(bundle)
    for p in out.discriminator.parameters():
        p.requires_grad_(False)
    out.frozen = {}
    for mname, module in out.generator.named_modules():
        own = list(module.named_parameters(recurse=False))
        if not own:
            continue
        weight_axis = _channel_axis(module, "weight")
        channels = module.weight.shape[weight_axis]
        n = (dir * channels) // num_directions
        for pname, _ in own:
            full = f"{mname}.{pname}" if mname else pname
            out.frozen[full] = (_channel_axis(module, pname), n)
    return out


def cell_seed(cfg: AugConfig, dis: float, dir: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, int(round(dis * 1e6)), dir]).generate_state(1)[0])


def augment_cell(bundle: GanBundle, source: DomainDataset, cfg: AugConfig, dis: float, dir: int,
                 n_samples: int):
    """Optimize one frozen copy toward distance ``dis`` and sample ``n_samples`` uniform-label images."""
    seed = cell_seed(cfg, dis, dir)
    cell = freeze_mask(bundle, dir, cfg.num_directions)
    x_all = to_signed(source.to_tensor())
    y_all = source.label_tensor()
    rng = np.random.default_rng(seed)
    bs = min(cfg.batch_size, len(source))
    steps = max(1, len(source) // bs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        cell.discriminator.eval()
        cell.generator.train()
        opt = torch.optim.Adam(cell.generator.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas))
        for _ in range(cfg.aug_epochs):
            order = rng.permutation(len(source))
            for step in range(steps):
                idx = order[step * bs:(step + 1) * bs]
                loss = aug_loss(cell, x_all[idx], y_all[idx], dis, kernel=cfg.kernel)
                opt.zero_grad()
                loss.backward()
                cell.mask_frozen_grads()
                opt.step()
        cell.eval()
        labels = torch.from_numpy(rng.integers(0, source.num_classes, n_samples))
        with torch.no_grad():
            images = cell.generate(torch.randn(n_samples, cfg.latent_dim), labels)
    return cell, to_uint8(images), labels.numpy()


def augment_cells(bundle: GanBundle, source: DomainDataset, cfg: AugConfig) -> list[dict]:
    n_cells = len(cfg.dis_list) * cfg.num_directions
    per_cell = cfg.samples_per_cell or math.ceil(len(source) / n_cells)
    cells = []
    for dis in cfg.dis_list:
        for dir in range(cfg.num_directions):
            _, images, labels = augment_cell(bundle, source, cfg, dis, dir, per_cell)
            cells.append({"dis": float(dis), "dir": dir, "images": images, "labels": labels})
    return cells


def cells_to_dataset(cells: list[dict], num_classes: int, name: str = "augmented") -> DomainDataset:
    images = np.concatenate([c["images"] for c in cells])
    labels = np.concatenate([c["labels"] for c in cells])
    groups = np.concatenate([np.full(len(c["labels"]), i) for i, c in enumerate(cells)])
    meta = {"cells": [{"index": i, "dis": c["dis"], "dir": c["dir"], "count": int(len(c["labels"]))}
                      for i, c in enumerate(cells)]}
    return DomainDataset(images, labels, num_classes, 1, name, groups, meta)


def generate_auxiliary(source: DomainDataset, cfg: AugConfig, return_gan: bool = False):
    """Train the GAN on ``source`` and return the union of all (dis, dir) cells, tagged n = 1."""
    bundle = train_gan(source, cfg)
    aux = cells_to_dataset(augment_cells(bundle, source, cfg), source.num_classes, f"{source.name}/augmented")
    return (aux, bundle) if return_gan else aux


@torch.no_grad()
def feature_mmd(bundle: GanBundle, real: DomainDataset, generated: DomainDataset, n: int = 256,
                seed: int = 0, kernel: KernelConfig = KernelConfig()) -> float:
    """MMD between discriminator features of ``n`` real and ``n`` generated samples."""
    rng = np.random.default_rng(seed)
    ia = rng.permutation(len(real))[:n]
    ib = rng.permutation(len(generated))[:n]
    bundle.eval()
    za, _, _ = bundle.discriminate(to_signed(real.to_tensor(ia)))
    zb, _, _ = bundle.discriminate(to_signed(generated.to_tensor(ib)))
    return float(mmd_exp(za.double(), zb.double(), kernel))
