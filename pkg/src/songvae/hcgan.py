"""WGAN-GP fine-tuning of the hierarchical decoder.

The generator is a copy of the trained HCVAE decode path (global decoder,
class means, local decoder). The critic starts from a copy of the local
encoder, applies it to each of the 17 phrases and runs a small 1-D conv
stack over the resulting latent sequence down to one unbounded score.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import autograd, nn

from .checkpoint import (
    file_digest,
    load_checkpoint,
    optimizer_tensors,
    resolve_parent,
    restore_optimizer,
    save_checkpoint,
)
from .corpus import N_PITCHES, PHRASE_STEPS, SONG_PHRASES
from .errors import MissingPretrainError, ShapeError
from .hcvae import HCVAE, load_hcvae
from .lcvae import SequenceEncoder
from .training import TSVLog, check_finite, epoch_generator, init_seed

KIND = "hcgan"


@dataclass
class GANConfig:
    gp_weight: float = 1.0
    critic_steps: int = 5
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 32
    steps: int = 1000
    critic_channels: int = 64
    train_local_decoder: bool = False
    train_shared_encoder: bool = True
    local_eps_var: float = 0.01
    seed: int = 0


class Critic(nn.Module):
    def __init__(self, encoder: SequenceEncoder, channels: int = 64):
        super().__init__()
        self.encoder = encoder
        latent = encoder.mu.out_features
        self.conv = nn.Sequential(
            nn.Conv1d(latent, channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(channels, channels, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        length = (SONG_PHRASES - 1) // 2 + 1
        self.head = nn.Linear(channels * length, 1)

    @classmethod
    def from_hcvae(cls, hcvae: HCVAE, channels: int = 64, trainable_encoder: bool = True) -> "Critic":
        encoder = copy.deepcopy(hcvae.lcvae.encoder)
        for p in encoder.parameters():
            p.requires_grad_(trainable_encoder)
        return cls(encoder, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] == (SONG_PHRASES * PHRASE_STEPS, N_PITCHES):
            x = x.reshape(*x.shape[:-2], SONG_PHRASES, PHRASE_STEPS, N_PITCHES)
        if x.shape[-3:] != (SONG_PHRASES, PHRASE_STEPS, N_PITCHES):
            raise ShapeError(f"critic input must be songs of (850, 128), got {tuple(x.shape)}")
        b = x.shape[0]
        feats = self.encoder(x.reshape(b * SONG_PHRASES, PHRASE_STEPS, N_PITCHES)).mu
        feats = feats.reshape(b, SONG_PHRASES, -1).transpose(1, 2)
        return self.head(self.conv(feats).flatten(1)).squeeze(-1)


def make_generator(hcvae: HCVAE, train_local_decoder: bool = False) -> HCVAE:
    gen = copy.deepcopy(hcvae)
    for p in gen.parameters():
        p.requires_grad_(False)
    for p in gen.gvae.decoder.parameters():
        p.requires_grad_(True)
    if train_local_decoder:
        for p in gen.lcvae.decoder.parameters():
            p.requires_grad_(True)
    return gen


def generator_forward(gen: HCVAE, z, labels, local_eps_var: float, generator=None, eps=None) -> torch.Tensor:
    """Song probabilities (B, 17, 50, 128); same path as HCVAE generation minus binarization."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1, SONG_PHRASES)
    return torch.sigmoid(gen.local_decode_logits(gen.gvae_decode(z), labels, local_eps_var, generator, eps))


def interpolate(real, fake, alpha):
    alpha = alpha.reshape(-1, *([1] * (real.dim() - 1)))
    return alpha * real + (1 - alpha) * fake


def gradient_penalty(critic, real, fake, generator=None, alpha=None):
    """Mean over the batch of (||grad critic(x_hat)||_2 - 1)^2 at random interpolates."""
    if real.shape != fake.shape:
        raise ShapeError("real and fake batches differ in shape")
    if alpha is None:
        alpha = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    # the input gradient is needed even when the caller runs under no_grad
    with torch.enable_grad():
        x_hat = interpolate(real, fake, alpha)
        if not x_hat.requires_grad:
            x_hat.requires_grad_(True)
        out = critic(x_hat)
        grads = None
        if out.requires_grad:
            (grads,) = autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(x_hat)
    norms = grads.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic, real, fake, gp_weight: float, generator=None, alpha=None):
    """Returns ``(loss, wasserstein_estimate, penalty)``; the critic minimizes ``loss``."""
    w = critic(real).mean() - critic(fake).mean()
    gp = gradient_penalty(critic, real, fake, generator, alpha)
    return -w + gp_weight * gp, w, gp


def generator_loss(critic, fake):
    return -critic(fake).mean()


def _trainable(module: nn.Module):
    return [p for p in module.parameters() if p.requires_grad]


def make_optimizers(gen: HCVAE, critic: Critic, cfg: GANConfig):
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(_trainable(gen), lr=cfg.lr, betas=betas)
    opt_c = torch.optim.Adam(_trainable(critic), lr=cfg.lr, betas=betas)
    return opt_g, opt_c


def train_hcgan(
    hcvae: HCVAE | None,
    songs: np.ndarray,
    labels: np.ndarray,
    cfg: GANConfig,
    log: TSVLog | None = None,
    gen: HCVAE | None = None,
    critic: Critic | None = None,
    optimizers=None,
    start_step: int = 0,
    on_step=None,
):
    """Task 3. Logs ``step, w_estimate, gp, critic_loss, gen_loss`` each generator step."""
    if hcvae is None and gen is None:
        raise MissingPretrainError("HCGAN training needs a trained HCVAE to warm-start from")
    init_seed(cfg.seed)
    if gen is None:
        gen = make_generator(hcvae, cfg.train_local_decoder)
    if critic is None:
        critic = Critic.from_hcvae(hcvae, cfg.critic_channels, cfg.train_shared_encoder)
    opt_g, opt_c = optimizers or make_optimizers(gen, critic, cfg)
    log = log or TSVLog()
    songs_t = torch.from_numpy(np.asarray(songs, dtype=np.uint8))
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n = len(songs_t)
    latent = gen.gvae.latent_dim
    critic_params = _trainable(critic)

    for step in range(start_step + 1, cfg.steps + 1):
        g = epoch_generator(cfg.seed, step, stream=4)
        for p in critic_params:
            p.requires_grad_(True)
        for _ in range(cfg.critic_steps):
            idx = torch.randint(n, (cfg.batch_size,), generator=g)
            real = songs_t[idx].float()
            z = torch.randn(len(idx), latent, generator=g)
            with torch.no_grad():
                fake = generator_forward(gen, z, labels_t[idx], cfg.local_eps_var, g)
            loss_c, w, gp = critic_loss(critic, real, fake, cfg.gp_weight, g)
            check_finite(loss_c.item(), "critic loss")
            opt_c.zero_grad()
            loss_c.backward()
            opt_c.step()

        for p in critic_params:
            p.requires_grad_(False)
        idx = torch.randint(n, (cfg.batch_size,), generator=g)
        z = torch.randn(len(idx), latent, generator=g)
        fake = generator_forward(gen, z, labels_t[idx], cfg.local_eps_var, g)
        loss_g = generator_loss(critic, fake)
        check_finite(loss_g.item(), "generator loss")
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()
        for p in critic_params:
            p.requires_grad_(True)

        log.write(step, w.item(), gp.item(), loss_c.item(), loss_g.item())
        if on_step is not None:
            on_step(step, gen, critic, (opt_g, opt_c))
    gen.eval()
    critic.eval()
    return gen, critic


# --------------------------------------------------------------------------
# persistence


def save_hcgan(path, gen: HCVAE, critic: Critic, cfg: GANConfig, hcvae_path, optimizers=None, step: int = 0) -> str:
    tensors = {f"generator.gvae.{k}": v for k, v in gen.gvae.state_dict().items()}
    tensors.update({f"generator.lcvae.{k}": v for k, v in gen.lcvae.state_dict().items()})
    tensors.update({f"critic.{k}": v for k, v in critic.state_dict().items()})
    meta = {"step": step, "hcvae_file": Path(hcvae_path).name, "hcvae_digest": file_digest(hcvae_path)}
    if optimizers is not None:
        for name, opt in zip(("optim_g.", "optim_c."), optimizers):
            t, m = optimizer_tensors(opt, name)
            tensors.update(t)
            meta.update(m)
    return save_checkpoint(path, KIND, tensors, asdict(cfg), meta)


def load_hcgan(path, hcvae_path=None, lcvae_path=None, with_optimizer: bool = False):
    """Returns ``(generator, critic, gan_cfg, gvae_cfg, dictionary, checkpoint[, optimizers])``."""
    ckpt = load_checkpoint(path, KIND)
    parent = resolve_parent(ckpt, "hcvae", hcvae_path)
    hcvae, gcfg, dictionary, _ = load_hcvae(parent, lcvae_path)
    cfg = GANConfig(**ckpt.config)
    critic = Critic.from_hcvae(hcvae, cfg.critic_channels, cfg.train_shared_encoder)
    gen = make_generator(hcvae, cfg.train_local_decoder)
    gen.gvae.load_state_dict(ckpt.torch_state("generator.gvae."))
    gen.lcvae.load_state_dict(ckpt.torch_state("generator.lcvae."))
    critic.load_state_dict(ckpt.torch_state("critic."))
    gen.eval()
    critic.eval()
    out = (gen, critic, cfg, gcfg, dictionary, ckpt)
    if not with_optimizer:
        return out
    opts = make_optimizers(gen, critic, cfg)
    restore_optimizer(opts[0], ckpt, "optim_g.")
    restore_optimizer(opts[1], ckpt, "optim_c.")
    return out + (opts,)
