"""Hierarchical VAE: a global VAE over the sequence of per-phrase latents.

The local model stays frozen. Songs are encoded phrase by phrase into
posterior means with the class mean removed (no sampling noise before the
global encoder). The global decoder rebuilds that sequence; each element
gets its class mean back, goes through the local reparameterization with
unit variance, and is decoded into a phrase.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import (
    file_digest,
    load_checkpoint,
    optimizer_tensors,
    resolve_parent,
    restore_optimizer,
    save_checkpoint,
)
from .corpus import N_PITCHES, PHRASE_STEPS, SONG_PHRASES, SongTensor
from .errors import RangeError, ShapeError
from .lcvae import (
    LCVAE,
    EncoderOutput,
    LossParts,
    SequenceDecoder,
    SequenceEncoder,
    kl_loss,
    load_lcvae,
    recon_loss,
    sample,
)
from .training import TSVLog, batches, check_finite, epoch_generator, init_seed

KIND = "hcvae"
FLNSEQ_KIND = "flnseq"


@dataclass
class GVAEConfig:
    latent_dim: int = 256
    intermediate_dim: int = 256
    eps_var: float = 0.1
    local_eps_var: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-3
    clip_norm: float = 5.0
    recon_target: str = "song"  # or "latent"
    threshold: float = 0.5
    seed: int = 0


class GVAE(nn.Module):
    def __init__(self, local_dim: int = 32, latent_dim: int = 256, intermediate_dim: int = 256):
        super().__init__()
        self.local_dim = local_dim
        self.latent_dim = latent_dim
        self.encoder = SequenceEncoder(latent_dim, intermediate_dim, n_inputs=local_dim)
        self.decoder = SequenceDecoder(latent_dim, intermediate_dim, local_dim, SONG_PHRASES)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


class HCVAE(nn.Module):
    def __init__(self, lcvae: LCVAE, gvae: GVAE):
        super().__init__()
        self.lcvae = freeze(lcvae)
        self.gvae = gvae

    @classmethod
    def from_config(cls, lcvae: LCVAE, cfg: GVAEConfig) -> "HCVAE":
        return cls(lcvae, GVAE(lcvae.latent_dim, cfg.latent_dim, cfg.intermediate_dim))

    def train(self, mode: bool = True):
        super().train(mode)
        self.lcvae.eval()
        return self

    def encode_song(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """(B, 17, 50, 128) songs to (B, 17, d) class-mean-subtracted means."""
        if x.shape[-3:] != (SONG_PHRASES, PHRASE_STEPS, N_PITCHES):
            raise ShapeError(f"song batch must end in (17, 50, 128), got {tuple(x.shape)}")
        return self.lcvae.encode(x).mu - self.lcvae.class_mean(labels)

    def gvae_encode(self, seq: torch.Tensor) -> EncoderOutput:
        return self.gvae.encoder(seq)

    def gvae_decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.gvae.decoder(z)

    def local_decode_logits(self, seq, labels, eps_var: float, generator=None, eps=None):
        """Add class means, resample with unit variance and decode every phrase."""
        mu = seq + self.lcvae.class_mean(labels)
        z = sample(mu, torch.zeros_like(mu), eps_var, generator, eps)
        return self.lcvae.decode_logits(z)

    def forward(self, x, labels, eps_var: float, local_eps_var: float, generator=None,
                eps_global=None, eps_local=None):
        seq = self.encode_song(x, labels)
        return self.forward_from_latents(seq, labels, eps_var, local_eps_var, generator, eps_global, eps_local)

    def forward_from_latents(self, seq, labels, eps_var, local_eps_var, generator=None,
                             eps_global=None, eps_local=None):
        out = self.gvae_encode(seq)
        z = sample(out.mu, out.log_var, eps_var, generator, eps_global)
        rebuilt = self.gvae_decode(z)
        logits = self.local_decode_logits(rebuilt, labels, local_eps_var, generator, eps_local)
        return logits, out, seq, rebuilt


def hcvae_forward(model: HCVAE, song: np.ndarray, labels, cfg: GVAEConfig, generator=None,
                  eps_global=None, eps_local=None) -> np.ndarray:
    """Single song in, (850, 128) probabilities out."""
    x = torch.from_numpy(np.asarray(song, dtype=np.float32).reshape(1, SONG_PHRASES, PHRASE_STEPS, N_PITCHES))
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(1, SONG_PHRASES)
    with torch.no_grad():
        logits, *_ = model(x, lab, cfg.eps_var, cfg.local_eps_var, generator, eps_global, eps_local)
    return torch.sigmoid(logits).reshape(SONG_PHRASES * PHRASE_STEPS, N_PITCHES).numpy()


def hcvae_loss(model: HCVAE, x, labels, cfg: GVAEConfig, generator=None, seq=None,
               eps_global=None, eps_local=None) -> LossParts:
    if seq is None:
        seq = model.encode_song(x, labels)
    if cfg.recon_target == "song":
        logits, out, seq, rebuilt = model.forward_from_latents(
            seq, labels, cfg.eps_var, cfg.local_eps_var, generator, eps_global, eps_local
        )
        recon = recon_loss(logits, x).mean()
    elif cfg.recon_target == "latent":
        # the local decoder plays no part in this target, so skip it
        out = model.gvae_encode(seq)
        rebuilt = model.gvae_decode(sample(out.mu, out.log_var, cfg.eps_var, generator, eps_global))
        recon = ((rebuilt - seq) ** 2).flatten(1).sum(dim=1).mean()
    else:
        raise ValueError(f"unknown recon_target {cfg.recon_target!r}")
    kl = kl_loss(out.mu, out.log_var, torch.zeros_like(out.mu)).mean()
    return LossParts(recon + kl, recon, kl)


def make_optimizer(model: HCVAE, cfg: GVAEConfig):
    return torch.optim.Adam(model.gvae.parameters(), lr=cfg.lr)


def train_hcvae(
    model: HCVAE,
    songs: np.ndarray,
    labels: np.ndarray,
    cfg: GVAEConfig,
    log: TSVLog | None = None,
    on_epoch=None,
    optimizer=None,
    start_epoch: int = 0,
) -> HCVAE:
    """Task 2: only the global VAE is updated."""
    if len(songs) == 0:
        raise ValueError("no training songs")
    init_seed(cfg.seed)
    optimizer = optimizer or make_optimizer(model, cfg)
    log = log or TSVLog()
    songs_t = torch.from_numpy(np.asarray(songs, dtype=np.uint8))
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    with torch.no_grad():
        latents = torch.cat([
            model.encode_song(songs_t[i:i + 64].float(), labels_t[i:i + 64])
            for i in range(0, len(songs_t), 64)
        ])
    model.train()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        g = epoch_generator(cfg.seed, epoch, stream=2)
        sums = np.zeros(3)
        for idx in batches(len(songs_t), cfg.batch_size, g):
            x = songs_t[idx].float()
            parts = hcvae_loss(model, x, labels_t[idx], cfg, g, seq=latents[idx])
            check_finite(parts.total.item(), "G-VAE loss")
            optimizer.zero_grad()
            parts.total.backward()
            nn.utils.clip_grad_norm_(model.gvae.parameters(), cfg.clip_norm)
            optimizer.step()
            sums += len(idx) * np.array([parts.recon.item(), parts.kl.item(), parts.total.item()])
        recon, kl, total = sums / len(songs_t)
        log.write(epoch, recon, kl, total)
        if on_epoch is not None:
            on_epoch(epoch, model, optimizer)
    model.eval()
    return model


@torch.no_grad()
def decode_songs(model: HCVAE, z: torch.Tensor, labels, local_eps_var: float, generator=None) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1, SONG_PHRASES)
    logits = model.local_decode_logits(model.gvae_decode(z), labels, local_eps_var, generator)
    return torch.sigmoid(logits)


@torch.no_grad()
def generate_songs(model: HCVAE, label_seqs, cfg: GVAEConfig, generator=None, z=None) -> list[SongTensor]:
    """Draw Z from the standard normal prior (unless given) and decode."""
    labels = np.asarray(label_seqs, dtype=np.int64).reshape(-1, SONG_PHRASES)
    n_classes = model.lcvae.n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise RangeError(f"label outside 0..{n_classes - 1}")
    if z is None:
        z = torch.randn(len(labels), model.gvae.latent_dim, generator=generator)
    probs = decode_songs(model, z, labels, cfg.local_eps_var, generator)
    binary = (probs > cfg.threshold).to(torch.uint8).numpy()
    return [SongTensor(b, tuple(lab)) for b, lab in zip(binary, labels)]


def generate_song(model: HCVAE, labels, cfg: GVAEConfig, generator=None) -> SongTensor:
    return generate_songs(model, [labels], cfg, generator)[0]


@torch.no_grad()
def encode_to_prior(model: HCVAE, song: SongTensor) -> torch.Tensor:
    """Global posterior mean of a seed song, usable as ``z`` for generation."""
    x = torch.from_numpy(song.phrases[None].astype(np.float32))
    lab = torch.tensor([song.labels])
    return model.gvae_encode(model.encode_song(x, lab)).mu


# --------------------------------------------------------------------------
# FLN-sequence VAE


@dataclass
class FLNSeqConfig:
    embed_dim: int = 16
    intermediate_dim: int = 64
    latent_dim: int = 32
    eps_var: float = 1.0
    batch_size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0


class FLNSeqVAE(nn.Module):
    """Plain recurrent VAE over length-17 label sequences."""

    def __init__(self, n_classes: int, cfg: FLNSeqConfig):
        super().__init__()
        self.n_classes = n_classes
        self.latent_dim = cfg.latent_dim
        self.embed = nn.Embedding(n_classes, cfg.embed_dim)
        self.encoder = SequenceEncoder(cfg.latent_dim, cfg.intermediate_dim, n_inputs=cfg.embed_dim)
        self.decoder = SequenceDecoder(cfg.latent_dim, cfg.intermediate_dim, n_classes, SONG_PHRASES)

    def forward(self, labels, eps_var: float, generator=None):
        out = self.encoder(self.embed(labels))
        z = sample(out.mu, out.log_var, eps_var, generator)
        return self.decoder(z), out


def train_fln_seq_vae(label_seqs: np.ndarray, n_classes: int, cfg: FLNSeqConfig, log: TSVLog | None = None) -> FLNSeqVAE:
    init_seed(cfg.seed)
    model = FLNSeqVAE(n_classes, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log = log or TSVLog()
    seqs = torch.as_tensor(np.asarray(label_seqs), dtype=torch.long)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        g = epoch_generator(cfg.seed, epoch, stream=3)
        sums = np.zeros(3)
        for idx in batches(len(seqs), cfg.batch_size, g):
            logits, out = model(seqs[idx], cfg.eps_var, g)
            recon = F.cross_entropy(logits.transpose(1, 2), seqs[idx], reduction="none").sum(dim=1).mean()
            kl = kl_loss(out.mu, out.log_var, torch.zeros_like(out.mu)).mean()
            total = recon + kl
            check_finite(total.item(), "FLN-sequence VAE loss")
            opt.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            sums += len(idx) * np.array([recon.item(), kl.item(), total.item()])
        log.write(epoch, *(sums / len(seqs)))
    model.eval()
    return model


@torch.no_grad()
def sample_fln_sequences(model: FLNSeqVAE, n: int, generator=None) -> np.ndarray:
    z = torch.randn(n, model.latent_dim, generator=generator)
    return model.decoder(z).argmax(dim=-1).numpy()


def sample_fln_sequence(model: FLNSeqVAE, generator=None) -> list[int]:
    return sample_fln_sequences(model, 1, generator)[0].tolist()


# --------------------------------------------------------------------------
# persistence


def save_hcvae(path, model: HCVAE, cfg: GVAEConfig, lcvae_path, optimizer=None, epoch: int = 0) -> str:
    tensors = {f"gvae.{k}": v for k, v in model.gvae.state_dict().items()}
    meta = {
        "epoch": epoch,
        "local_dim": model.gvae.local_dim,
        "lcvae_file": Path(lcvae_path).name,
        "lcvae_digest": file_digest(lcvae_path),
    }
    if optimizer is not None:
        opt_t, opt_meta = optimizer_tensors(optimizer)
        tensors.update(opt_t)
        meta.update(opt_meta)
    return save_checkpoint(path, KIND, tensors, asdict(cfg), meta)


def load_hcvae(path, lcvae_path=None, with_optimizer: bool = False):
    """Returns ``(model, cfg, dictionary, checkpoint[, optimizer])``.

    The referenced local checkpoint is looked up next to ``path`` unless
    ``lcvae_path`` is given; its hash must match the recorded one.
    """
    ckpt = load_checkpoint(path, KIND)
    parent = resolve_parent(ckpt, "lcvae", lcvae_path)
    lcvae_model, _, dictionary, _ = load_lcvae(parent)
    cfg = GVAEConfig(**ckpt.config)
    model = HCVAE.from_config(lcvae_model, cfg)
    model.gvae.load_state_dict(ckpt.torch_state("gvae."))
    model.eval()
    if not with_optimizer:
        return model, cfg, dictionary, ckpt
    opt = make_optimizer(model, cfg)
    restore_optimizer(opt, ckpt)
    return model, cfg, dictionary, ckpt, opt


def save_fln_seq(path, model: FLNSeqVAE, cfg: FLNSeqConfig, dictionary_digest: str) -> str:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {"n_classes": model.n_classes, "dictionary_digest": dictionary_digest}
    return save_checkpoint(path, FLNSEQ_KIND, tensors, asdict(cfg), meta)


def load_fln_seq(path) -> tuple[FLNSeqVAE, FLNSeqConfig, dict]:
    ckpt = load_checkpoint(path, FLNSEQ_KIND)
    cfg = FLNSeqConfig(**ckpt.config)
    model = FLNSeqVAE(ckpt.meta["n_classes"], cfg)
    model.load_state_dict(ckpt.torch_state("model."))
    model.eval()
    return model, cfg, ckpt.meta

