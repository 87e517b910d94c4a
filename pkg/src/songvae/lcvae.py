"""Local conditional VAE over single 50x128 phrases.

The encoder reads a phrase as 50 rows of 128 pitches. A bias-free dense
layer maps the one-hot FLN class to a class mean ``cm``; the KL term pulls
the posterior mean towards it, and the decoder consumes ``z + cm``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, optimizer_tensors, restore_optimizer, save_checkpoint
from .corpus import N_PITCHES, PHRASE_STEPS
from .errors import RangeError, ShapeError
from .fln import FLNClassDictionary
from .training import TSVLog, batches, check_finite, epoch_generator, init_seed, to_float

KIND = "lcvae"


@dataclass
class LCVAEConfig:
    latent_dim: int = 32
    intermediate_dim: int = 256
    eps_var: float = 0.01
    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-3
    clip_norm: float = 5.0
    threshold: float = 0.5
    seed: int = 0


class EncoderOutput(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor


class LossParts(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


class SequenceEncoder(nn.Module):
    def __init__(self, latent_dim: int, hidden: int, n_inputs: int = N_PITCHES):
        super().__init__()
        self.lstm = nn.LSTM(n_inputs, hidden, batch_first=True)
        self.mu = nn.Linear(hidden, latent_dim)
        self.log_var = nn.Linear(hidden, latent_dim)

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        _, (h, _) = self.lstm(x)
        return h[-1]

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        h = self.hidden(x)
        return EncoderOutput(self.mu(h), self.log_var(h))


class SequenceDecoder(nn.Module):
    """Unrolls a fixed number of steps from a single code vector.

    The code seeds the initial LSTM state and is also fed at every step.
    """

    def __init__(self, code_dim: int, hidden: int, n_outputs: int, n_steps: int):
        super().__init__()
        self.n_steps = n_steps
        self.init = nn.Linear(code_dim, 2 * hidden)
        self.lstm = nn.LSTM(code_dim, hidden, batch_first=True)
        self.out = nn.Linear(hidden, n_outputs)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        h0, c0 = torch.tanh(self.init(code)).chunk(2, dim=-1)
        steps = code.unsqueeze(1).expand(-1, self.n_steps, -1)
        y, _ = self.lstm(steps, (h0.unsqueeze(0).contiguous(), c0.unsqueeze(0).contiguous()))
        return self.out(y)


def sample(mu, log_var, eps_var: float, generator: torch.Generator | None = None, eps=None):
    """Reparameterized draw ``mu + exp(log_var / 2) * eps``, eps ~ N(0, eps_var).

    Pass ``eps`` to supply the noise yourself (e.g. zeros).
    """
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype) * math.sqrt(eps_var)
    return mu + torch.exp(0.5 * log_var) * eps


def kl_loss(mu, log_var, cm):
    """KL(N(mu, diag exp(log_var)) || N(cm, I)), summed over the last axis."""
    return 0.5 * ((mu - cm) ** 2 + torch.exp(log_var) - log_var - 1.0).sum(dim=-1)


def recon_loss(logits, target):
    """Per-cell binary cross-entropy summed over everything but the batch axis."""
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    return bce.flatten(1).sum(dim=1)


class LCVAE(nn.Module):
    def __init__(self, n_classes: int, latent_dim: int = 32, intermediate_dim: int = 256):
        super().__init__()
        self.n_classes = n_classes
        self.latent_dim = latent_dim
        self.encoder = SequenceEncoder(latent_dim, intermediate_dim)
        self.class_means = nn.Linear(n_classes, latent_dim, bias=False)
        # unit-scale means keep classes apart from the first epoch
        nn.init.normal_(self.class_means.weight, std=1.0)
        self.decoder = SequenceDecoder(latent_dim, intermediate_dim, N_PITCHES, PHRASE_STEPS)

    @classmethod
    def from_config(cls, n_classes: int, cfg: LCVAEConfig) -> "LCVAE":
        return cls(n_classes, cfg.latent_dim, cfg.intermediate_dim)

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        if x.shape[-2:] != (PHRASE_STEPS, N_PITCHES):
            raise ShapeError(f"phrase batch must end in (50, 128), got {tuple(x.shape)}")
        lead = x.shape[:-2]
        out = self.encoder(x.reshape(-1, PHRASE_STEPS, N_PITCHES))
        return EncoderOutput(out.mu.reshape(*lead, -1), out.log_var.reshape(*lead, -1))

    def class_mean(self, labels: torch.Tensor) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise RangeError(f"label outside 0..{self.n_classes - 1}")
        one_hot = F.one_hot(labels, self.n_classes).to(self.class_means.weight.dtype)
        return self.class_means(one_hot)

    def decode_logits(self, z_plus_cm: torch.Tensor) -> torch.Tensor:
        lead = z_plus_cm.shape[:-1]
        logits = self.decoder(z_plus_cm.reshape(-1, self.latent_dim))
        return logits.reshape(*lead, PHRASE_STEPS, N_PITCHES)

    def decode(self, z_plus_cm: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decode_logits(z_plus_cm))

    def forward(self, x, labels, eps_var: float, generator=None, eps=None):
        out = self.encode(x)
        cm = self.class_mean(labels)
        z = sample(out.mu, out.log_var, eps_var, generator, eps)
        return self.decode_logits(z + cm), out, cm

    # numpy conveniences used by metrics and the CLI ---------------------------

    @torch.no_grad()
    def residual_latent(self, phrase: np.ndarray, label: int) -> np.ndarray:
        """Posterior mean minus the class mean, for a single phrase."""
        x = to_float(np.asarray(phrase)[None], self.class_means.weight.dtype)
        mu = self.encode(x).mu
        return (mu - self.class_mean(torch.tensor([label])))[0].numpy()


def total_loss(model: LCVAE, x, labels, eps_var: float, generator=None, eps=None) -> LossParts:
    """Batch-mean of summed cell BCE plus the class-mean KL term."""
    logits, out, cm = model(x, labels, eps_var, generator, eps)
    recon = recon_loss(logits, x).mean()
    kl = kl_loss(out.mu, out.log_var, cm).mean()
    return LossParts(recon + kl, recon, kl)


@torch.no_grad()
def generate_phrase(model: LCVAE, label: int, eps_var: float, generator=None, threshold: float = 0.5) -> np.ndarray:
    return generate_phrases(model, [label], eps_var, generator, threshold)[0]


@torch.no_grad()
def generate_phrases(model: LCVAE, labels, eps_var: float, generator=None, threshold: float = 0.5) -> np.ndarray:
    labels = torch.as_tensor(list(labels), dtype=torch.long)
    cm = model.class_mean(labels)
    eps = torch.randn(cm.shape, generator=generator, dtype=cm.dtype) * math.sqrt(eps_var)
    probs = model.decode(cm + eps)
    return (probs > threshold).to(torch.uint8).numpy()


@torch.no_grad()
def cell_accuracy(model: LCVAE, x: torch.Tensor, labels, eps_var: float, generator=None, threshold: float = 0.5) -> float:
    logits, _, _ = model(x, labels, eps_var, generator)
    pred = (torch.sigmoid(logits) > threshold).to(x.dtype)
    return float((pred == x).to(torch.float64).mean())


# --------------------------------------------------------------------------
# training


def make_optimizer(model: LCVAE, cfg: LCVAEConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr)


def train_lcvae(
    phrases: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    cfg: LCVAEConfig,
    log: TSVLog | None = None,
    on_epoch=None,
    model: LCVAE | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_epoch: int = 0,
) -> LCVAE:
    """Task 1. Logs ``epoch, recon, kl, total`` and calls ``on_epoch(epoch, model, opt)``."""
    if len(phrases) == 0:
        raise ValueError("no training phrases")
    init_seed(cfg.seed)
    if model is None:
        model = LCVAE.from_config(n_classes, cfg)
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    log = log or TSVLog()
    phrases_t = torch.from_numpy(np.asarray(phrases, dtype=np.uint8))
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    model.train()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        g = epoch_generator(cfg.seed, epoch)
        sums = np.zeros(3)
        for idx in batches(len(phrases_t), cfg.batch_size, g):
            x = phrases_t[idx].float()
            parts = total_loss(model, x, labels_t[idx], cfg.eps_var, g)
            check_finite(parts.total.item(), "L-CVAE loss")
            optimizer.zero_grad()
            parts.total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()
            sums += len(idx) * np.array([parts.recon.item(), parts.kl.item(), parts.total.item()])
        recon, kl, total = sums / len(phrases_t)
        log.write(epoch, recon, kl, total)
        if on_epoch is not None:
            on_epoch(epoch, model, optimizer)
    model.eval()
    return model


# --------------------------------------------------------------------------
# persistence


def save_lcvae(path, model: LCVAE, cfg: LCVAEConfig, dictionary: FLNClassDictionary,
               optimizer=None, epoch: int = 0) -> str:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {
        "epoch": epoch,
        "n_classes": model.n_classes,
        "dictionary_digest": dictionary.digest(),
        "dictionary": dictionary.to_text(),
    }
    if optimizer is not None:
        opt_t, opt_meta = optimizer_tensors(optimizer)
        tensors.update(opt_t)
        meta.update(opt_meta)
    return save_checkpoint(path, KIND, tensors, asdict(cfg), meta)


def load_lcvae(path, with_optimizer: bool = False):
    """Returns ``(model, cfg, dictionary, checkpoint[, optimizer])``."""
    ckpt = load_checkpoint(path, KIND)
    cfg = LCVAEConfig(**ckpt.config)
    dictionary = FLNClassDictionary.from_text(ckpt.meta["dictionary"])
    model = LCVAE.from_config(ckpt.meta["n_classes"], cfg)
    model.load_state_dict(ckpt.torch_state("model."))
    model.eval()
    if not with_optimizer:
        return model, cfg, dictionary, ckpt
    opt = make_optimizer(model, cfg)
    restore_optimizer(opt, ckpt)
    return model, cfg, dictionary, ckpt, opt
