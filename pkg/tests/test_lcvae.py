import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import finite_difference_check
from oracles import kl_quadrature, kl_quadrature_2d
from songvae import lcvae
from songvae.checkpoint import file_digest, module_digest
from songvae.errors import RangeError, ShapeError
from songvae.fln import FLNClassDictionary, FLNPair
from songvae.training import TSVLog


def toy_phrases(n=16, seed=0):
    rng = np.random.default_rng(seed)
    phrases, labels = [], []
    for i in range(n):
        label = 1 + i % 3
        p = np.zeros((50, 128), dtype=np.uint8)
        first, last = [(60, 64), (64, 67), (67, 60)][label - 1]
        p[0:12, first] = 1
        mid = int(rng.choice([62, 65]))
        p[12:37, mid] = 1
        p[37:50, last] = 1
        phrases.append(p)
        labels.append(label)
    return np.stack(phrases), np.array(labels)


def toy_dictionary():
    return FLNClassDictionary([FLNPair(60, 64), FLNPair(64, 67), FLNPair(67, 60)], [30, 30, 30])


# ---------------------------------------------------------------- KL term


def test_kl_zero_at_prior():
    mu = torch.tensor([[0.3, -1.0]])
    assert lcvae.kl_loss(mu, torch.zeros(1, 2), mu).item() == 0.0


def test_kl_half_for_unit_offset():
    assert lcvae.kl_loss(torch.tensor([[1.0]]), torch.zeros(1, 1), torch.zeros(1, 1)).item() == pytest.approx(0.5)


def test_kl_matches_quadrature():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 5))
        mu, cm = rng.normal(0, 2, d), rng.normal(0, 2, d)
        var = np.exp(rng.uniform(-2, 1.5, d))
        got = lcvae.kl_loss(torch.tensor(mu), torch.tensor(np.log(var)), torch.tensor(cm)).item()
        worst = max(worst, abs(got - kl_quadrature(mu, var, cm)))
    assert worst <= 1e-6


def test_kl_matches_joint_2d_quadrature():
    mu, var, cm = np.array([0.4, -1.1]), np.array([0.5, 1.7]), np.array([-0.2, 0.3])
    got = lcvae.kl_loss(torch.tensor(mu), torch.tensor(np.log(var)), torch.tensor(cm)).item()
    assert got == pytest.approx(kl_quadrature_2d(mu, var, cm), abs=1e-6)


vec = st.lists(st.floats(-5, 5), min_size=1, max_size=6)


@given(vec, st.data())
def test_kl_nonnegative_and_zero_only_at_prior(mu, data):
    d = len(mu)
    lv = data.draw(st.lists(st.floats(-4, 4), min_size=d, max_size=d))
    cm = data.draw(st.lists(st.floats(-5, 5), min_size=d, max_size=d))
    t = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
    kl = lcvae.kl_loss(t(mu), t(lv), t(cm)).item()
    assert kl >= -1e-12
    assert lcvae.kl_loss(t(cm), torch.zeros(d, dtype=torch.float64), t(cm)).item() == 0.0


# ---------------------------------------------------------------- sampling


def test_sample_with_zero_noise_is_mu():
    mu, lv = torch.randn(5, 32), torch.randn(5, 32)
    assert torch.equal(lcvae.sample(mu, lv, 0.01, eps=torch.zeros(5, 32)), mu)


@pytest.mark.parametrize("eps_var", [0.01, 0.1])
def test_sample_variance_monte_carlo(eps_var):
    g = torch.Generator().manual_seed(3)
    sigma2 = torch.tensor([0.25, 1.0, 4.0], dtype=torch.float64)
    mu = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64).expand(100_000, 3)
    z = lcvae.sample(mu, torch.log(sigma2).expand(100_000, 3), eps_var, g)
    var = (z - mu).var(dim=0)
    assert torch.allclose(var, sigma2 * eps_var, rtol=0.05)


# ---------------------------------------------------------------- model


def test_class_mean_is_weight_column():
    m = lcvae.LCVAE(5, 8, 16)
    cm = m.class_mean(torch.tensor([3, 3]))
    assert torch.equal(cm[0], cm[1])
    assert torch.equal(cm[0], m.class_means.weight[:, 3])
    assert m.class_means.bias is None


def test_class_mean_range():
    m = lcvae.LCVAE(5, 8, 16)
    with pytest.raises(RangeError):
        m.class_mean(torch.tensor([5]))


def test_encode_shape_check():
    m = lcvae.LCVAE(5, 8, 16)
    with pytest.raises(ShapeError):
        m.encode(torch.zeros(2, 49, 128))
    out = m.encode(torch.zeros(2, 3, 50, 128))
    assert out.mu.shape == (2, 3, 8) and out.log_var.shape == (2, 3, 8)


def test_decode_range_and_shape():
    m = lcvae.LCVAE(5, 8, 16)
    p = m.decode(torch.randn(4, 8))
    assert p.shape == (4, 50, 128)
    assert p.min().item() >= 0 and p.max().item() <= 1


def test_loss_at_least_kl_and_vanishing_limit():
    m = lcvae.LCVAE(4, 8, 16)
    x, labels = toy_phrases(4)
    parts = lcvae.total_loss(m, torch.from_numpy(x).float(), torch.from_numpy(labels), 0.01)
    assert parts.total.item() >= parts.kl.item() >= 0
    target = torch.from_numpy(x).float()
    assert lcvae.recon_loss(80 * (2 * target - 1), target).max().item() < 1e-30


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    m = lcvae.LCVAE(4, 4, 6).double()
    x, labels = toy_phrases(3)
    x = torch.from_numpy(x).double()
    labels = torch.from_numpy(labels)
    eps = torch.randn(3, 4, dtype=torch.float64) * 0.1
    check = finite_difference_check(
        list(m.parameters()), lambda: lcvae.total_loss(m, x, labels, 0.01, eps=eps).total, n_samples=300
    )
    assert check.ok(rel_tol=1e-4, min_checked=100), check


def test_single_batch_overfit():
    x, labels = toy_phrases(8)
    cfg = lcvae.LCVAEConfig(latent_dim=16, intermediate_dim=64, batch_size=8, epochs=150, lr=3e-3, seed=0)
    model = lcvae.train_lcvae(x, labels, 4, cfg)
    g = torch.Generator().manual_seed(0)
    acc = lcvae.cell_accuracy(model, torch.from_numpy(x).float(), torch.from_numpy(labels), cfg.eps_var, g)
    assert acc >= 0.99


def test_training_is_deterministic():
    x, labels = toy_phrases(12)
    cfg = lcvae.LCVAEConfig(latent_dim=8, intermediate_dim=16, batch_size=4, epochs=3, seed=5)
    logs = [TSVLog(), TSVLog()]
    digests = [module_digest(lcvae.train_lcvae(x, labels, 4, cfg, log)) for log in logs]
    assert digests[0] == digests[1]
    assert logs[0].rows == logs[1].rows
    assert all(math.isfinite(v) for row in logs[0].rows for v in row[1:])


def test_resume_matches_uninterrupted(tmp_path):
    x, labels = toy_phrases(12)
    d = toy_dictionary()
    full_cfg = lcvae.LCVAEConfig(latent_dim=8, intermediate_dim=16, batch_size=4, epochs=4, seed=2)
    full = lcvae.train_lcvae(x, labels, 4, full_cfg)

    half_cfg = lcvae.LCVAEConfig(latent_dim=8, intermediate_dim=16, batch_size=4, epochs=2, seed=2)
    saved = {}
    lcvae.train_lcvae(x, labels, 4, half_cfg,
                      on_epoch=lambda e, m, o: saved.setdefault("d", lcvae.save_lcvae(tmp_path / "h.ck", m, half_cfg, d, o, e)) if e == 2 else None)
    model, cfg, _, ckpt, opt = lcvae.load_lcvae(tmp_path / "h.ck", with_optimizer=True)
    cfg.epochs = 4
    resumed = lcvae.train_lcvae(x, labels, 4, cfg, model=model, optimizer=opt, start_epoch=ckpt.meta["epoch"])
    assert module_digest(resumed) == module_digest(full)


def test_checkpoint_roundtrip(tmp_path):
    m = lcvae.LCVAE(5, 8, 16)
    cfg = lcvae.LCVAEConfig(latent_dim=8, intermediate_dim=16)
    d = FLNClassDictionary([FLNPair(60, 60), FLNPair(62, 62), FLNPair(64, 64)], [30, 25, 21])
    digest = lcvae.save_lcvae(tmp_path / "a.ck", m, cfg, d)
    assert digest == file_digest(tmp_path / "a.ck")
    back, cfg2, d2, _ = lcvae.load_lcvae(tmp_path / "a.ck")
    x = torch.rand(3, 50, 128)
    assert torch.equal(back.encode(x).mu, m.encode(x).mu)
    z = torch.randn(3, 8)
    assert torch.equal(back.decode(z), m.decode(z))
    assert cfg2 == cfg and d2.digest() == d.digest()
    lcvae.save_lcvae(tmp_path / "b.ck", back, cfg2, d2)
    assert file_digest(tmp_path / "b.ck") == digest


def test_generate_phrases_binary():
    m = lcvae.LCVAE(5, 8, 16)
    out = lcvae.generate_phrases(m, [1, 2, 3], 0.01, torch.Generator().manual_seed(0))
    assert out.shape == (3, 50, 128) and out.dtype == np.uint8
    assert set(np.unique(out)) <= {0, 1}
    again = lcvae.generate_phrases(m, [1, 2, 3], 0.01, torch.Generator().manual_seed(0))
    assert np.array_equal(again, out)
    assert lcvae.generate_phrase(m, 1, 0.01).shape == (50, 128)
