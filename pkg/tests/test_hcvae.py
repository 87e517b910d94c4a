import numpy as np
import pytest
import torch

from songvae import hcvae, lcvae
from songvae.checkpoint import file_digest, module_digest
from songvae.errors import MissingPretrainError, ProvenanceError, RangeError, ShapeError
from songvae.fln import FLNClassDictionary, FLNPair
from songvae.training import TSVLog

PAIRS = [(60, 64), (64, 67), (67, 60)]


def make_phrase(first, mid, last):
    p = np.zeros((50, 128), dtype=np.uint8)
    p[0:12, first] = 1
    p[12:37, mid] = 1
    p[37:50, last] = 1
    return p


def toy_songs(n_songs=8, seed=0):
    rng = np.random.default_rng(seed)
    songs, labels = [], []
    for _ in range(n_songs):
        song, lab = [], []
        for i in range(17):
            k = int(rng.integers(3))
            song.append(make_phrase(PAIRS[k][0], int(rng.choice([62, 65])), PAIRS[k][1]))
            lab.append(k + 1)
        songs.append(np.stack(song))
        labels.append(lab)
    return np.stack(songs), np.array(labels)


def toy_dictionary():
    return FLNClassDictionary([FLNPair(*p) for p in PAIRS], [30, 30, 30])


@pytest.fixture(scope="module")
def trained_local():
    songs, labels = toy_songs(6)
    cfg = lcvae.LCVAEConfig(latent_dim=8, intermediate_dim=32, batch_size=16, epochs=40, lr=3e-3, seed=0)
    return lcvae.train_lcvae(songs.reshape(-1, 50, 128), labels.reshape(-1), 5, cfg)


def small_hcvae(local, **kw):
    kw = {"latent_dim": 16, "intermediate_dim": 32, "batch_size": 4, **kw}
    cfg = hcvae.GVAEConfig(**kw)
    torch.manual_seed(0)
    return hcvae.HCVAE.from_config(local, cfg), cfg


def test_encode_song_shape_and_determinism(trained_local):
    model, _ = small_hcvae(trained_local)
    songs, labels = toy_songs(2)
    x, lab = torch.from_numpy(songs).float(), torch.from_numpy(labels)
    seq = model.encode_song(x, lab)
    assert seq.shape == (2, 17, 8)
    assert torch.equal(seq, model.encode_song(x, lab))
    with pytest.raises(ShapeError):
        model.encode_song(torch.zeros(1, 16, 50, 128), lab[:1, :16])


def test_cm_bookkeeping_is_exact(trained_local):
    model, _ = small_hcvae(trained_local)
    songs, labels = toy_songs(3)
    x, lab = torch.from_numpy(songs).float(), torch.from_numpy(labels)
    seq = model.encode_song(x, lab)
    raw = trained_local.encode(x).mu
    assert torch.equal(seq + trained_local.class_mean(lab), raw)


def test_cm_subtraction_removes_label_offset(trained_local):
    a = make_phrase(60, 62, 64)
    b = make_phrase(64, 62, 67)  # same body, different first/last notes
    d = toy_dictionary()
    la, lb = d.label(a), d.label(b)
    assert la != lb
    raw = trained_local.encode(torch.from_numpy(np.stack([a, b])).float()).mu.detach()
    res = np.stack([trained_local.residual_latent(a, la), trained_local.residual_latent(b, lb)])
    raw_gap = (raw[0] - raw[1]).norm().item()
    res_gap = np.linalg.norm(res[0] - res[1])
    assert res_gap < 0.5 * raw_gap


def test_gvae_shapes_and_degenerate_input(trained_local):
    model, _ = small_hcvae(trained_local)
    out = model.gvae_encode(torch.zeros(2, 17, 8))
    assert out.mu.shape == (2, 16) and out.log_var.shape == (2, 16)
    assert torch.isfinite(out.mu).all() and torch.isfinite(out.log_var).all()
    assert model.gvae_decode(torch.zeros(3, 16)).shape == (3, 17, 8)
    full = hcvae.GVAE()
    assert full.encoder.mu.out_features == 256


def test_gvae_sample_arithmetic():
    z = lcvae.sample(torch.tensor([2.0]), torch.tensor([0.0]), 0.1, eps=torch.tensor([-0.5]))
    assert z.item() == pytest.approx(1.5)


def test_gvae_kl_zero_only_at_standard_normal():
    zero = torch.zeros(1, 16)
    assert hcvae.kl_loss(zero, zero, zero).item() == 0.0
    assert hcvae.kl_loss(zero + 0.1, zero, zero).item() > 0
    assert hcvae.kl_loss(zero, zero + 0.1, zero).item() > 0


def test_noise_ablation(trained_local):
    model, cfg = small_hcvae(trained_local)
    songs, labels = toy_songs(1)
    zg, zl = torch.zeros(1, 16), torch.zeros(1, 17, 8)
    a = hcvae.hcvae_forward(model, songs[0], labels[0], cfg, torch.Generator().manual_seed(1), zg, zl)
    b = hcvae.hcvae_forward(model, songs[0], labels[0], cfg, torch.Generator().manual_seed(2), zg, zl)
    assert a.shape == (850, 128)
    assert np.array_equal(a, b)
    c = hcvae.hcvae_forward(model, songs[0], labels[0], cfg, torch.Generator().manual_seed(1))
    d = hcvae.hcvae_forward(model, songs[0], labels[0], cfg, torch.Generator().manual_seed(2))
    assert not np.array_equal(c, d)


def test_freeze_invariant(trained_local):
    model, cfg = small_hcvae(trained_local, epochs=3)
    before = module_digest(model.lcvae)
    songs, labels = toy_songs(4)
    hcvae.train_hcvae(model, songs, labels, cfg)
    assert module_digest(model.lcvae) == before
    assert not any(p.requires_grad for p in model.lcvae.parameters())
    model.train()
    assert not model.lcvae.training


def test_training_deterministic_and_decreasing(trained_local):
    songs, labels = toy_songs(8)
    logs = []
    for _ in range(2):
        model, cfg = small_hcvae(trained_local, epochs=5, seed=3)
        log = TSVLog()
        hcvae.train_hcvae(model, songs, labels, cfg, log)
        logs.append((log.rows, module_digest(model.gvae)))
    assert logs[0] == logs[1]
    rows = logs[0][0]
    assert rows[-1][3] < rows[0][3]


def test_overfit_song_reconstruction(trained_local):
    songs, labels = toy_songs(8)
    model, cfg = small_hcvae(trained_local, epochs=60, lr=3e-3, batch_size=8)
    hcvae.train_hcvae(model, songs, labels, cfg)
    hits = []
    for s, lab in zip(songs, labels):
        probs = hcvae.hcvae_forward(model, s, lab, cfg, torch.Generator().manual_seed(0))
        hits.append(((probs > 0.5) == s.reshape(850, 128)).mean())
    assert np.mean(hits) >= 0.95


def test_generate_songs_contract(trained_local):
    model, cfg = small_hcvae(trained_local)
    labels = [[1, 2, 3] * 5 + [1, 2], [0] * 17]
    a = hcvae.generate_songs(model, labels, cfg, torch.Generator().manual_seed(4))
    b = hcvae.generate_songs(model, labels, cfg, torch.Generator().manual_seed(4))
    for s, t, lab in zip(a, b, labels):
        assert s.grid.shape == (850, 128)
        assert s.labels == tuple(lab)
        assert set(np.unique(s.grid)) <= {0, 1}
        assert np.array_equal(s.grid, t.grid)
    with pytest.raises(RangeError):
        hcvae.generate_songs(model, [[5] * 17], cfg)
    assert hcvae.generate_song(model, labels[0], cfg).grid.shape == (850, 128)


def test_encode_to_prior_shape(trained_local):
    model, _ = small_hcvae(trained_local)
    songs, labels = toy_songs(1)
    from songvae.corpus import SongTensor
    z = hcvae.encode_to_prior(model, SongTensor(songs[0], tuple(labels[0])))
    assert z.shape == (1, 16)


def test_checkpoint_provenance(tmp_path, trained_local):
    d = FLNClassDictionary([FLNPair(*p) for p in PAIRS] + [FLNPair(62, 62)], [30, 30, 30, 25])
    lcfg = lcvae.LCVAEConfig(latent_dim=8, intermediate_dim=32)
    lcvae.save_lcvae(tmp_path / "l.ck", trained_local, lcfg, d)
    model, cfg = small_hcvae(trained_local)
    hcvae.save_hcvae(tmp_path / "h.ck", model, cfg, tmp_path / "l.ck")
    back, cfg2, d2, ckpt = hcvae.load_hcvae(tmp_path / "h.ck")
    assert cfg2 == cfg and d2.digest() == d.digest()
    assert module_digest(back.gvae) == module_digest(model.gvae)
    assert ckpt.meta["lcvae_digest"] == file_digest(tmp_path / "l.ck")
    assert "/" not in ckpt.meta["lcvae_file"]

    other = lcvae.LCVAE(5, 8, 32)
    lcvae.save_lcvae(tmp_path / "other.ck", other, lcfg, d)
    with pytest.raises(ProvenanceError):
        hcvae.load_hcvae(tmp_path / "h.ck", tmp_path / "other.ck")
    (tmp_path / "l.ck").unlink()
    with pytest.raises(MissingPretrainError):
        hcvae.load_hcvae(tmp_path / "h.ck")


def test_fln_seq_vae_samples_in_range():
    rng = np.random.default_rng(0)
    seqs = rng.integers(0, 5, size=(20, 17))
    cfg = hcvae.FLNSeqConfig(epochs=3)
    model = hcvae.train_fln_seq_vae(seqs, 5, cfg)
    out = hcvae.sample_fln_sequences(model, 50, torch.Generator().manual_seed(0))
    assert out.shape == (50, 17) and out.min() >= 0 and out.max() < 5
    again = hcvae.sample_fln_sequences(model, 50, torch.Generator().manual_seed(0))
    assert np.array_equal(out, again)
    assert len(hcvae.sample_fln_sequence(model, torch.Generator().manual_seed(0))) == 17


def test_fln_seq_checkpoint_roundtrip(tmp_path):
    cfg = hcvae.FLNSeqConfig(epochs=1)
    model = hcvae.train_fln_seq_vae(np.zeros((4, 17), dtype=int), 3, cfg)
    hcvae.save_fln_seq(tmp_path / "f.ck", model, cfg, "abc")
    back, cfg2, meta = hcvae.load_fln_seq(tmp_path / "f.ck")
    assert cfg2 == cfg and meta["dictionary_digest"] == "abc"
    assert module_digest(back) == module_digest(model)
