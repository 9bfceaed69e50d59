import numpy as np
import pytest
import torch

from retr3d.model import PRESETS
from retr3d.voxgrid import VoxelField, VoxelGrid
from retr3d.vqvae import TOY_VQ, VQVAE, CodeDecoder, TwoStageReconstructor, VQConfig, quantize, vq_decode, vq_encode


def nearest(z, codebook):
    out = []
    for row in z:
        best, best_d = 0, None
        for k, c in enumerate(codebook):
            d = float(((row - c) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return out


def test_quantize_matches_oracle_with_ties():
    rng = np.random.default_rng(0)
    ties = 0
    for _ in range(50):
        codebook = rng.integers(-2, 3, (4, 2)).astype(np.float64)
        z = rng.integers(-2, 3, (6, 2)).astype(np.float64)
        idx, rows = quantize(torch.from_numpy(z), torch.from_numpy(codebook))
        ref = nearest(z, codebook)
        assert idx.tolist() == ref
        assert torch.equal(rows, torch.from_numpy(codebook[ref]))
        d = ((z[:, None] - codebook[None]) ** 2).sum(-1)
        ties += int(((d == d.min(1, keepdims=True)).sum(1) > 1).sum())
    assert ties > 0


def test_quantize_duplicate_rows_pick_lowest_index():
    codebook = torch.tensor([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    idx, _ = quantize(torch.zeros(1, 2), codebook)
    assert idx.item() == 1


def test_exact_code_maps_to_itself():
    codebook = torch.randn(8, 3)
    idx, rows = quantize(codebook[5:6].clone(), codebook)
    assert idx.item() == 5 and torch.equal(rows, codebook[5:6])


def test_straight_through_gradient_reaches_encoder():
    torch.manual_seed(0)
    vq = VQVAE(TOY_VQ)
    x = (torch.rand(2, 32, 32, 32) > 0.5).float()
    logits, vq_loss, codes, z = vq(x)
    assert codes.shape == (2, 64) and z.shape == (2, 64, TOY_VQ.code_dim)
    (logits.mean() + vq_loss).backward()
    assert vq.encoder[0].weight.grad.abs().sum() > 0
    assert vq.codebook.grad.abs().sum() > 0


def test_vq_encode_decode_contract():
    torch.manual_seed(0)
    vq = VQVAE(TOY_VQ).eval()
    occ = np.zeros((32, 32, 32), np.uint8)
    occ[4:20, 8:30, 2:12] = 1
    codes = vq_encode(VoxelGrid(occ), vq)
    assert codes.shape == (64,) and codes.min() >= 0 and codes.max() < TOY_VQ.codebook_size
    field = vq_decode(codes, vq)
    assert isinstance(field, VoxelField) and field.values.shape == (32, 32, 32)
    with pytest.raises(ValueError):
        vq_decode(np.full(64, TOY_VQ.codebook_size), vq)
    with pytest.raises(ValueError):
        vq_decode(np.zeros(10, dtype=int), vq)
    with pytest.raises(ValueError):
        vq_encode(VoxelGrid.empty(16), vq)


def test_default_geometry():
    cfg = VQConfig()
    assert (cfg.codebook_size, cfg.code_dim, cfg.latent_side, cfg.seq_len) == (2048, 512, 4, 64)
    assert VQConfig.from_dict(TOY_VQ.to_dict()) == TOY_VQ


def test_dead_code_reset():
    torch.manual_seed(0)
    vq = VQVAE(TOY_VQ)
    used = torch.zeros(TOY_VQ.codebook_size, dtype=torch.bool)
    used[:10] = True
    before = vq.codebook[:10].detach().clone()
    z = torch.randn(2, 64, TOY_VQ.code_dim)
    n = vq.reset_codes(z, used, torch.Generator().manual_seed(0))
    assert n == TOY_VQ.codebook_size - 10
    assert torch.equal(vq.codebook[:10], before)
    flat = z.reshape(-1, TOY_VQ.code_dim)
    assert all((flat == row).all(1).any() for row in vq.codebook[10:20])


def test_code_decoder_is_causal():
    torch.manual_seed(0)
    dec = CodeDecoder(32, 2, 2, 16, 8).eval()
    mem = torch.randn(1, 5, 32)
    codes = torch.randint(0, 16, (1, 8))
    changed = codes.clone()
    changed[0, 5:] = (changed[0, 5:] + 1) % 16
    with torch.no_grad():
        a, b = dec(mem, codes), dec(mem, changed)
    # logits at position t see targets < t only
    assert torch.allclose(a[:, :6], b[:, :6], atol=1e-6)
    assert not torch.allclose(a[:, 6:], b[:, 6:])
    out = dec.generate(mem)
    assert out.shape == (1, 8) and out.max() < 16


def test_two_stage_forward_range():
    torch.manual_seed(0)
    model = TwoStageReconstructor(PRESETS["toy"], TOY_VQ).eval()
    probs = model(torch.randn(2, 3, 3, 32, 32))
    assert probs.shape == (2, 32, 32, 32)
    assert ((probs > 0) & (probs < 1)).all()
    assert not any(p.requires_grad for p in model.vqvae.parameters())
