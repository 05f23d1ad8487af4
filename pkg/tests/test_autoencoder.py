import numpy as np
import pytest
import torch

from camoinpaint.autoencoder import VQVAE, export_global_embedding, nearest_code, quantize, vqvae_loss


@pytest.fixture
def ae():
    torch.manual_seed(0)
    return VQVAE(factor=4, latent_channels=3, codebook_size=512, hidden=16).eval()


def brute_nearest(cells, codebook):
    out = []
    for z in cells:
        best, best_d = 0, np.inf
        for k, e in enumerate(codebook):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(z, e))
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


@pytest.mark.parametrize("size,latent", [(512, 128), (64, 16)])
def test_encode_shape(ae, size, latent):
    with torch.no_grad():
        z = ae.encode(torch.rand(1, 3, size, size))
    assert z.shape == (1, 3, latent, latent)


def test_encode_rejects_indivisible(ae):
    with pytest.raises(ValueError):
        ae.encode(torch.rand(1, 3, 30, 32))


def test_encode_constant_image_is_constant_inside(ae):
    with torch.no_grad():
        z = ae.encode(torch.full((1, 3, 128, 128), 0.3))[0]
    inner = z[:, 4:-4, 4:-4]
    torch.testing.assert_close(inner, inner[:, :1, :1].expand_as(inner), rtol=0, atol=1e-5)


def test_quantize_examples():
    cb = torch.tensor([[0.0, 0, 0], [1.0, 1, 1]])
    assert nearest_code(torch.tensor([[0.2, 0.1, 0.0]]), cb).item() == 0
    assert nearest_code(torch.tensor([[0.5, 0.5, 0.5]]), cb).item() == 0  # tie -> lowest index
    cb2 = torch.tensor([[1.0, 1, 1], [0.0, 0, 0], [0.0, 0, 0]])
    assert nearest_code(torch.tensor([[0.1, 0, 0]]), cb2).item() == 1


def test_quantize_matches_brute_force(rng):
    cb = rng.normal(size=(32, 3))
    cells = rng.normal(size=(100, 3))
    got = nearest_code(torch.from_numpy(cells), torch.from_numpy(cb)).numpy()
    np.testing.assert_array_equal(got, brute_nearest(cells, cb))


def test_quantized_values_are_codebook_entries(ae):
    z = torch.randn(2, 3, 5, 5)
    qr = quantize(z, ae.codebook)
    flat = qr.quantized.detach().permute(0, 2, 3, 1).reshape(-1, 3)
    torch.testing.assert_close(flat, ae.codebook.detach()[qr.indices.flatten()], rtol=0, atol=1e-6)
    assert qr.indices.min() >= 0 and qr.indices.max() < 512


def test_quantize_dim_mismatch():
    with pytest.raises(ValueError):
        quantize(torch.randn(1, 4, 2, 2), torch.randn(8, 3))


def test_decode_shape_and_purity(ae):
    z = torch.randn(1, 3, 16, 16)
    with torch.no_grad():
        a, b = ae.decode(z), ae.decode(z)
    assert a.shape == (1, 3, 64, 64)
    assert a.min() >= 0 and a.max() <= 1
    assert torch.equal(a, b)


def test_vqvae_loss_zero():
    x = torch.rand(2, 3, 8, 8)
    z = torch.randn(2, 3, 2, 2)
    assert vqvae_loss(x, x.clone(), z, z.clone()).item() == 0.0


def test_vqvae_loss_single_cell():
    img, rec = torch.tensor([[[[0.5]]]]), torch.tensor([[[[0.2]]]])
    z, q = torch.tensor([[[[1.0]]]]), torch.tensor([[[[0.0]]]])
    expect = 0.3**2 + 1.0 + 0.25 * 1.0
    assert vqvae_loss(img, rec, z, q, beta=0.25).item() == pytest.approx(expect, rel=1e-6)
    assert vqvae_loss(img, rec, z, q, beta=0.25, ema=True).item() == pytest.approx(0.09 + 0.25, rel=1e-6)


def test_vqvae_loss_loop_oracle(rng):
    x, r = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    z, q = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
    rec = sum(float((a - b) ** 2) for a, b in zip(x.ravel(), r.ravel())) / x.size
    gap = sum(float((a - b) ** 2) for a, b in zip(z.ravel(), q.ravel())) / z.size
    expect = rec + gap + 0.25 * gap
    got = vqvae_loss(*(torch.from_numpy(a) for a in (x, r, z, q)), beta=0.25).item()
    assert got == pytest.approx(expect, rel=1e-6)


def test_straight_through_gradient_finite_differences():
    torch.manual_seed(1)
    ae = VQVAE(factor=2, latent_channels=3, codebook_size=16, hidden=8).double()
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    z0 = ae.encode(x).detach()
    q0 = quantize(z0, ae.codebook).quantized.detach()  # codes frozen at the base point

    def loss_st(z):
        st = z + (q0 - z).detach()
        recon = ae.decoder(st) * 0.5 + 0.5
        return vqvae_loss(x, recon, z, q0, beta=0.25)

    z = z0.clone().requires_grad_(True)
    loss_st(z).backward()
    analytic = z.grad.clone()

    def loss_fd(zv):
        # straight-through forward: decoder input moves with z, codes stay at q0
        with torch.no_grad():
            return (torch.nn.functional.mse_loss(ae.decoder(q0 + (zv - z0)) * 0.5 + 0.5, x)
                    + torch.nn.functional.mse_loss(q0, z0) + 0.25 * torch.nn.functional.mse_loss(zv, q0))

    h = 1e-6
    numeric = torch.zeros_like(z0)
    flat = numeric.view(-1)
    for i in range(z0.numel()):
        e = torch.zeros_like(z0).view(-1)
        e[i] = h
        e = e.view_as(z0)
        flat[i] = (loss_fd(z0 + e) - loss_fd(z0 - e)) / (2 * h)
    torch.testing.assert_close(analytic, numeric, rtol=1e-4, atol=1e-9)


def test_export_global_embedding(ae):
    eg = export_global_embedding(ae.codebook)
    assert eg.shape == (512, 3)
    assert torch.equal(eg, ae.codebook.detach())
    assert not eg.requires_grad
    with torch.no_grad():
        ae.codebook.add_(1.0)
    assert not torch.equal(eg, ae.codebook.detach())


def test_ema_mode_updates_codebook_without_gradients():
    torch.manual_seed(0)
    ae = VQVAE(factor=4, codebook_size=8, hidden=8, ema=True).train()
    before = ae.codebook.detach().clone()
    _, loss, _ = ae(torch.rand(2, 3, 16, 16))
    loss.backward()
    assert ae.codebook.grad is None
    assert not torch.equal(before, ae.codebook.detach())


def test_revive_dead_codes():
    torch.manual_seed(0)
    ae = VQVAE(factor=4, codebook_size=8, hidden=8)
    usage = torch.tensor([1.0, 0, 3, 0, 0, 1, 1, 1])
    z = torch.randn(1, 3, 4, 4)
    assert ae.revive_dead_codes(z, usage) == 3
