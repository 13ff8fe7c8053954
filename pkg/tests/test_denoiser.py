import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from models.denoiser import (AttentionWeights, DenoiserInput, SpatioTemporalUNet, assemble_input,
                             dual_cross_attention, predict_noise)
from models.exceptions import ShapeError


def loop_attention(f_in, tex, img, w, heads):
    """Scalar-loop dual cross-attention on numpy arrays"""
    q, k, v = f_in @ w['w_q'], tex @ w['w_k'], tex @ w['w_v']
    k_img, v_img = img @ w['w_k_img'], img @ w['w_v_img']
    inner = q.shape[1]
    dh = inner // heads
    out = np.zeros((q.shape[0], inner))
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            for keys, values in ((k, v), (k_img, v_img)):
                scores = [sum(q[i, c] * keys[j, c] for c in cols) / math.sqrt(dh) for j in range(keys.shape[0])]
                top = max(scores)
                exps = [math.exp(s - top) for s in scores]
                total = sum(exps)
                for j, e in enumerate(exps):
                    for c in cols:
                        out[i, c] += e / total * values[j, c]
    return out @ w['w_out'] + w['b_out']


def random_weights(rng, d_block, d_ctx, inner):
    return {
        'w_q': rng.normal(size=(d_block, inner)), 'w_k': rng.normal(size=(d_ctx, inner)),
        'w_v': rng.normal(size=(d_ctx, inner)), 'w_k_img': rng.normal(size=(d_ctx, inner)),
        'w_v_img': rng.normal(size=(d_ctx, inner)), 'w_out': rng.normal(size=(inner, d_block)),
        'b_out': rng.normal(size=d_block),
    }


def as_weights(w):
    return AttentionWeights(**{name: torch.from_numpy(value) for name, value in w.items()})


@pytest.fixture
def unet():
    torch.manual_seed(0)
    return SpatioTemporalUNet(latent_channels=4, base_width=8, channel_mult=(1, 2), num_heads=2,
                              context_dim=8).eval()


def conditioning(batch=1, seed=0):
    generator = torch.Generator().manual_seed(seed)
    tex = torch.randn(batch, 4, 8, generator=generator)
    img_ctx = torch.randn(batch, 4, 8, generator=generator)
    z_img = torch.randn(batch, 4, 8, 8, generator=generator)
    return tex, img_ctx, z_img


def test_degenerate_attention_sums_value_rows():
    one = torch.ones(1, 1, dtype=torch.float64)
    weights = AttentionWeights(w_q=one, w_k=one, w_v=one, w_k_img=one, w_v_img=one)
    tex = torch.tensor([[0.3]], dtype=torch.float64)
    img = torch.tensor([[-1.7]], dtype=torch.float64)
    out = dual_cross_attention(torch.tensor([[2.0]], dtype=torch.float64), tex, img, weights)
    torch.testing.assert_close(out, tex + img, rtol=0, atol=1e-15)


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        heads = int(rng.integers(1, 3))
        inner = heads * int(rng.integers(1, 3))
        d_block, d_ctx = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        n_q, n_tex, n_img = (int(n) for n in rng.integers(1, 5, size=3))
        w = random_weights(rng, d_block, d_ctx, inner)
        f_in, tex, img = rng.normal(size=(n_q, d_block)), rng.normal(size=(n_tex, d_ctx)), rng.normal(size=(n_img, d_ctx))

        out = dual_cross_attention(torch.from_numpy(f_in), torch.from_numpy(tex), torch.from_numpy(img),
                                   as_weights(w), heads=heads)
        np.testing.assert_allclose(out.numpy(), loop_attention(f_in, tex, img, w, heads), rtol=0, atol=1e-6)


def test_zero_image_values_reduce_to_text_attention():
    rng = np.random.default_rng(1)
    w = random_weights(rng, 4, 3, 4)
    w['w_v_img'] = np.zeros_like(w['w_v_img'])
    f_in, tex, img = (torch.from_numpy(rng.normal(size=s)) for s in ((5, 4), (3, 3), (2, 3)))
    assert torch.equal(dual_cross_attention(f_in, tex, img, as_weights(w), heads=2),
                       dual_cross_attention(f_in, tex, None, as_weights(w), heads=2))


def test_image_term_is_additive():
    rng = np.random.default_rng(2)
    w = random_weights(rng, 4, 3, 4)
    f_in, tex, img = (torch.from_numpy(rng.normal(size=s)) for s in ((5, 4), (3, 3), (2, 3)))
    full, terms = dual_cross_attention(f_in, tex, img, as_weights(w), heads=2, return_terms=True)
    w['w_v_img'] = np.zeros_like(w['w_v_img'])
    text_only = dual_cross_attention(f_in, tex, img, as_weights(w), heads=2)
    torch.testing.assert_close(full - text_only, terms.image, rtol=0, atol=1e-6)
    torch.testing.assert_close(terms.text_probs.sum(-1), torch.ones_like(terms.text_probs.sum(-1)))
    torch.testing.assert_close(terms.image_probs.sum(-1), torch.ones_like(terms.image_probs.sum(-1)))


def test_attention_width_mismatch():
    rng = np.random.default_rng(3)
    w = as_weights(random_weights(rng, 4, 3, 4))
    with pytest.raises(ShapeError):
        dual_cross_attention(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(3, 5, dtype=torch.float64), None, w)
    with pytest.raises(ShapeError):
        dual_cross_attention(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(3, 3, dtype=torch.float64),
                             torch.zeros(2, 6, dtype=torch.float64), w)


def test_assemble_input_channel_order():
    z_t = torch.zeros(3, 4, 2, 2)
    z_t[:, 1] = 1.0
    z_img = torch.zeros(4, 2, 2)
    z_img[2] = 1.0
    x = assemble_input(z_t, z_img)
    assert x.shape == (3, 8, 2, 2)
    hot = x.sum(dim=(-1, -2)) > 0
    assert hot.nonzero()[:, 1].unique().tolist() == [1, 6]


def test_assemble_input_drop_zeroes_image_half():
    z_t, z_img = torch.randn(2, 3, 4, 2, 2), torch.randn(2, 4, 2, 2)
    x = assemble_input(z_t, z_img, torch.tensor([True, False]))
    assert torch.equal(x[0, :, 4:], torch.zeros(3, 4, 2, 2))
    assert torch.equal(x[1, :, 4:], z_img[1].expand(3, 4, 2, 2))
    assert torch.equal(assemble_input(z_t, z_img, True)[:, :, 4:], torch.zeros(2, 3, 4, 2, 2))


def test_assemble_input_shape_mismatch():
    with pytest.raises(ShapeError):
        assemble_input(torch.zeros(3, 4, 2, 2), torch.zeros(4, 4, 4))


@pytest.mark.parametrize('frames', [1, 8, 16])
def test_predict_noise_shape(unet, frames):
    tex, img_ctx, z_img = conditioning()
    inp = DenoiserInput(z_t=torch.randn(frames, 4, 8, 8), z_img=z_img[0], t=5, tex=tex[0], img_ctx=img_ctx[0])
    with torch.no_grad():
        assert predict_noise(inp, unet).shape == (frames, 4, 8, 8)


def test_fresh_model_ignores_image_context(unet):
    tex, img_ctx, z_img = conditioning()
    z_t = torch.randn(1, 3, 4, 8, 8)
    with torch.no_grad():
        with_ctx = unet(z_t, torch.tensor([7]), tex, img_ctx, z_img)
        zero_ctx = unet(z_t, torch.tensor([7]), tex, torch.zeros_like(img_ctx), z_img)
        no_ctx = unet(z_t, torch.tensor([7]), tex, None, z_img)
    assert torch.equal(with_ctx, no_ctx)
    assert torch.equal(zero_ctx, no_ctx)


def test_fresh_model_is_frame_equivariant(unet):
    tex, img_ctx, z_img = conditioning()
    z_t = torch.randn(1, 5, 4, 8, 8)
    order = torch.tensor([4, 2, 0, 3, 1])
    with torch.no_grad():
        out = unet(z_t, torch.tensor([3]), tex, img_ctx, z_img)
        permuted = unet(z_t[:, order], torch.tensor([3]), tex, img_ctx, z_img)
    torch.testing.assert_close(permuted, out[:, order], rtol=0, atol=1e-6)


def test_concat_latent_reaches_output(unet):
    tex, img_ctx, z_img = conditioning()
    z_t = torch.randn(1, 2, 4, 8, 8)
    with torch.no_grad():
        kept = unet(z_t, torch.tensor([3]), tex, img_ctx, z_img)
        dropped = unet(z_t, torch.tensor([3]), tex, img_ctx, z_img, drop_image=True)
    assert not torch.equal(kept, dropped)


def test_unet_input_checks(unet):
    tex, img_ctx, z_img = conditioning()
    with pytest.raises(ShapeError):
        unet(torch.zeros(1, 2, 3, 8, 8), torch.tensor([1]), tex)
    with pytest.raises(ShapeError):
        unet(torch.zeros(1, 2, 4, 7, 7), torch.tensor([1]), tex)
    with pytest.raises(ShapeError):
        unet(torch.zeros(2, 2, 4, 8, 8), torch.tensor([1, 1]), tex)


def test_image_cross_attention_layers(unet):
    layers = unet.image_cross_attention()
    assert len(layers) == 5
    assert all(float(layer.w_v_img.abs().sum()) == 0.0 for layer in layers)


def test_denoiser_gradients_match_finite_differences():
    torch.manual_seed(2)
    unet = SpatioTemporalUNet(latent_channels=2, base_width=8, channel_mult=(1, 2), num_heads=2,
                              context_dim=4).double()
    with torch.no_grad():
        for name, param in unet.named_parameters():
            if name.endswith('w_v_img') or 'temporal.attn.to_out' in name:
                param.normal_(0.0, 0.1)

    generator = torch.Generator().manual_seed(3)
    z_t = torch.randn(1, 2, 2, 4, 4, generator=generator, dtype=torch.float64)
    tex = torch.randn(1, 3, 4, generator=generator, dtype=torch.float64)
    img_ctx = torch.randn(1, 2, 4, generator=generator, dtype=torch.float64)
    z_img = torch.randn(1, 2, 4, 4, generator=generator, dtype=torch.float64)
    weights = torch.randn(1, 2, 2, 4, 4, generator=generator, dtype=torch.float64)

    names = [name for name, _ in unet.named_parameters()]
    values = tuple(p.detach().clone().requires_grad_(True) for p in unet.parameters())

    def loss(*params):
        out = functional_call(unet, dict(zip(names, params)), (z_t, torch.tensor([4]), tex, img_ctx, z_img))
        return (out * weights).sum()

    assert gradcheck(loss, values, eps=1e-6, atol=1e-6, rtol=1e-3, fast_mode=True)
