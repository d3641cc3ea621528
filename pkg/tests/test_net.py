import numpy as np
import pytest
import torch

from resflow.dataset import WindowSpec
from resflow.errors import ShapeError
from resflow.net import (Batch, EncoderLayer, ForecastNet, ModelConfig, MultiHeadAttention,
                         SeededDropout, TempEmbed, TokensToTime, TransformerEncoder, grad_check)
from resflow.training import VARIANTS, make_variant, mae_loss

D = torch.float64


def random_batch(spec, n=2, seed=0):
    g = torch.Generator().manual_seed(seed)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=D)

    raw = torch.rand(n, spec.dec_len, spec.c_res, generator=g, dtype=D) * 50
    return Batch(r(n, spec.enc_len, spec.c_real), torch.rand(n, spec.enc_len, 4, generator=g, dtype=D),
                 raw / 50, torch.rand(n, spec.dec_len, 4, generator=g, dtype=D), raw,
                 torch.rand(n, spec.dec_len, spec.c_real, generator=g, dtype=D) * 50)


def test_embed_zero_weights():
    emb = TempEmbed(14, 2, 16, 0.0)
    with torch.no_grad():
        for p in emb.parameters():
            p.zero_()
    assert not emb(torch.randn(14, 2, dtype=D), torch.rand(14, 4, dtype=D)).any()


def test_embed_token_counts():
    emb = TempEmbed(70, 2, 16, 0.0)
    assert emb(torch.randn(70, 2, dtype=D), torch.rand(70, 4, dtype=D)).shape == (6, 16)
    emb = TempEmbed(70, 2, 16, 0.0, inverse=False)
    assert emb(torch.randn(70, 2, dtype=D), torch.rand(70, 4, dtype=D)).shape == (70, 16)
    with pytest.raises(ShapeError):
        emb(torch.randn(69, 2, dtype=D), torch.rand(69, 4, dtype=D))


def test_embed_identity_like_weights():
    emb = TempEmbed(20, 1, 16, 0.0)
    with torch.no_grad():
        emb.linear.weight.zero_()
        emb.linear.bias.zero_()
        emb.linear.weight[:, :16] = torch.eye(16, dtype=D)
    x = torch.randn(20, 1, dtype=D)
    tokens = emb(x, torch.rand(20, 4, dtype=D))
    assert torch.equal(tokens[0], x[:16, 0])


def test_zeroed_branches_are_residual_identity():
    layer = EncoderLayer(16, 2, 64, 0.0)
    with torch.no_grad():
        layer.attn.o.weight.zero_()
        layer.attn.o.bias.zero_()
        layer.ffn[3].weight.zero_()
        layer.ffn[3].bias.zero_()
    x = torch.randn(6, 16, dtype=D)
    assert torch.equal(layer(x), x)


def test_single_token_attention_weight_is_one():
    attn = MultiHeadAttention(16, 2)
    w = attn.weights(torch.randn(1, 16, dtype=D), torch.randn(1, 16, dtype=D))
    assert torch.equal(w, torch.ones_like(w))


def test_attention_rows_stochastic():
    attn = MultiHeadAttention(16, 2)
    w = attn.weights(torch.randn(3, 7, 16, dtype=D) * 5, torch.randn(3, 9, 16, dtype=D) * 5)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(3, 2, 7, dtype=D), atol=1e-9, rtol=0)


def test_encoder_permutation_equivariance():
    torch.manual_seed(0)
    enc = TransformerEncoder(ModelConfig(dropout=0.0))
    x = torch.randn(6, 16, dtype=D)
    perm = torch.randperm(6)
    assert torch.allclose(enc(x[perm]), enc(x)[perm], atol=1e-10, rtol=0)


def test_tokens_to_time():
    t2t = TokensToTime(6, 70)
    with torch.no_grad():
        t2t.linear.weight.zero_()
        t2t.linear.bias.zero_()
    assert t2t(torch.randn(6, 16, dtype=D)).shape == (70, 16)
    with torch.no_grad():
        t2t.linear.weight.normal_()
    x = torch.randn(6, 16, dtype=D)
    torch.testing.assert_close(t2t(2.5 * x), 2.5 * t2t(x), rtol=1e-12, atol=1e-12)
    with pytest.raises(ShapeError):
        t2t(torch.randn(5, 16, dtype=D))


def test_dropout_eval_identity_and_seeded():
    drop = SeededDropout(0.5)
    drop.generator = torch.Generator().manual_seed(1)
    x = torch.ones(100, dtype=D)
    a = drop(x)
    assert set(a.unique().tolist()) <= {0.0, 2.0}
    drop.eval()
    assert torch.equal(drop(x), x)


def test_deterministic_forward_and_seeded_init():
    cfg = ModelConfig(dropout=0.0)
    batch = random_batch(cfg.spec)
    m1, m2 = ForecastNet(cfg, seed=5), ForecastNet(cfg, seed=5)
    assert torch.equal(m1(batch), m2(batch))
    assert not torch.equal(ForecastNet(cfg, seed=6)(batch), m1(batch))


def test_dec_only_has_no_encoder_parameters():
    net = ForecastNet(make_variant("DecOnly"))
    names = [n for n, _ in net.named_parameters()]
    assert not any(n.startswith("enc") or "cross_attn" in n for n in names)


def test_zeroed_cross_attention_matches_decoder_only():
    full = ForecastNet(make_variant("Full", base=ModelConfig(dropout=0.0)), seed=1)
    dec = ForecastNet(make_variant("DecOnly", base=ModelConfig(dropout=0.0)), seed=2)
    with torch.no_grad():
        for layer in full.decoder.layers:
            layer.cross_attn.o.weight.zero_()
            layer.cross_attn.o.bias.zero_()
    missing = dec.load_state_dict(
        {k: v for k, v in full.state_dict().items() if k in dec.state_dict()}, strict=True)
    assert not missing.missing_keys
    batch = random_batch(full.cfg.spec)
    torch.testing.assert_close(full(batch), dec(batch), rtol=0, atol=1e-12)


def test_dec_only_ignores_encoder_input():
    net = ForecastNet(make_variant("DecOnly", base=ModelConfig(dropout=0.0)))
    b = random_batch(net.cfg.spec)
    b2 = b._replace(x_enc=b.x_enc * 1000)
    assert torch.equal(net(b), net(b2))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("c_out", [1, 2])
def test_output_shape(variant, c_out):
    spec = WindowSpec(3, 2, c_out)
    net = ForecastNet(make_variant(variant, spec=spec))
    net.eval()
    assert net(random_batch(spec)).shape == (2, 28, c_out)


def test_grad_check_linear_model():
    torch.manual_seed(0)
    lin = torch.nn.Linear(5, 3, dtype=D)
    x = torch.randn(8, 5, dtype=D)
    y = lin(x).detach() + torch.where(torch.rand(8, 3, dtype=torch.float64) < 0.5, 1.0, -1.0)
    res = grad_check(lambda: mae_loss(lin(x), y), lin, n_coords=18)
    assert res.max_rel_error < 1e-7


def test_grad_check_zero_path_is_exact():
    torch.manual_seed(0)
    used = torch.nn.Linear(3, 1, dtype=D)
    unused = torch.nn.Linear(3, 1, dtype=D)
    model = torch.nn.ModuleDict({"used": used, "unused": unused})
    x = torch.randn(4, 3, dtype=D)
    res = grad_check(lambda: used(x).sum(), model)
    assert res.per_tensor["unused.weight"] == 0.0 and res.per_tensor["unused.bias"] == 0.0


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("c_out", [1, 2])
def test_grad_check_small_models(variant, c_out):
    spec = WindowSpec(3, 2, c_out)
    net = ForecastNet(make_variant(variant, spec, ModelConfig(dropout=0.0)), seed=11)
    net.eval()
    batch = random_batch(spec, seed=c_out)
    with torch.no_grad():
        pred = net(batch)
    g = torch.Generator().manual_seed(0)
    sign = torch.where(torch.rand(pred.shape, generator=g, dtype=D) < 0.7, 1.0, -1.0)
    y = pred + sign * (0.5 + torch.rand(pred.shape, generator=g, dtype=D))
    res = grad_check(lambda: mae_loss(net(batch), y), net, n_coords=200)
    assert res.max_rel_error < 1e-4
    assert set(res.per_tensor) == {n for n, _ in net.named_parameters()}
