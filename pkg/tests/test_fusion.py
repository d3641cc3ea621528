import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from resflow.errors import NumericError, ShapeError
from resflow.fusion import AdaptiveFusion, PlainHead, fuse, kernel_weights, same_conv


def brute_conv(a, k):
    """out[h] = sum_u k_u a[h-u], zero outside [0, L)."""
    L, K = len(a), len(k)
    P = K // 2
    out = []
    for h in range(L):
        acc = 0.0
        for j in range(K):
            src = h - (j - P)
            if 0 <= src < L:
                acc += k[j] * a[src]
        out.append(acc)
    return out


def test_uniform_kernel():
    k = kernel_weights(torch.zeros(5, dtype=torch.float64))
    assert torch.all(k == 0.2)


def test_peaked_kernel():
    k = kernel_weights(torch.tensor([10.0, 0, 0, 0, 0], dtype=torch.float64))
    assert math.isclose(k[0].item(), math.exp(10) / (math.exp(10) + 4), rel_tol=1e-14)
    assert round(k[0].item(), 5) == 0.99982


def test_hand_convolution():
    a = torch.tensor([[0.0], [4.0], [0.0], [0.0]], dtype=torch.float64)
    out = same_conv(a, torch.tensor([0.25, 0.5, 0.25], dtype=torch.float64))
    assert out[:, 0].tolist() == [1.0, 2.0, 1.0, 0.0]


def test_asymmetric_kernel_direction():
    a = [1.0, 2.0, 3.0, 4.0, 5.0]
    k = [0.1, 0.2, 0.3, 0.15, 0.25]
    out = same_conv(torch.tensor(a, dtype=torch.float64)[:, None], torch.tensor(k, dtype=torch.float64))
    np.testing.assert_allclose(out[:, 0].numpy(), brute_conv(a, k), atol=1e-12)


def test_even_kernel_rejected():
    with pytest.raises(ShapeError):
        same_conv(torch.zeros(4, 1), torch.ones(4) / 4)


def _head(seed=0, d=8, c_res=4, c_out=2):
    torch.manual_seed(seed)
    head = AdaptiveFusion(d, c_res, c_out)
    with torch.no_grad():
        for p in head.parameters():
            p.normal_()
    return head


def test_gate_off_gives_baseline():
    head = _head()
    with torch.no_grad():
        head.mlp_r[2].bias.fill_(-1e4)
    o = torch.randn(3, 10, 8, dtype=torch.float64)
    x = torch.rand(3, 10, 4, dtype=torch.float64) * 100
    parts = head.parts(o, x)
    assert torch.equal(parts.yhat, parts.baseline)


def test_delta_kernel_pass_through():
    head = AdaptiveFusion(4, 1, 1, kernel_size=5)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
        head.mlp_b[2].bias.fill_(-1e4)   # softplus -> 0
        head.mlp_r[2].bias.fill_(1e4)    # sigmoid -> 1
        head.kernel_logits[2] = 1e4      # one-hot at the centre
        head.w_res.fill_(1.0)
    x = torch.arange(7, dtype=torch.float64)[None, :, None]
    out = head(torch.zeros(1, 7, 4, dtype=torch.float64), x)
    torch.testing.assert_close(out, x, rtol=0, atol=1e-12)


def test_shape_and_numeric_errors():
    head = _head()
    with pytest.raises(ShapeError):
        head.parts(torch.zeros(1, 5, 8, dtype=torch.float64), torch.zeros(1, 5, 3, dtype=torch.float64))
    with pytest.raises(NumericError):
        head.parts(torch.zeros(1, 5, 8, dtype=torch.float64),
                   torch.full((1, 5, 4), float("inf"), dtype=torch.float64))


def test_plain_head_zero_weights():
    head = PlainHead(8, 2)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    assert not head(torch.randn(2, 5, 8, dtype=torch.float64)).any()


def test_fuse_accepts_arrays():
    head = _head()
    parts = fuse(np.zeros((1, 6, 8)), np.zeros((1, 6, 4)), head)
    assert torch.equal(parts.yhat, parts.baseline)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, st.sampled_from([1, 3, 5, 7]), elements=st.floats(-5, 5)))
def test_conv_matches_brute_force(a, logits):
    k = kernel_weights(torch.from_numpy(logits))
    out = same_conv(torch.from_numpy(a)[:, None], k)[:, 0].numpy()
    np.testing.assert_allclose(out, brute_conv(a.tolist(), k.tolist()), atol=1e-9)
    assert abs(k.sum().item() - 1) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_fusion_ranges(seed):
    head = _head(seed)
    g = torch.Generator().manual_seed(seed)
    o = torch.randn(2, 9, 8, generator=g, dtype=torch.float64) * 5
    x = torch.rand(2, 9, 4, generator=g, dtype=torch.float64) * 1e3
    p = head.parts(o, x)
    assert (p.baseline >= 0).all()
    assert ((p.gate > 0) & (p.gate < 1)).all()


def test_uniform_kernel_on_constant_input():
    a = torch.full((10, 1), 3.0, dtype=torch.float64)
    out = same_conv(a, kernel_weights(torch.zeros(5, dtype=torch.float64)))[:, 0]
    torch.testing.assert_close(out[2:-2], torch.full((6,), 3.0, dtype=torch.float64))
    assert (out[:2] <= 3.0).all() and (out[-2:] <= 3.0).all()
