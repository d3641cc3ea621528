"""Output heads: the adaptive fusion head and the plain linear head."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError


def stable_softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


def open_sigmoid(x: torch.Tensor) -> torch.Tensor:
    """Sigmoid kept strictly inside (0, 1); plain float64 sigmoid rounds to 1 past ~37."""
    info = torch.finfo(x.dtype)
    return torch.clamp(torch.sigmoid(x), min=info.tiny, max=1.0 - info.eps / 2)


def kernel_weights(kernel_logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(kernel_logits, dim=-1)


def same_conv(a: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """``out[h] = sum_u k_u * a[h - u]`` for ``u`` in ``[-K//2, K//2]``, zero padded.

    ``a`` is ``(..., L, C)`` and the kernel is shared across the channel axis;
    ``k[j]`` is the weight for offset ``u = j - K//2``.
    """
    K = k.shape[-1]
    if K % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {K}")
    P = K // 2
    L = a.shape[-2]
    padded = F.pad(a, (0, 0, P, P))
    out = torch.zeros_like(a)
    for j in range(K):
        start = 2 * P - j
        out = out + k[j] * padded[..., start:start + L, :]
    return out


class FusionParts(NamedTuple):
    yhat: torch.Tensor
    baseline: torch.Tensor
    gate: torch.Tensor
    smoothed: torch.Tensor


def _mlp(d: int, hidden: int, out: int, dtype) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, hidden, dtype=dtype), nn.GELU(),
                         nn.Linear(hidden, out, dtype=dtype))


class AdaptiveFusion(nn.Module):
    """``yhat = softplus(MLP_b(o)) + sigmoid(MLP_r(o)) * (k * (x_res @ W_res))``.

    ``x_res`` must be in raw count units; the kernel ``k`` is a softmax over
    ``kernel_logits`` applied along time with same-length zero padding.
    """

    def __init__(self, d_model: int, c_res: int, c_out: int, kernel_size: int = 5,
                 hidden: int | None = None, dtype=torch.float64):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {kernel_size}")
        hidden = hidden or d_model
        if c_res % c_out:
            raise ShapeError(f"C_res={c_res} is not a multiple of C_out={c_out}")
        self.c_res, self.c_out = c_res, c_out
        self.mlp_b = _mlp(d_model, hidden, c_out, dtype)
        self.mlp_r = _mlp(d_model, hidden, c_out, dtype)
        self.w_res = nn.Parameter(torch.zeros(c_res, c_out, dtype=dtype))
        self.kernel_logits = nn.Parameter(torch.zeros(kernel_size, dtype=dtype))

    def pass_through_init(self) -> None:
        """Each output channel starts by reading its own first reservation column.

        A random-sign ``W_res`` often starts the reservation term negative, and the
        gate then learns to close instead of the weights learning to flip.
        """
        n_lags = self.c_res // self.c_out
        with torch.no_grad():
            self.w_res.zero_()
            for c in range(self.c_out):
                self.w_res[c * n_lags, c] = 1.0
            self.kernel_logits.zero_()

    def parts(self, o_dec: torch.Tensor, x_dec_raw: torch.Tensor) -> FusionParts:
        if o_dec.shape[:-1] != x_dec_raw.shape[:-1] or x_dec_raw.shape[-1] != self.c_res:
            raise ShapeError(f"o_dec {tuple(o_dec.shape)} and x_dec_raw "
                             f"{tuple(x_dec_raw.shape)} are inconsistent (C_res={self.c_res})")
        baseline = stable_softplus(self.mlp_b(o_dec))
        gate = open_sigmoid(self.mlp_r(o_dec))
        smoothed = same_conv(x_dec_raw @ self.w_res, kernel_weights(self.kernel_logits))
        yhat = baseline + gate * smoothed
        if not torch.isfinite(yhat).all():
            raise NumericError("adaptive fusion produced non-finite predictions")
        return FusionParts(yhat, baseline, gate, smoothed)

    def forward(self, o_dec: torch.Tensor, x_dec_raw: torch.Tensor) -> torch.Tensor:
        return self.parts(o_dec, x_dec_raw).yhat


class PlainHead(nn.Module):
    """Per-time-step linear map ``d -> C_out`` (no nonnegativity)."""

    def __init__(self, d_model: int, c_out: int, dtype=torch.float64):
        super().__init__()
        self.proj = nn.Linear(d_model, c_out, dtype=dtype)

    def forward(self, o_dec: torch.Tensor, x_dec_raw: torch.Tensor | None = None) -> torch.Tensor:
        if o_dec.shape[-1] != self.proj.in_features:
            raise ShapeError(f"o_dec feature dim {o_dec.shape[-1]} != {self.proj.in_features}")
        return self.proj(o_dec)


def fuse(o_dec, x_dec_raw, head: AdaptiveFusion) -> FusionParts:
    """Functional entry point returning the prediction and its decomposition."""
    return head.parts(torch.as_tensor(o_dec), torch.as_tensor(x_dec_raw))
