"""Inverse-embedding encoder/decoder Transformer for slot-level forecasting.

Tokens are channels (each channel's whole window is one token) unless
``use_inverse_embedding`` is off, in which case tokens are time steps.  Everything
runs in float64 so the analytic gradients can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn

from .dataset import WindowSpec
from .errors import ConfigError, NumericError, ShapeError
from .fusion import AdaptiveFusion, FusionParts, PlainHead
from .timegrid import D_TEMP

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    spec: WindowSpec = field(default_factory=WindowSpec)
    d_model: int = 16
    n_enc_layers: int = 1
    n_dec_layers: int = 1
    n_heads: int = 2
    ffn_dim: int = 64
    dropout: float = 0.1
    kernel_size: int = 5
    use_encoder: bool = True
    use_inverse_embedding: bool = True
    use_adaptive_fusion: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kernel_size % 2 != 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.n_dec_layers < 1 or (self.use_encoder and self.n_enc_layers < 1):
            raise ConfigError("need at least one decoder layer (and encoder layer if enabled)")

    def n_tokens(self, which: str) -> int:
        spec = self.spec
        if which == "enc":
            return spec.c_real + D_TEMP if self.use_inverse_embedding else spec.enc_len
        return spec.c_res + D_TEMP if self.use_inverse_embedding else spec.dec_len


class SeededDropout(nn.Module):
    """Inverted dropout drawing masks from a generator owned by the model."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0:
            return x
        keep = 1.0 - self.p
        mask = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) < keep
        return x * mask / keep


class TempEmbed(nn.Module):
    """``Dropout(Linear(concat(x, marks)^T))``: one token per channel.

    With ``inverse=False`` the transpose is skipped and each time step becomes a
    token projected from its ``C + 4`` features.
    """

    def __init__(self, length: int, n_channels: int, d_model: int, dropout: float,
                 inverse: bool = True):
        super().__init__()
        self.length, self.n_channels, self.inverse = length, n_channels, inverse
        in_features = length if inverse else n_channels + D_TEMP
        self.linear = nn.Linear(in_features, d_model, dtype=DTYPE)
        self.dropout = SeededDropout(dropout)

    def forward(self, values: torch.Tensor, marks: torch.Tensor) -> torch.Tensor:
        if values.shape[-2:] != (self.length, self.n_channels) or marks.shape[-2:] != (self.length, D_TEMP):
            raise ShapeError(f"expected values (*, {self.length}, {self.n_channels}) and marks "
                             f"(*, {self.length}, {D_TEMP}); got {tuple(values.shape)}, "
                             f"{tuple(marks.shape)}")
        z = torch.cat([values, marks], dim=-1)
        if self.inverse:
            z = z.transpose(-1, -2)
        return self.dropout(self.linear(z))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over tokens.

    The key projection has no bias: a key bias shifts every score in a softmax row
    by the same amount, so it never affects the output and its gradient is zero.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads, self.d_head = n_heads, d_model // n_heads
        self.q = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.k = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.v = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.o = nn.Linear(d_model, d_model, dtype=DTYPE)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.n_heads, self.d_head).transpose(-2, -3)

    def weights(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """Attention weights ``(*, heads, n_query, n_key)``; rows sum to one."""
        q, k = self._split(self.q(query)), self._split(self.k(memory))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_head), dim=-1)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        attn = self.weights(query, memory)
        out = attn @ self._split(self.v(memory))
        *lead, h, n, dh = out.shape
        return self.o(out.transpose(-2, -3).reshape(*lead, n, h * dh))


def _ffn(d_model: int, ffn_dim: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_model, ffn_dim, dtype=DTYPE), nn.GELU(),
                         SeededDropout(dropout), nn.Linear(ffn_dim, d_model, dtype=DTYPE))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ffn = _ffn(d_model, ffn_dim, dropout)
        self.drop1, self.drop2 = SeededDropout(dropout), SeededDropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop1(self.attn(h, h))
        return x + self.drop2(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    """Self-attention, optional cross-attention to encoder memory, then FFN.

    No causal mask: tokens are channels, so a temporal ordering does not exist.
    """

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float, cross: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.drop1 = SeededDropout(dropout)
        if cross:
            self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)
            self.cross_attn = MultiHeadAttention(d_model, n_heads)
            self.drop2 = SeededDropout(dropout)
        else:
            self.cross_attn = None
        self.norm3 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ffn = _ffn(d_model, ffn_dim, dropout)
        self.drop3 = SeededDropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop1(self.self_attn(h, h))
        if memory is not None:
            if self.cross_attn is None:
                raise ConfigError("decoder layer built without cross-attention got encoder memory")
            x = x + self.drop2(self.cross_attn(self.norm2(x), memory))
        return x + self.drop3(self.ffn(self.norm3(x)))


def _check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations in {where}")
    return x


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout)
                                    for _ in range(cfg.n_enc_layers))
        self.norm = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            h = layer(h)
        return _check_finite(self.norm(h), "encoder")


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout, cross=cfg.use_encoder)
            for _ in range(cfg.n_dec_layers))
        self.norm = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, h: torch.Tensor, memory: torch.Tensor | None = None) -> torch.Tensor:
        for layer in self.layers:
            h = layer(h, memory)
        return _check_finite(self.norm(h), "decoder")


class TokensToTime(nn.Module):
    """Learned ``N_tokens -> L_dec`` map applied per feature."""

    def __init__(self, n_tokens: int, dec_len: int):
        super().__init__()
        self.n_tokens = n_tokens
        self.linear = nn.Linear(n_tokens, dec_len, dtype=DTYPE)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] != self.n_tokens:
            raise ShapeError(f"expected {self.n_tokens} tokens, got {tokens.shape[-2]}")
        return self.linear(tokens.transpose(-1, -2)).transpose(-1, -2)


class Batch(NamedTuple):
    x_enc: torch.Tensor
    x_enc_mark: torch.Tensor
    x_dec: torch.Tensor
    x_dec_mark: torch.Tensor
    x_dec_raw: torch.Tensor
    y: torch.Tensor | None = None


class ForecastNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 3407):
        super().__init__()
        self.cfg = cfg
        spec = cfg.spec
        inv = cfg.use_inverse_embedding
        if cfg.use_encoder:
            self.enc_embed = TempEmbed(spec.enc_len, spec.c_real, cfg.d_model, cfg.dropout, inv)
            self.encoder = TransformerEncoder(cfg)
        else:
            self.enc_embed = self.encoder = None
        self.dec_embed = TempEmbed(spec.dec_len, spec.c_res, cfg.d_model, cfg.dropout, inv)
        self.decoder = TransformerDecoder(cfg)
        self.to_time = TokensToTime(cfg.n_tokens("dec"), spec.dec_len) if inv else None
        if cfg.use_adaptive_fusion:
            self.head = AdaptiveFusion(cfg.d_model, spec.c_res, spec.out_channels, cfg.kernel_size)
        else:
            self.head = PlainHead(cfg.d_model, spec.out_channels)
        self.generator = torch.Generator()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform(+-1/sqrt(fan_in)) for every linear map; LayerNorm at identity;
        the fusion head starts as a reservation pass-through."""
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.uniform_(-bound, bound, generator=g)
                    if module.bias is not None:
                        module.bias.uniform_(-bound, bound, generator=g)
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()
                elif isinstance(module, AdaptiveFusion):
                    module.pass_through_init()
        self.generator.manual_seed(int(seed) + 1)
        for module in self.modules():
            if isinstance(module, SeededDropout):
                module.generator = self.generator

    # -- pipeline stages -------------------------------------------------

    def encode(self, x_enc: torch.Tensor, x_enc_mark: torch.Tensor) -> torch.Tensor:
        if self.encoder is None:
            raise ConfigError("model was built without an encoder")
        return self.encoder(self.enc_embed(x_enc, x_enc_mark))

    def decode(self, x_dec: torch.Tensor, x_dec_mark: torch.Tensor,
               memory: torch.Tensor | None) -> torch.Tensor:
        """Decoder output in time layout ``(*, L_dec, d)``."""
        tokens = self.decoder(self.dec_embed(x_dec, x_dec_mark), memory)
        return self.to_time(tokens) if self.to_time is not None else tokens

    def parts(self, batch: Batch) -> FusionParts | torch.Tensor:
        memory = self.encode(batch.x_enc, batch.x_enc_mark) if self.cfg.use_encoder else None
        o_dec = self.decode(batch.x_dec, batch.x_dec_mark, memory)
        if isinstance(self.head, AdaptiveFusion):
            return self.head.parts(o_dec, batch.x_dec_raw)
        return self.head(o_dec)

    def forward(self, batch: Batch) -> torch.Tensor:
        out = self.parts(batch)
        return out.yhat if isinstance(out, FusionParts) else out


# ------------------------------------------------------------- gradient check


class GradCheckResult(NamedTuple):
    max_rel_error: float
    n_coords: int
    per_tensor: dict[str, float]


def grad_check(loss_fn: Callable[[], torch.Tensor], model: nn.Module, epsilon: float = 1e-5,
               n_coords: int = 256, seed: int = 0) -> GradCheckResult:
    """Compare autograd gradients with central finite differences.

    Every named parameter contributes at least one coordinate; the rest of the
    budget is drawn uniformly over all coordinates.  Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        analytic[name] = g.reshape(-1)

    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    picks: list[tuple[str, int]] = [(n, int(rng.integers(params[n].numel()))) for n in names]
    extra = max(0, n_coords - len(picks))
    flat = rng.choice(sizes.sum(), size=min(extra, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    for f in flat:
        t = int(np.searchsorted(bounds, f, side="right"))
        picks.append((names[t], int(f - (bounds[t] - sizes[t]))))

    worst, per_tensor = 0.0, {}
    with torch.no_grad():
        for name, idx in picks:
            view = params[name].data.view(-1)
            orig = view[idx].item()
            view[idx] = orig + epsilon
            f_plus = float(loss_fn())
            view[idx] = orig - epsilon
            f_minus = float(loss_fn())
            view[idx] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            per_tensor[name] = max(per_tensor.get(name, 0.0), rel)
            worst = max(worst, rel)
    return GradCheckResult(worst, len(picks), per_tensor)


def with_flags(cfg: ModelConfig, **flags) -> ModelConfig:
    return replace(cfg, **flags)
