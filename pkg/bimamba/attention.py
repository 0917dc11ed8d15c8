##############################################################################
# attention.py
# Multi-head self-attention baseline with the same token interface
##############################################################################
import dataclasses
import logging
from typing import Optional, Tuple

import torch
from einops import rearrange
from torch import nn

from bimamba import ops
from bimamba._exceptions import ConfigError, ShapeError

__all__ = [
    "AttnConfig",
    "default_heads",
    "AttentionBlock",
    "mhsa_forward",
    "attn_block_forward",
]

logger = logging.getLogger(__name__)

MLP_RATIO = 4


def default_heads(d_model: int) -> int:
    """6 heads at 384 features, 4 at 64, otherwise the largest of 8/6/4/2/1
    that divides `d_model`."""
    known = {384: 6, 64: 4}
    if d_model in known:
        return known[d_model]
    return next(h for h in (8, 6, 4, 2, 1) if d_model % h == 0)


@dataclasses.dataclass
class AttnConfig:
    d_model: int
    heads: int = 0
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if self.heads == 0:
            self.heads = default_heads(self.d_model)
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(
                f"d_model ({self.d_model}) is not divisible by"
                f" heads ({self.heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


class AttentionBlock(nn.Module):
    """
    Pre-norm transformer block: ``T + MHSA(LN(T))`` followed by
    ``T + MLP(LN(T))`` with a GELU MLP of width ``4 * d_model``.

    Used only for timing and memory comparisons, so there is no training
    path and no positional embedding.
    """

    def __init__(self, config: AttnConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        d, dtype = config.d_model, config.dtype

        def param(*shape):
            return nn.Parameter(torch.empty(*shape, dtype=dtype))

        self.attn_gain, self.attn_bias = param(d), param(d)
        self.qkv = param(d, 3 * d)
        self.out_proj = param(d, d)
        self.out_bias = param(d)
        self.mlp_gain, self.mlp_bias = param(d), param(d)
        self.mlp_in = param(d, MLP_RATIO * d)
        self.mlp_in_bias = param(MLP_RATIO * d)
        self.mlp_out = param(MLP_RATIO * d, d)
        self.mlp_out_bias = param(d)
        if seed is not None:
            self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("gain"):
                p.fill_(1.0)
            elif p.dim() == 1:
                p.zero_()
            else:
                noise = torch.rand(p.shape, generator=generator, dtype=p.dtype)
                p.copy_((noise * 2 - 1) * p.shape[0] ** -0.5)

    def attention(
        self, tokens: torch.Tensor, return_weights: bool = False
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """
        Scaled dot-product attention over ``(..., L, D)`` tokens.

        Returns:
            The projected output, and the ``(..., heads, L, L)`` attention
            weights if `return_weights` is set.
        """
        if tokens.shape[-1] != self.config.d_model:
            raise ShapeError(
                f"Tokens have {tokens.shape[-1]} features, attention"
                f" expects {self.config.d_model}"
            )
        q, k, v = (
            rearrange(t, "... l (h d) -> ... h l d", h=self.config.heads)
            for t in ops.matmul(tokens, self.qkv).chunk(3, dim=-1)
        )
        scores = ops.mul(
            ops.matmul(q, k.transpose(-1, -2)), self.config.head_dim**-0.5
        )
        weights = ops.softmax(scores, axis=-1)
        del scores
        context = rearrange(ops.matmul(weights, v), "... h l d -> ... l (h d)")
        out = ops.add(ops.matmul(context, self.out_proj), self.out_bias)
        return out, (weights if return_weights else None)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        normed = ops.layer_norm(tokens, self.attn_gain, self.attn_bias)
        attended, _ = self.attention(normed)
        tokens = ops.add(tokens, attended)
        del normed, attended
        normed = ops.layer_norm(tokens, self.mlp_gain, self.mlp_bias)
        hidden = ops.gelu(
            ops.add(ops.matmul(normed, self.mlp_in), self.mlp_in_bias)
        )
        mlp = ops.add(ops.matmul(hidden, self.mlp_out), self.mlp_out_bias)
        return ops.add(tokens, mlp)


def mhsa_forward(tokens: torch.Tensor, block: AttentionBlock) -> torch.Tensor:
    out, _ = block.attention(tokens)
    return out


def attn_block_forward(
    tokens: torch.Tensor, block: AttentionBlock
) -> torch.Tensor:
    return block(tokens)
