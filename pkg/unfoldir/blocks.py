"""
Blocks - 通道注意力 Transformer 组件

职责：
1. LayerNorm（BiasFree / WithBias，NCHW 上按通道归一化）
2. 通道注意力核心 channel_attention（多头、转置注意力、可学习温度）
3. MDTA 自注意力、GDFN 门控前馈网络
4. TransformerBlock：x + MDTA(LN(x))，再 + GDFN(LN(·))

zero_init=True 时输出投影置零，整个块在初始化时是恒等映射。
"""

import numbers
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ShapeError


def to_3d(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "b c h w -> b (h w) c")


def to_4d(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return rearrange(x, "b (h w) c -> b c h w", h=h, w=w)


def head_count(channels: int, head_channels: int) -> int:
    """每 head_channels 个通道一个头，至少 1 个"""
    return max(1, channels // head_channels)


def check_heads(channels: int, heads: int) -> None:
    if heads < 1 or channels % heads:
        raise ShapeError(f"{heads} heads do not divide {channels} channels")


class BiasFreeLayerNorm(nn.Module):
    def __init__(self, normalized_shape):
        super().__init__()
        if isinstance(normalized_shape, numbers.Integral):
            normalized_shape = (normalized_shape,)
        self.weight = nn.Parameter(torch.ones(torch.Size(normalized_shape)))

    def forward(self, x):
        sigma = x.var(-1, keepdim=True, unbiased=False)
        return x / torch.sqrt(sigma + 1e-5) * self.weight


class WithBiasLayerNorm(nn.Module):
    def __init__(self, normalized_shape):
        super().__init__()
        if isinstance(normalized_shape, numbers.Integral):
            normalized_shape = (normalized_shape,)
        self.weight = nn.Parameter(torch.ones(torch.Size(normalized_shape)))
        self.bias = nn.Parameter(torch.zeros(torch.Size(normalized_shape)))

    def forward(self, x):
        mu = x.mean(-1, keepdim=True)
        sigma = x.var(-1, keepdim=True, unbiased=False)
        return (x - mu) / torch.sqrt(sigma + 1e-5) * self.weight + self.bias


class LayerNorm(nn.Module):
    def __init__(self, dim: int, norm_type: str = "WithBias"):
        super().__init__()
        if norm_type == "BiasFree":
            self.body = BiasFreeLayerNorm(dim)
        else:
            self.body = WithBiasLayerNorm(dim)

    def forward(self, x):
        h, w = x.shape[-2:]
        return to_4d(self.body(to_3d(x)), h, w)


def channel_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, temperature: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    转置（通道）注意力

    Args:
        q, k, v: B×C×H×W
        heads: 头数
        temperature: heads×1×1 可学习温度

    Returns:
        (输出 B×C×H×W, 注意力权重 B×heads×(C/heads)×(C/heads))
    """
    h, w = q.shape[-2:]
    q = rearrange(q, "b (head c) h w -> b head c (h w)", head=heads)
    k = rearrange(k, "b (head c) h w -> b head c (h w)", head=heads)
    v = rearrange(v, "b (head c) h w -> b head c (h w)", head=heads)

    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)

    attn = (q @ k.transpose(-2, -1)) * temperature
    attn = attn.softmax(dim=-1)

    out = rearrange(attn @ v, "b head c (h w) -> b (head c) h w", head=heads, h=h, w=w)
    return out, attn


class MDTA(nn.Module):
    """Multi-Dconv head transposed self-attention：Q、K、V 都来自输入"""

    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        check_heads(dim, heads)
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))

        self.qkv = nn.Conv2d(dim, dim * 3, kernel_size=1, bias=bias)
        self.qkv_dwconv = nn.Conv2d(dim * 3, dim * 3, kernel_size=3, stride=1, padding=1, groups=dim * 3, bias=bias)
        self.project_out = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)

    def _attend(self, x):
        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        return channel_attention(q, k, v, self.heads, self.temperature)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        return self._attend(x)[1]

    def forward(self, x):
        out, _ = self._attend(x)
        return self.project_out(out)


class GDFN(nn.Module):
    """Gated-Dconv feed-forward network"""

    def __init__(self, dim: int, ffn_expansion: float, bias: bool = False):
        super().__init__()
        hidden = int(round(dim * ffn_expansion))

        self.project_in = nn.Conv2d(dim, hidden * 2, kernel_size=1, bias=bias)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, kernel_size=3, stride=1, padding=1, groups=hidden * 2, bias=bias)
        self.project_out = nn.Conv2d(hidden, dim, kernel_size=1, bias=bias)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class TransformerBlock(nn.Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        ffn_expansion: float = 2.66,
        bias: bool = False,
        norm_type: str = "WithBias",
        zero_init: bool = False,
    ):
        super().__init__()
        self.dim = dim
        self.norm1 = LayerNorm(dim, norm_type)
        self.attn = MDTA(dim, heads, bias)
        self.norm2 = LayerNorm(dim, norm_type)
        self.ffn = GDFN(dim, ffn_expansion, bias)
        if zero_init:
            zero_module(self.attn.project_out)
            zero_module(self.ffn.project_out)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        return self.attn.attention_weights(self.norm1(x))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def transformer_block_forward(block: TransformerBlock, x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1] != block.dim:
        raise ShapeError(f"expected a B×{block.dim}×H×W feature map, got {tuple(x.shape)}")
    return block(x)
