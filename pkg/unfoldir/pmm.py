"""
PMM - 近端映射模块

职责：
1. learned：一串 TransformerBlock 作为学习到的去噪器
2. soft_threshold：ρλ‖·‖₁ 的精确近端算子（ISTA 对照运行用）
3. identity：直接返回输入
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .blocks import TransformerBlock, head_count
from .errors import ParameterError

PROX_MODES = ("learned", "soft_threshold", "identity")


@dataclass(frozen=True)
class ProxConfig:
    """mode 为 soft_threshold 时必须给出 threshold = ρλ ≥ 0，其余模式不能给"""

    mode: str = "learned"
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.mode not in PROX_MODES:
            raise ParameterError(f"unknown prox mode {self.mode!r}; expected one of {PROX_MODES}")
        if self.mode == "soft_threshold":
            if self.threshold is None or self.threshold < 0:
                raise ParameterError(f"soft_threshold needs a threshold >= 0, got {self.threshold}")
        elif self.threshold is not None:
            raise ParameterError(f"threshold is only valid in soft_threshold mode (mode={self.mode!r})")


def soft_threshold(z: torch.Tensor, threshold: float) -> torch.Tensor:
    """sign(z)·max(|z| − t, 0)"""
    return torch.sign(z) * torch.clamp(z.abs() - threshold, min=0.0)


def pmm_forward(z: torch.Tensor, cfg: ProxConfig, blocks: Optional[Sequence[nn.Module]] = None) -> torch.Tensor:
    """
    近端映射

    Args:
        z: 梯度步输出 ẑ
        cfg: ProxConfig
        blocks: learned 模式下依次应用的 TransformerBlock（至少一个）

    Returns:
        x̂
    """
    if cfg.mode == "identity":
        return z
    if cfg.mode == "soft_threshold":
        return soft_threshold(z, cfg.threshold)
    if not blocks:
        raise ParameterError("learned prox mode needs at least one transformer block")
    for block in blocks:
        z = block(z)
    return z


class ProximalMapping(nn.Module):
    def __init__(
        self,
        cfg: ProxConfig,
        channels: int = 0,
        num_blocks: int = 0,
        head_channels: int = 16,
        ffn_expansion: float = 2.66,
        bias: bool = False,
        zero_init: bool = True,
    ):
        super().__init__()
        self.cfg = cfg
        if cfg.mode == "learned":
            if num_blocks < 1:
                raise ParameterError(f"learned prox mode needs blocks >= 1, got {num_blocks}")
            heads = head_count(channels, head_channels)
            self.blocks = nn.ModuleList(
                TransformerBlock(channels, heads, ffn_expansion, bias, zero_init=zero_init)
                for _ in range(num_blocks)
            )
        else:
            self.blocks = nn.ModuleList()

    def forward(self, z):
        return pmm_forward(z, self.cfg, self.blocks)
