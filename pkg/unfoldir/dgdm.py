"""
D-GDM - 退化引导的梯度下降模块

职责：
1. KeyDatabase：每层 M 个可学习的通道 key 向量 + 检索投影 Linear(D → M)
2. retrieve_key：softmax(Linear(d_I)) 加权求和得到当前层的 key
3. DegradationAttention（Φ̃）：Q、V 来自 x̂，K 来自检索到的 key（空间广播后投影）
4. RefineAttention（Φᵀ）：普通 MDTA 自注意力
5. DGDMStage.stage_update：ẑ = x̂ − ρ·Φᵀ(Φ̃(x̂, d_I) − ŷ)

调试用变换：
- IdentityTransform：Φ̃、Φᵀ 都取恒等
- MatrixTransform：显式矩阵作用在 B×n×1×1 的通道向量上（ISTA 对照）
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import MDTA, channel_attention, check_heads, zero_module
from .errors import ParameterError, ShapeError


class KeyDatabase(nn.Module):
    """
    退化 key 数据库

    keys[l]: M×C_l 参数；projections[l]: Linear(D, M)，同一层的所有阶段共享
    """

    def __init__(self, level_channels: Sequence[int], num_keys: int, embed_dim: int, share_retrieval: bool = True):
        super().__init__()
        if num_keys < 1:
            raise ParameterError(f"num_keys must be >= 1, got {num_keys}")
        self.num_keys = num_keys
        self.embed_dim = embed_dim
        self.share_retrieval = share_retrieval
        self.keys = nn.ParameterList(nn.Parameter(torch.randn(num_keys, c)) for c in level_channels)
        self.projections = nn.ModuleList(
            nn.Linear(embed_dim, num_keys) for _ in level_channels
        ) if share_retrieval else nn.ModuleList()

    @property
    def num_levels(self) -> int:
        return len(self.keys)

    def projection(self, level: int) -> nn.Linear:
        if not self.share_retrieval:
            raise ParameterError("retrieval projections are owned by the stages (share_retrieval=False)")
        return self.projections[level]


def retrieval_weights(d: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    """softmax(Linear(d_I))：B×M，每行和为 1"""
    if d.shape[-1] != projection.in_features:
        raise ShapeError(f"degradation vector has {d.shape[-1]} dims, projection expects {projection.in_features}")
    return F.softmax(projection(d), dim=-1)


def mix_keys(weights: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Σ_m w_m · K_m：B×M 与 M×C -> B×C"""
    return weights @ keys


def retrieve_key(
    d: torch.Tensor, db: KeyDatabase, level: int, projection: Optional[nn.Linear] = None
) -> torch.Tensor:
    """
    检索当前层的退化 key

    Args:
        d: B×D 退化向量
        db: KeyDatabase
        level: 层号（0 起）
        projection: 阶段私有的检索投影（share_retrieval=False 时）

    Returns:
        B×C_l 的 key
    """
    if not 0 <= level < db.num_levels:
        raise ParameterError(f"key database has no level {level}")
    projection = projection if projection is not None else db.projection(level)
    return mix_keys(retrieval_weights(d, projection), db.keys[level])


class DegradationAttention(nn.Module):
    """Φ̃(x̂, key)：多头转置注意力，Query/Value 来自 x̂，Key 来自 key"""

    shape_preserving = True

    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        check_heads(dim, heads)
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))

        self.qv = nn.Conv2d(dim, dim * 2, kernel_size=1, bias=bias)
        self.qv_dwconv = nn.Conv2d(dim * 2, dim * 2, kernel_size=3, stride=1, padding=1, groups=dim * 2, bias=bias)
        self.k = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)
        self.k_dwconv = nn.Conv2d(dim, dim, kernel_size=3, stride=1, padding=1, groups=dim, bias=bias)
        self.project_out = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)

    def _attend(self, x, key):
        if key.dim() != 2 or key.shape[1] != x.shape[1]:
            raise ShapeError(f"key {tuple(key.shape)} cannot broadcast over {x.shape[1]} channels")
        q, v = self.qv_dwconv(self.qv(x)).chunk(2, dim=1)
        key_map = key[:, :, None, None].expand(-1, -1, *x.shape[-2:])
        k = self.k_dwconv(self.k(key_map))
        return channel_attention(q, k, v, self.heads, self.temperature)

    def attention_weights(self, x, key):
        return self._attend(x, key)[1]

    def forward(self, x, key):
        out, _ = self._attend(x, key)
        return self.project_out(out)


class RefineAttention(MDTA):
    """Φᵀ：特征细化用的 MDTA 自注意力"""

    shape_preserving = True


class IdentityTransform(nn.Module):
    shape_preserving = True

    def forward(self, x, key=None):
        return x


class MatrixTransform(nn.Module):
    """显式线性算子：out[:, i] = Σ_j A[i, j]·x[:, j]（逐像素作用于通道）"""

    shape_preserving = False

    def __init__(self, matrix: torch.Tensor):
        super().__init__()
        self.register_buffer("matrix", matrix.clone())

    def forward(self, x, key=None):
        if x.shape[1] != self.matrix.shape[1]:
            raise ShapeError(f"matrix expects {self.matrix.shape[1]} channels, got {x.shape[1]}")
        return torch.einsum("ij,bjhw->bihw", self.matrix.to(x.dtype), x)


class StepSize(nn.Module):
    """ρ：learnable 时经 softplus 保持为正；fixed 时为常数（允许 0）"""

    def __init__(self, rho: float = 0.5, learnable: bool = True):
        super().__init__()
        self.learnable = learnable
        if learnable:
            if rho <= 0:
                raise ParameterError(f"learnable rho must start > 0, got {rho}")
            self.raw = nn.Parameter(torch.tensor(math.log(math.expm1(rho))))
        else:
            if rho < 0:
                raise ParameterError(f"rho must be >= 0, got {rho}")
            self.register_buffer("value", torch.tensor(float(rho), dtype=torch.float64))

    def forward(self) -> torch.Tensor:
        if self.learnable:
            return F.softplus(self.raw)
        return self.value


@dataclass
class StageState:
    """x̂ 与 ŷ；rho 非空时覆盖阶段自己的步长"""

    x_hat: torch.Tensor
    y_hat: torch.Tensor
    rho: Optional[float] = None


class DGDMStage(nn.Module):
    """
    一个展开阶段的梯度步

    mode:
        attention - Φ̃ 为 DegradationAttention，Φᵀ 为 RefineAttention
        identity  - 两者都取恒等（调试）
        explicit  - 由 explicit() 绑定显式矩阵 Φ 与 Φᵀ
    """

    def __init__(
        self,
        channels: int,
        level: int = 0,
        heads: int = 1,
        mode: str = "attention",
        rho_init: float = 0.5,
        learn_rho: bool = True,
        bias: bool = False,
        embed_dim: Optional[int] = None,
        num_keys: Optional[int] = None,
        zero_init: bool = True,
    ):
        super().__init__()
        self.level = level
        self.mode = mode
        self.step = StepSize(rho_init, learn_rho)
        self.retrieval = None

        if mode == "attention":
            self.degradation = DegradationAttention(channels, heads, bias)
            self.refine = RefineAttention(channels, heads, bias)
            if zero_init:
                zero_module(self.refine.project_out)
            if embed_dim is not None and num_keys is not None:
                self.retrieval = nn.Linear(embed_dim, num_keys)
        elif mode == "identity":
            self.degradation = IdentityTransform()
            self.refine = IdentityTransform()
        elif mode != "explicit":
            raise ParameterError(f"unknown stage mode {mode!r}")

    @classmethod
    def explicit(cls, phi: torch.Tensor, rho: float) -> "DGDMStage":
        stage = cls(phi.shape[1], mode="explicit", rho_init=rho, learn_rho=False)
        stage.degradation = MatrixTransform(phi)
        stage.refine = MatrixTransform(phi.transpose(0, 1))
        return stage

    @property
    def is_explicit(self) -> bool:
        return self.mode == "explicit"

    def key(self, d: Optional[torch.Tensor], db: Optional[KeyDatabase], batch: int, like: torch.Tensor):
        if self.mode != "attention":
            return None
        if db is None:
            raise ParameterError("attention stages need a key database")
        projection = self.retrieval if self.retrieval is not None else db.projection(self.level)
        if d is None:
            d = like.new_zeros(batch, projection.in_features)
        return retrieve_key(d.to(like.dtype), db, self.level, projection)

    def residual(self, x_hat, y_hat, d=None, db=None) -> torch.Tensor:
        """Φᵀ(Φ̃(x̂, d_I) − ŷ)"""
        if self.degradation.shape_preserving and x_hat.shape != y_hat.shape:
            raise ShapeError(f"x_hat {tuple(x_hat.shape)} and y_hat {tuple(y_hat.shape)} differ")
        key = self.key(d, db, x_hat.shape[0], x_hat)
        degraded = self.degradation(x_hat, key)
        if degraded.shape != y_hat.shape:
            raise ShapeError(f"Φ̃(x_hat) {tuple(degraded.shape)} does not match y_hat {tuple(y_hat.shape)}")
        return self.refine(degraded - y_hat)

    def stage_update(self, state: StageState, d=None, db=None) -> torch.Tensor:
        """ẑ = x̂ − ρ·Φᵀ(Φ̃(x̂, d_I) − ŷ)"""
        rho = self.step() if state.rho is None else state.rho
        return state.x_hat - rho * self.residual(state.x_hat, state.y_hat, d, db)

    def forward(self, x_hat, y_hat, d=None, db=None):
        return self.stage_update(StageState(x_hat, y_hat), d, db)


def stage_update(stage: DGDMStage, state: StageState, d: Optional[torch.Tensor] = None, db: Optional[KeyDatabase] = None):
    return stage.stage_update(state, d, db)


def degradation_transform(module: DegradationAttention, x_hat: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
    return module(x_hat, key)


def refine_transform(module: RefineAttention, r: torch.Tensor) -> torch.Tensor:
    return module(r)

