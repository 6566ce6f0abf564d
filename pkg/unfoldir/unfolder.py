"""
Hierarchical Unfolder - 层级展开复原网络

职责：
1. LevelPlan：各层通道数、U 形阶段路径、每阶段 PMM 块数
2. LevelTransform：W（3 → C₁）与 W⁻¹（C₁ → 3）逐像素通道映射
3. level_inputs：编码侧逐层下采样 ŷ，解码侧把更深层的输入上采样后残差相加
4. UnfoldingNet：按路径执行 K 个阶段（D-GDM 梯度步 + PMM），
   下行时保存跳连，上行时拼接 + 1×1 融合
5. RestorationSystem：退化向量来源（编码器或学习到的常数向量）+ 展开网络
6. DebugUnfolder / ista_mode_forward：显式矩阵 + 软阈值的单层 ISTA 运行

流程：
    y ──W──> ŷ₁ ──> [stage₀ @ level 0] ──down──> [stage₁ @ level 1] ...
                                         <──up + skip── ... ──W⁻¹──> x
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import head_count
from .config import ModelConfig
from .dgdm import DGDMStage, KeyDatabase, StageState
from .errors import ConfigError, ParameterError, ShapeError
from .log_utils import get_logger
from .pmm import ProximalMapping, ProxConfig

logger = get_logger("Unfolder")


def validate_schedule(schedule: Sequence[int], num_levels: int) -> None:
    """U 形路径：从第 0 层出发并回到第 0 层，每步 −1/0/+1，开始上行后不再下行，且到达最深层"""
    if not schedule:
        raise ConfigError("stage schedule is empty")
    if schedule[0] != 0 or schedule[-1] != 0:
        raise ConfigError(f"stage schedule must start and end at level 0: {list(schedule)}")
    if any(not 0 <= level < num_levels for level in schedule):
        raise ConfigError(f"stage schedule {list(schedule)} leaves levels 0..{num_levels - 1}")
    if max(schedule) != num_levels - 1:
        raise ConfigError(f"stage schedule {list(schedule)} never reaches level {num_levels - 1}")

    ascending = False
    for prev, cur in zip(schedule, schedule[1:]):
        step = cur - prev
        if abs(step) > 1:
            raise ConfigError(f"stage schedule jumps from level {prev} to {cur}")
        if step < 0:
            ascending = True
        elif step > 0 and ascending:
            raise ConfigError(f"stage schedule {list(schedule)} descends again after ascending")


@dataclass(frozen=True)
class LevelPlan:
    channels: Tuple[int, ...]
    schedule: Tuple[int, ...]
    blocks: Tuple[int, ...]

    def __post_init__(self):
        if len(self.blocks) != len(self.channels):
            raise ConfigError(f"{len(self.blocks)} block counts for {len(self.channels)} levels")
        for shallow, deep in zip(self.channels, self.channels[1:]):
            if deep != 2 * shallow:
                raise ConfigError(f"channels must double per level: {self.channels}")
        validate_schedule(self.schedule, len(self.channels))

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "LevelPlan":
        channels = tuple(cfg.base_channels * 2 ** level for level in range(cfg.num_levels))
        return cls(channels=channels, schedule=tuple(cfg.schedule()), blocks=tuple(cfg.blocks))

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    @property
    def num_stages(self) -> int:
        return len(self.schedule)

    @property
    def pmm_blocks(self) -> List[int]:
        return [self.blocks[level] for level in self.schedule]

    @property
    def decoder_side(self) -> List[bool]:
        """阶段 k 之前到过更深的层，则它在解码侧"""
        flags, deepest = [], -1
        for level in self.schedule:
            flags.append(deepest > level)
            deepest = max(deepest, level)
        return flags

    def levels(self, height: int, width: int) -> List[Tuple[int, int, int]]:
        factor = 2 ** (self.num_levels - 1)
        if height % factor or width % factor:
            raise ShapeError(f"input {height}×{width} is not divisible by 2^(levels-1) = {factor}")
        return [(height >> l, width >> l, c) for l, c in enumerate(self.channels)]


class LevelTransform(nn.Module):
    """
    W 与 W⁻¹

    weight: C×3（project 的 1×1 卷积核），inverse: 3×C（back_project 的 1×1 卷积核）
    init:
        orthonormal     - W 取随机矩阵 QR 分解的正交列，W⁻¹ = Wᵀ
        identity_padded - 前 3 个通道复制输入，其余为 0
        random          - 随机 W，W⁻¹ 为其伪逆
    """

    def __init__(self, channels: int, init: str = "orthonormal", learnable: bool = True, zero_inverse: bool = False):
        super().__init__()
        self.channels = channels
        if init == "orthonormal":
            q, _ = torch.linalg.qr(torch.randn(channels, 3))
            weight = q
        elif init == "identity_padded":
            weight = torch.zeros(channels, 3)
            weight[:3, :3] = torch.eye(3)
        elif init == "random":
            weight = torch.randn(channels, 3) / 3 ** 0.5
        else:
            raise ConfigError(f"unknown transform init {init!r}")
        inverse = torch.linalg.pinv(weight) if init == "random" else weight.t().clone()
        if zero_inverse:
            inverse = torch.zeros_like(inverse)

        self.weight = nn.Parameter(weight.contiguous(), requires_grad=learnable)
        self.inverse = nn.Parameter(inverse.contiguous(), requires_grad=learnable)

    def project(self, y: torch.Tensor) -> torch.Tensor:
        """y ×₃ W：3 通道图像 -> C₁ 通道特征"""
        if y.dim() != 4 or y.shape[1] != 3:
            raise ShapeError(f"project expects B×3×H×W, got {tuple(y.shape)}")
        return F.conv2d(y, self.weight[:, :, None, None])

    def back_project(self, x: torch.Tensor, clamp: bool = False) -> torch.Tensor:
        """x̂ ×₃ W⁻¹；clamp 只在最终输出时使用"""
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"back_project expects B×{self.channels}×H×W, got {tuple(x.shape)}")
        out = F.conv2d(x, self.inverse[:, :, None, None])
        return out.clamp(0.0, 1.0) if clamp else out

    @torch.no_grad()
    def round_trip_error(self, y: torch.Tensor) -> float:
        """max |W⁻¹(W y) − y|"""
        return float((self.back_project(self.project(y)) - y).abs().max())


def project(y: torch.Tensor, t: LevelTransform) -> torch.Tensor:
    return t.project(y)


def back_project(x_hat: torch.Tensor, t: LevelTransform) -> torch.Tensor:
    return t.back_project(x_hat)


class Downsample(nn.Module):
    """C -> 2C，空间减半"""

    def __init__(self, channels: int, sampler: str = "conv", bias: bool = False):
        super().__init__()
        if sampler == "conv":
            self.body = nn.Conv2d(channels, channels * 2, kernel_size=3, stride=2, padding=1, bias=bias)
        elif sampler == "pixel_shuffle":
            if channels % 2:
                raise ConfigError(f"pixel_shuffle sampler needs an even channel count, got {channels}")
            self.body = nn.Sequential(
                nn.Conv2d(channels, channels // 2, kernel_size=3, stride=1, padding=1, bias=bias),
                nn.PixelUnshuffle(2),
            )
        else:
            raise ConfigError(f"unknown sampler {sampler!r}")

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    """2C -> C，空间加倍"""

    def __init__(self, channels: int, sampler: str = "conv", bias: bool = False):
        super().__init__()
        self.sampler = sampler
        if sampler == "conv":
            self.body = nn.Conv2d(channels * 2, channels, kernel_size=1, bias=bias)
        elif sampler == "pixel_shuffle":
            self.body = nn.Sequential(
                nn.Conv2d(channels * 2, channels * 4, kernel_size=3, stride=1, padding=1, bias=bias),
                nn.PixelShuffle(2),
            )
        else:
            raise ConfigError(f"unknown sampler {sampler!r}")

    def forward(self, x):
        x = self.body(x)
        if self.sampler == "conv":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return x


class SkipFusion(nn.Module):
    """concat(skip, up) 后 1×1 降维；select_skip 时初始化为只取跳连分支"""

    def __init__(self, channels: int, select_skip: bool = True):
        super().__init__()
        self.reduce = nn.Conv2d(channels * 2, channels, kernel_size=1, bias=False)
        if select_skip:
            with torch.no_grad():
                self.reduce.weight.zero_()
                self.reduce.weight[:, :channels, 0, 0] = torch.eye(channels)

    def forward(self, skip, up):
        return self.reduce(torch.cat([skip, up], dim=1))


@dataclass
class LevelInputs:
    encoder: List[torch.Tensor]
    decoder: List[torch.Tensor]


class UnfoldingNet(nn.Module):
    def __init__(self, cfg: ModelConfig, embed_dim: int):
        super().__init__()
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.plan = LevelPlan.from_config(cfg)
        channels = self.plan.channels
        pairs = range(self.plan.num_levels - 1)

        self.transform = LevelTransform(
            channels[0], cfg.transform_init, cfg.learn_transform, zero_inverse=cfg.residual_output
        )
        self.keys = KeyDatabase(channels, cfg.num_keys, embed_dim, cfg.share_retrieval)

        self.input_down = nn.ModuleList(Downsample(channels[l], cfg.sampler, cfg.bias) for l in pairs)
        self.input_up = nn.ModuleList(Upsample(channels[l], cfg.sampler, cfg.bias) for l in pairs)
        self.state_down = nn.ModuleList(Downsample(channels[l], cfg.sampler, cfg.bias) for l in pairs)
        self.state_up = nn.ModuleList(Upsample(channels[l], cfg.sampler, cfg.bias) for l in pairs)
        self.skip_fuse = nn.ModuleList(SkipFusion(channels[l], cfg.identity_init) for l in pairs)

        stage_mode = "identity" if cfg.identity_debug else "attention"
        private_retrieval = not cfg.share_retrieval
        self.stages = nn.ModuleList()
        self.pmms = nn.ModuleList()
        for level in self.plan.schedule:
            c = channels[level]
            self.stages.append(
                DGDMStage(
                    c,
                    level=level,
                    heads=head_count(c, cfg.head_channels),
                    mode=stage_mode,
                    rho_init=cfg.rho_init,
                    bias=cfg.bias,
                    embed_dim=embed_dim if private_retrieval else None,
                    num_keys=cfg.num_keys if private_retrieval else None,
                    zero_init=cfg.identity_init,
                )
            )
            self.pmms.append(
                ProximalMapping(
                    ProxConfig("learned"),
                    channels=c,
                    num_blocks=self.plan.blocks[level],
                    head_channels=cfg.head_channels,
                    ffn_expansion=cfg.ffn_expansion,
                    bias=cfg.bias,
                    zero_init=cfg.identity_init,
                )
            )

    def check_input(self, y: torch.Tensor) -> None:
        if y.dim() != 4 or y.shape[1] != 3:
            raise ShapeError(f"expected B×3×H×W input, got {tuple(y.shape)}")
        self.plan.levels(y.shape[2], y.shape[3])

    def _expect(self, x: torch.Tensor, level: int, height: int, width: int) -> None:
        expected = (self.plan.channels[level], height >> level, width >> level)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"level {level} feature is {tuple(x.shape[1:])}, expected {expected}")

    def level_inputs(self, y_hat: torch.Tensor) -> LevelInputs:
        """编码侧 ŷ_l 逐层下采样；解码侧 ŷ_l = ŷ_l(编码) + up(ŷ_{l+1}(解码))"""
        encoder = [y_hat]
        for down in self.input_down:
            encoder.append(down(encoder[-1]))

        decoder = [None] * len(encoder)
        decoder[-1] = encoder[-1]
        for level in reversed(range(len(encoder) - 1)):
            decoder[level] = encoder[level] + self.input_up[level](decoder[level + 1])
        return LevelInputs(encoder=encoder, decoder=decoder)

    def _degradation(self, y: torch.Tensor, d: Optional[torch.Tensor]) -> torch.Tensor:
        if d is None:
            return y.new_zeros(y.shape[0], self.embed_dim)
        if d.shape != (y.shape[0], self.embed_dim):
            raise ShapeError(f"degradation vectors {tuple(d.shape)} do not match batch {y.shape[0]}×{self.embed_dim}")
        return d.to(y.dtype)

    def forward(self, y: torch.Tensor, d: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        展开前向

        Args:
            y: B×3×H×W 退化图像（H、W 能被 2^(L-1) 整除）
            d: B×D 退化向量；None 时取零向量（检索权重均匀）

        Returns:
            B×3×H×W，未截断（restore 在最终输出时截断到 [0, 1]）
        """
        self.check_input(y)
        height, width = y.shape[-2:]
        d = self._degradation(y, d)

        y_hat = self.transform.project(y)
        inputs = self.level_inputs(y_hat)

        x, level = y_hat, 0
        skips = {}
        for k, stage_level in enumerate(self.plan.schedule):
            # 层间切换
            if stage_level == level + 1:
                skips[level] = x
                x = self.state_down[level](x)
            elif stage_level == level - 1:
                x = self.skip_fuse[stage_level](skips[stage_level], self.state_up[stage_level](x))
            level = stage_level

            y_level = inputs.decoder[level] if self.plan.decoder_side[k] else inputs.encoder[level]
            self._expect(x, level, height, width)
            self._expect(y_level, level, height, width)

            z = self.stages[k](x, y_level, d, self.keys)
            x = self.pmms[k](z)

        out = self.transform.back_project(x)
        return y + out if self.cfg.residual_output else out

    def first_stage_residual(self, y: torch.Tensor, d: Optional[torch.Tensor] = None) -> torch.Tensor:
        """第一阶段的 Φᵀ(Φ̃(x̂⁽⁰⁾, d_I) − ŷ₁)，x̂⁽⁰⁾ = project(y)"""
        self.check_input(y)
        y_hat = self.transform.project(y)
        inputs = self.level_inputs(y_hat)
        return self.stages[0].residual(y_hat, inputs.encoder[0], self._degradation(y, d), self.keys)


class ConstantDegradation(nn.Module):
    """no_encoder 预设：用一个学习到的单位向量代替 d_I"""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.vector = nn.Parameter(torch.randn(embed_dim))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.vector, dim=0).expand(y.shape[0], -1)


class RestorationSystem(nn.Module):
    """退化向量来源 + 展开网络；frozen 时退化向量不参与梯度"""

    def __init__(self, model: UnfoldingNet, degradation: nn.Module, frozen: bool):
        super().__init__()
        self.model = model
        self.degradation = degradation
        self.frozen = frozen
        if frozen:
            degradation.requires_grad_(False)

    @property
    def transform(self) -> LevelTransform:
        return self.model.transform

    @property
    def stages(self) -> nn.ModuleList:
        return self.model.stages

    def degradation_vector(self, y: torch.Tensor) -> torch.Tensor:
        if self.frozen:
            with torch.no_grad():
                return self.degradation(y)
        return self.degradation(y)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.model(y, self.degradation_vector(y))

    def first_stage_residual(self, y: torch.Tensor, d: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.model.first_stage_residual(y, self.degradation_vector(y) if d is None else d)


ImageLike = Union[np.ndarray, torch.Tensor]


@torch.no_grad()
def restore(y: ImageLike, encoder: Optional[nn.Module], model: UnfoldingNet) -> ImageLike:
    """
    复原一张图像（或一个 batch）

    Args:
        y: H×W×3 numpy 图像，或 B×3×H×W 张量
        encoder: y -> d_I 的模块（DegradationEncoder / ConstantDegradation），None 时用零向量
        model: UnfoldingNet

    Returns:
        与输入同类型、同形状的复原结果，截断到 [0, 1]
    """
    dtype = next(model.parameters()).dtype
    as_array = isinstance(y, np.ndarray)
    if as_array:
        if y.ndim != 3 or y.shape[2] != 3:
            raise ShapeError(f"expected an H×W×3 image, got {y.shape}")
        batch = torch.from_numpy(np.ascontiguousarray(y.transpose(2, 0, 1))).to(dtype).unsqueeze(0)
    else:
        batch = y.to(dtype)

    model.eval()
    d = None
    if encoder is not None:
        encoder.eval()
        d = encoder(batch)
    out = model(batch, d).clamp(0.0, 1.0)

    if as_array:
        return out[0].double().cpu().numpy().transpose(1, 2, 0)
    return out


# ---------------------------------------------------------------------------
# ISTA 调试配置


class DebugUnfolder(nn.Module):
    """单层、无层变换：Φ̃ 绑定显式矩阵 Φ，Φᵀ 绑定其转置，PMM 为软阈值 ρλ"""

    def __init__(self, phi: torch.Tensor, rho: float, lam: float, num_stages: int):
        super().__init__()
        if num_stages < 1:
            raise ParameterError(f"K must be >= 1, got {num_stages}")
        if rho < 0 or lam < 0:
            raise ParameterError(f"rho and lam must be >= 0, got rho={rho}, lam={lam}")
        self.stages = nn.ModuleList(DGDMStage.explicit(phi, rho) for _ in range(num_stages))
        self.pmms = nn.ModuleList(ProximalMapping(ProxConfig("soft_threshold", rho * lam)) for _ in range(num_stages))

    def is_debug_mode(self) -> bool:
        return all(stage.is_explicit for stage in self.stages) and all(
            pmm.cfg.mode == "soft_threshold" for pmm in self.pmms
        )

    def forward(self, y: torch.Tensor, x0: torch.Tensor) -> List[torch.Tensor]:
        x = x0.reshape(1, -1, 1, 1)
        y_hat = y.reshape(1, -1, 1, 1)
        iterates = []
        for stage, pmm in zip(self.stages, self.pmms):
            x = pmm(stage.stage_update(StageState(x, y_hat)))
            iterates.append(x.reshape(-1))
        return iterates


def ista_mode_forward(
    y: np.ndarray,
    phi: np.ndarray,
    rho: float,
    lam: float,
    num_stages: int,
    x0: Optional[np.ndarray] = None,
    unfolder: Optional[nn.Module] = None,
) -> List[np.ndarray]:
    """
    以 ISTA 调试配置运行展开骨架

    Args:
        y: m 维观测
        phi: m×n 显式矩阵
        rho, lam: 步长与 L1 权重（软阈值 ρλ）
        num_stages: K
        x0: 初值，默认全零
        unfolder: 可选的现成网络，必须处于调试配置

    Returns:
        K 个迭代结果 x⁽¹⁾…x⁽ᴷ⁾（float64 numpy 向量）
    """
    phi_t = torch.as_tensor(np.asarray(phi, dtype=np.float64))
    if phi_t.dim() != 2:
        raise ShapeError(f"Phi must be a matrix, got shape {tuple(phi_t.shape)}")
    y_t = torch.as_tensor(np.asarray(y, dtype=np.float64)).reshape(-1)
    if y_t.numel() != phi_t.shape[0]:
        raise ShapeError(f"y has {y_t.numel()} entries, Phi has {phi_t.shape[0]} rows")
    x0_t = torch.zeros(phi_t.shape[1], dtype=torch.float64) if x0 is None else torch.as_tensor(
        np.asarray(x0, dtype=np.float64)
    ).reshape(-1)

    if unfolder is None:
        unfolder = DebugUnfolder(phi_t, rho, lam, num_stages)
    elif not isinstance(unfolder, DebugUnfolder) or not unfolder.is_debug_mode():
        raise ConfigError("ista_mode_forward needs the explicit-matrix / soft-threshold debug configuration")

    with torch.no_grad():
        iterates = unfolder.double()(y_t, x0_t)
    return [x.numpy().copy() for x in iterates]
