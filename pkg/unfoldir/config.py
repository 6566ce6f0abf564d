"""
Config - 配置层

职责：
1. 解析分节的 key = value 配置文件（[data] [encoder] [model] [train]）
2. 用 pydantic 校验每一节，未知键直接报错
3. 计算配置哈希（写入检查点头部）
4. 从 .env / 环境变量读取运行时开关

配置示例见 configs/desk.cfg。
"""

import configparser
import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .degradations import DEFAULT_LABELS, KIND_PRESETS, DEGRADATION_KINDS
from .errors import ConfigError

# 自动加载 .env 文件
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass


def _split_csv(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Section):
    """[data] - 合成数据集"""

    kinds: List[str] = list(KIND_PRESETS["NHRBL"])
    count: int = 2000
    image_size: int = 64
    noise_sigmas: List[float] = [15.0, 25.0, 50.0]
    clean_dir: Optional[str] = None
    dataset_seed: int = 0
    workers: int = 1

    @field_validator("kinds", mode="before")
    @classmethod
    def _expand_kinds(cls, value):
        if isinstance(value, str) and value.strip().upper() in KIND_PRESETS:
            return list(KIND_PRESETS[value.strip().upper()])
        return _split_csv(value)

    @field_validator("clean_dir", mode="before")
    @classmethod
    def _empty_dir(cls, value):
        return value or None

    @field_validator("noise_sigmas", mode="before")
    @classmethod
    def _split_sigmas(cls, value):
        return _split_csv(value)

    @field_validator("kinds")
    @classmethod
    def _known_kinds(cls, value):
        unknown = [kind for kind in value if kind not in DEGRADATION_KINDS]
        if unknown:
            raise ValueError(f"unknown degradation kinds: {unknown}")
        if not value:
            raise ValueError("at least one degradation kind is required")
        return value

    @field_validator("count", "image_size", "workers")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("noise_sigmas")
    @classmethod
    def _non_negative_sigmas(cls, value):
        if not value or any(sigma < 0 for sigma in value):
            raise ValueError("noise sigmas must be a non-empty list of values >= 0")
        return value


class EncoderConfig(_Section):
    """[encoder] - 退化编码器与对比微调"""

    embed_dim: int = 64
    widths: List[int] = [16, 32, 64, 64]
    labels: List[str] = []
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    crop_size: int = 32
    backbone_warm_epochs: int = 10
    adapter_ratio: float = 1.0
    tau_init: float = 10.0
    gamma: float = 100.0
    contrastive_denominator: Literal["batch", "labels"] = "batch"

    @field_validator("widths", "labels", mode="before")
    @classmethod
    def _split_lists(cls, value):
        return _split_csv(value)

    @field_validator("lr", "tau_init", "gamma")
    @classmethod
    def _strictly_positive(cls, value):
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("adapter_ratio")
    @classmethod
    def _ratio_range(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("adapter_ratio must lie in [0, 1]")
        return value

    @field_validator("crop_size")
    @classmethod
    def _min_crop(cls, value):
        if value < 16:
            raise ValueError("encoder crop_size must be >= 16")
        return value


class ModelConfig(_Section):
    """[model] - 层级展开网络结构"""

    base_channels: int = 16
    num_levels: int = 2
    stage_schedule: List[int] = []
    blocks: List[int] = [2, 2]
    num_keys: int = 5
    head_channels: int = 16
    ffn_expansion: float = 2.66
    rho_init: float = 0.5
    bias: bool = False
    transform_init: Literal["orthonormal", "identity_padded", "random"] = "orthonormal"
    learn_transform: bool = True
    sampler: Literal["conv", "pixel_shuffle"] = "conv"
    share_retrieval: bool = True
    identity_init: bool = True
    identity_debug: bool = False
    residual_output: bool = False

    @field_validator("stage_schedule", "blocks", mode="before")
    @classmethod
    def _split_lists(cls, value):
        return _split_csv(value)

    @field_validator("base_channels", "num_levels", "num_keys", "head_channels")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("rho_init")
    @classmethod
    def _positive_rho(cls, value):
        if value <= 0:
            raise ValueError("rho_init must be > 0 (softplus reparameterisation)")
        return value

    @model_validator(mode="after")
    def _check_levels(self):
        if len(self.blocks) != self.num_levels:
            raise ValueError(
                f"blocks lists {len(self.blocks)} levels, num_levels is {self.num_levels}"
            )
        if any(count < 1 for count in self.blocks):
            raise ValueError("every level needs at least one transformer block")
        if self.base_channels < 3 and self.transform_init == "identity_padded":
            raise ValueError("identity_padded transform needs base_channels >= 3")
        return self

    def schedule(self) -> List[int]:
        """显式 schedule 或默认 U 形路径（下行 0..L-1，再上行 L-1..0）"""
        if self.stage_schedule:
            return list(self.stage_schedule)
        down = list(range(self.num_levels))
        return down + down[::-1]


class TrainConfig(_Section):
    """[train] - 复原网络训练（L1 损失，线性 warmup + 余弦退火）"""

    lr: float = 2e-4
    lr_min: float = 1e-6
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    epochs: int = 40
    warmup_epochs: int = 3
    batch_size: int = 8
    crop_size: int = 32
    flip_horizontal: bool = True
    flip_vertical: bool = True
    seed: int = 0
    loss: Literal["l1"] = "l1"
    preset: Literal["no_encoder", "frozen_encoder", "tuned_encoder", "serial_baseline"] = "tuned_encoder"

    @field_validator("betas", mode="before")
    @classmethod
    def _split_betas(cls, value):
        return _split_csv(value)

    @field_validator("lr")
    @classmethod
    def _positive_lr(cls, value):
        if value <= 0:
            raise ValueError("lr must be > 0")
        return value

    @field_validator("epochs", "warmup_epochs")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("must be >= 0")
        return value

    @field_validator("batch_size", "crop_size")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) > epochs ({self.epochs})")
        if self.lr_min > self.lr:
            raise ValueError("lr_min must not exceed lr")
        return self


class UnfoldirConfig(_Section):
    """完整配置（四个小节）"""

    data: DataConfig = Field(default_factory=DataConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="after")
    def _cross_section(self):
        factor = 2 ** (self.model.num_levels - 1)
        if self.train.crop_size % factor:
            raise ValueError(
                f"train.crop_size {self.train.crop_size} not divisible by 2^(levels-1) = {factor}"
            )
        if self.data.image_size % factor:
            raise ValueError(
                f"data.image_size {self.data.image_size} not divisible by 2^(levels-1) = {factor}"
            )
        if self.train.crop_size > self.data.image_size or self.encoder.crop_size > self.data.image_size:
            raise ValueError("crop sizes must not exceed data.image_size")
        if self.encoder.labels and len(self.encoder.labels) != len(self.data.kinds):
            raise ValueError(
                f"{len(self.encoder.labels)} labels declared for {len(self.data.kinds)} kinds"
            )
        return self

    def label_list(self) -> List[str]:
        """每个退化类型对应一个文本标签（顺序与 data.kinds 一致）"""
        if self.encoder.labels:
            return list(self.encoder.labels)
        return [DEFAULT_LABELS[kind] for kind in self.data.kinds]

    def with_seed(self, seed: Optional[int]) -> "UnfoldirConfig":
        """命令行 --seed 同时覆盖数据集种子和训练种子"""
        if seed is None:
            return self
        updated = self.model_copy(deep=True)
        updated.data.dataset_seed = seed
        updated.train.seed = seed
        return updated


SECTIONS = ("data", "encoder", "model", "train")


def parse_config_text(text: str, source: str = "<string>") -> UnfoldirConfig:
    """
    解析配置文本

    Args:
        text: 配置内容
        source: 出错时显示的来源名

    Returns:
        校验后的 UnfoldirConfig
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # 保留键的大小写
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e

    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown sections {unknown}; expected {list(SECTIONS)}")

    raw = {name: dict(parser.items(name)) for name in parser.sections()}
    try:
        return UnfoldirConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path: Optional[str]) -> UnfoldirConfig:
    """读取配置文件；path 为 None 时返回默认（desk）配置"""
    if path is None:
        return UnfoldirConfig()
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    return parse_config_text(config_path.read_text(encoding="utf-8"), source=str(config_path))


def config_hash(config: UnfoldirConfig) -> str:
    """配置的规范 JSON 的 sha256 前 16 位"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def apply_runtime_env() -> None:
    """UNFOLDIR_NUM_THREADS -> torch 线程数"""
    threads = os.getenv("UNFOLDIR_NUM_THREADS")
    if threads:
        import torch
        torch.set_num_threads(int(threads))
