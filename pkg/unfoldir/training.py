"""
Training - 复原网络训练、评估与消融预设

职责：
1. lr_at：线性 warmup + 余弦退火到 lr_min（逐 step，配合 LambdaLR 使用）
2. 消融预设：no_encoder / frozen_encoder / tuned_encoder / serial_baseline
3. train_restorer：AdamW + L1 损失，每个 epoch 记录 loss 与验证集 PSNR，写检查点
4. evaluate：逐图像 PSNR/SSIM（附带退化输入的 PSNR），按类型与整体聚合

预设：
    no_encoder      - d_I 替换为学习到的常数单位向量
    frozen_encoder  - 随机初始化（未微调）的编码器，冻结；给出编码器检查点是配置错误
    tuned_encoder   - 对比微调后的编码器检查点，冻结
    serial_baseline - 单层、所有阶段都在第 0 层的串行展开网络，使用微调后的编码器
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from .checkpoints import CheckpointManager, WEIGHTS_FILE, load_into, load_parameters, read_metadata, resolve_checkpoint
from .config import EncoderConfig, ModelConfig, TrainConfig, UnfoldirConfig, config_hash
from .dataset import DatasetManifest, PairDataset, _is_tty, is_validation, read_png, to_image, to_tensor
from .encoder import DegradationEncoder, check_manifest_kinds, load_encoder
from .errors import CheckpointError, ConfigError, DatasetError
from .log_utils import get_logger
from .metrics import ImageMetric, MetricReport, psnr, ssim
from .substrate import parameter_count, seed_everything
from .unfolder import ConstantDegradation, RestorationSystem, UnfoldingNet

logger = get_logger("Trainer")

PRESETS = ("no_encoder", "frozen_encoder", "tuned_encoder", "serial_baseline")
NEEDS_ENCODER_CHECKPOINT = ("tuned_encoder", "serial_baseline")


def lr_at(step: float, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """
    第 step 步的学习率

    warmup 段从 0 线性升到 lr；之后 lr_min + (lr − lr_min)·½(1 + cos(π·progress))，
    progress 在最后一步到达 1，超出后保持 lr_min。
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warmup:
        return config.lr * step / warmup

    span = total - warmup
    progress = 1.0 if span <= 0 else min(1.0, (step - warmup) / span)
    return config.lr_min + (config.lr - config.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def serial_model_config(cfg: ModelConfig) -> ModelConfig:
    """串行基线：一层，阶段数与层级路径相同，全部在第 0 层"""
    stages = len(cfg.schedule())
    return cfg.model_copy(
        update={"num_levels": 1, "stage_schedule": [0] * stages, "blocks": [cfg.blocks[0]]}
    )


def build_system(
    config: UnfoldirConfig, preset: str, encoder: Optional[DegradationEncoder] = None
) -> RestorationSystem:
    """
    按预设组装 退化向量来源 + 展开网络

    Args:
        config: 完整配置
        preset: 预设名
        encoder: tuned_encoder / serial_baseline 需要的已微调编码器（frozen_encoder 不接受）

    Returns:
        RestorationSystem
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {list(PRESETS)}")
    if preset in NEEDS_ENCODER_CHECKPOINT and encoder is None:
        raise ConfigError(f"preset {preset} needs an encoder checkpoint")

    if preset == "no_encoder":
        degradation = ConstantDegradation(config.encoder.embed_dim)
        frozen = False
    elif preset == "frozen_encoder":
        if encoder is not None:
            raise ConfigError("preset frozen_encoder uses an untuned encoder; drop the encoder checkpoint")
        degradation = DegradationEncoder(config.encoder, config.label_list())
        frozen = True
    else:
        degradation = encoder
        frozen = True

    embed_dim = degradation.embed_dim if isinstance(degradation, DegradationEncoder) else config.encoder.embed_dim
    model_cfg = serial_model_config(config.model) if preset == "serial_baseline" else config.model
    model = UnfoldingNet(model_cfg, embed_dim)
    return RestorationSystem(model, degradation, frozen=frozen)


def _train_loader(manifest: DatasetManifest, config: UnfoldirConfig, seed: int, generator: torch.Generator):
    train = config.train
    dataset = PairDataset(
        manifest,
        config.data.kinds,
        split="train",
        crop_size=train.crop_size,
        flip_horizontal=train.flip_horizontal,
        flip_vertical=train.flip_vertical,
        seed=seed,
    )
    if len(dataset) == 0:
        raise DatasetError("manifest has no training records")
    loader = DataLoader(dataset, batch_size=train.batch_size, shuffle=True, generator=generator, num_workers=0)
    return dataset, loader


@torch.no_grad()
def validation_psnr(system: RestorationSystem, dataset: PairDataset) -> Optional[float]:
    if len(dataset) == 0:
        return None
    system.eval()
    values = []
    for item in range(len(dataset)):
        sample = dataset[item]
        out = system(sample["degraded"].unsqueeze(0)).clamp(0.0, 1.0)
        values.append(psnr(to_image(out[0]), to_image(sample["clean"])))
    return float(np.mean(values))


@dataclass
class RestorerTrainResult:
    system: RestorationSystem
    epoch_losses: List[float] = field(default_factory=list)
    val_psnrs: List[Optional[float]] = field(default_factory=list)
    round_trip_error: float = 0.0
    checkpoint_id: Optional[str] = None


def train_restorer(
    manifest: DatasetManifest,
    config: UnfoldirConfig,
    preset: Optional[str] = None,
    encoder_checkpoint=None,
    run_dir: Optional[Path] = None,
    seed: Optional[int] = None,
) -> RestorerTrainResult:
    """
    训练复原网络

    Args:
        manifest: 训练数据清单
        config: 完整配置
        preset: 预设名，默认 train.preset
        encoder_checkpoint: 编码器检查点目录或其运行目录
        run_dir: 输出目录；给出时写检查点与 history.json
        seed: 随机种子，默认 train.seed

    Returns:
        RestorerTrainResult
    """
    preset = preset or config.train.preset
    seed = config.train.seed if seed is None else seed
    check_manifest_kinds(manifest, config)

    encoder, encoder_metadata = None, None
    if encoder_checkpoint is not None and preset == "frozen_encoder":
        raise ConfigError("preset frozen_encoder uses an untuned encoder; drop the encoder checkpoint")
    if encoder_checkpoint is not None and preset != "no_encoder":
        encoder_dir = resolve_checkpoint(encoder_checkpoint, "encoder")
        encoder, _ = load_encoder(encoder_dir)
        encoder_metadata = read_metadata(encoder_dir)

    generator = seed_everything(seed)
    system = build_system(config, preset, encoder)
    logger.info(
        f"Preset {preset}: {parameter_count(system.model)} restorer parameters, "
        f"stage levels {list(system.model.plan.schedule)}"
    )

    train_set, loader = _train_loader(manifest, config, seed, generator)
    val_set = PairDataset(manifest, config.data.kinds, split="val", seed=seed)

    trainable = [p for p in system.parameters() if p.requires_grad]
    cfg = config.train
    optimizer = torch.optim.AdamW(trainable, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    steps_per_epoch = len(loader)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: lr_at(step, cfg, steps_per_epoch) / cfg.lr
    )

    result = RestorerTrainResult(system)
    history = []
    for epoch in range(cfg.epochs):
        train_set.set_epoch(epoch)
        system.train()
        if system.frozen:
            system.degradation.eval()

        losses = []
        for batch in loader:
            optimizer.zero_grad(set_to_none=True)
            loss = F.l1_loss(system(batch["degraded"]), batch["clean"])
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(loss.item())

        epoch_loss = float(np.mean(losses))
        val_psnr = validation_psnr(system, val_set)
        result.epoch_losses.append(epoch_loss)
        result.val_psnrs.append(val_psnr)
        history.append({"epoch": epoch, "loss": epoch_loss, "val_psnr": val_psnr, "lr": optimizer.param_groups[0]["lr"]})
        val_text = "nan" if val_psnr is None else f"{val_psnr:.2f}"
        logger.info(f"epoch={epoch} loss={epoch_loss:.5f} val_psnr={val_text}")

    system.eval()
    probe = train_set[0]["degraded"].unsqueeze(0)
    result.round_trip_error = system.transform.round_trip_error(probe)
    logger.info(f"Level transform round-trip error: {result.round_trip_error:.3e}")

    if run_dir is not None:
        manager = CheckpointManager(run_dir)
        manager.write_history(history)
        extra = {
            "config": config.model_dump(mode="json"),
            "preset": preset,
            "round_trip_error": result.round_trip_error,
        }
        if encoder_metadata is not None:
            extra["encoder_config"] = encoder_metadata["config"]["encoder"]
            extra["labels"] = encoder_metadata["labels"]
            extra["encoder_checkpoint_id"] = encoder_metadata["checkpoint_id"]
        result.checkpoint_id = manager.save_checkpoint(
            "restorer",
            system,
            config_hash(config),
            seed,
            description=f"preset {preset}, {cfg.epochs} epochs",
            extra=extra,
        )
    return result


def load_restorer(checkpoint_dir) -> RestorationSystem:
    """从检查点目录重建 RestorationSystem（结构取自 metadata）"""
    metadata = read_metadata(checkpoint_dir)
    if metadata.get("kind") != "restorer":
        raise CheckpointError(f"{checkpoint_dir} is not a restorer checkpoint")
    config = UnfoldirConfig(**metadata["config"])
    preset = metadata["preset"]

    encoder = None
    if "encoder_config" in metadata:
        encoder = DegradationEncoder(EncoderConfig(**metadata["encoder_config"]), metadata["labels"])
    elif preset in NEEDS_ENCODER_CHECKPOINT:
        raise CheckpointError(f"{checkpoint_dir}: preset {preset} checkpoint carries no encoder description")

    system = build_system(config, preset, encoder)
    _, tensors = load_parameters(Path(checkpoint_dir) / WEIGHTS_FILE)
    load_into(system, tensors)
    system.eval()
    return system


@torch.no_grad()
def evaluate(
    system: RestorationSystem,
    manifest: DatasetManifest,
    split: str = "val",
    kinds: Optional[Sequence[str]] = None,
) -> MetricReport:
    """
    逐图像评估

    Args:
        system: 复原系统
        manifest: 测试数据清单
        split: "val" / "train" / "all"
        kinds: 只评估这些退化类型（逐类型单独测试），默认全部

    Returns:
        MetricReport（每条记录一行：复原 PSNR/SSIM 与退化输入 PSNR）
    """
    system.eval()
    dtype = next(system.parameters()).dtype
    indices = [
        i for i, record in enumerate(manifest.records)
        if (split == "all" or (split == "val") == is_validation(i)) and (kinds is None or record.kind in kinds)
    ]

    report = MetricReport()
    for i in tqdm(indices, desc="evaluate", disable=not _is_tty()):
        record = manifest.records[i]
        clean = read_png(manifest.resolve(record.clean_path))
        degraded = read_png(manifest.resolve(record.degraded_path))
        out = system(to_tensor(degraded, dtype=dtype).unsqueeze(0)).clamp(0.0, 1.0)
        restored = to_image(out[0])
        report.add(
            ImageMetric(
                id=Path(record.degraded_path).stem,
                kind=record.kind,
                psnr_db=psnr(restored, clean),
                ssim=ssim(restored, clean),
                input_psnr_db=psnr(degraded, clean),
            )
        )

    for name, entry in report.aggregates().items():
        logger.info(
            f"{name}: count={int(entry['count'])} psnr_db={entry['psnr_db']:.2f} "
            f"(input {entry.get('input_psnr_db', float('nan')):.2f}) ssim={entry['ssim']:.4f}"
        )
    return report


def evaluate_checkpoint(checkpoint, manifest: DatasetManifest, split: str = "val") -> MetricReport:
    """检查点目录（或运行目录）-> MetricReport"""
    return evaluate(load_restorer(resolve_checkpoint(checkpoint, "restorer")), manifest, split)


def mean_gain(report: MetricReport, kinds: Sequence[str]) -> Dict[str, float]:
    """每个类型 复原 PSNR − 输入 PSNR（报告里没有该类型时跳过）"""
    aggregates = report.aggregates()
    return {
        kind: aggregates[kind]["psnr_db"] - aggregates[kind]["input_psnr_db"]
        for kind in kinds
        if kind in aggregates and "input_psnr_db" in aggregates[kind]
    }
