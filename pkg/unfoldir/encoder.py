"""
Degradation Encoder - 退化编码器

职责：
1. 图像编码器：4 个 stride-2 卷积块（GELU）+ 全局平均池化 + Linear 到 D 维，
   再经 AdapterMLP（按 adapter_ratio 与原特征混合），输出单位向量 d_I
2. 文本端：标签字符串 -> 可学习嵌入表 + AdapterMLP
3. score_labels：softmax(γ · cos(d_I, 标签嵌入))
4. contrastive_loss：batch 内图文对比损失，τ 以 log 形式存储
5. finetune：AdamW 对比微调（主干可先预热若干 epoch，之后冻结）

使用示例：
    encoder = DegradationEncoder(config.encoder, config.label_list())
    probs = score_labels(encoder, images, LabelSet(config.label_list()))
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .checkpoints import CheckpointManager, load_into, load_parameters, read_metadata, WEIGHTS_FILE
from .config import EncoderConfig, UnfoldirConfig, config_hash
from .dataset import DatasetManifest, PairDataset, to_tensor
from .errors import ConfigError, DatasetError, ParameterError, ShapeError
from .log_utils import get_logger
from .substrate import parameter_count, seed_everything

logger = get_logger("Encoder")

MIN_IMAGE_SIZE = 16


class ConvBackbone(nn.Module):
    """toy 图像主干：stride-2 卷积 ×4 + GAP + Linear"""

    def __init__(self, widths: Sequence[int], embed_dim: int):
        super().__init__()
        layers, in_channels = [], 3
        for width in widths:
            layers += [nn.Conv2d(in_channels, width, kernel_size=3, stride=2, padding=1), nn.GELU()]
            in_channels = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(in_channels, embed_dim)

    def forward(self, x):
        return self.head(self.pool(self.features(x)).flatten(1))


class AdapterMLP(nn.Module):
    """三层 MLP，层间 LayerNorm + GELU"""

    def __init__(self, dim: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or dim
        self.fc = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.LayerNorm(hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.LayerNorm(hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, x):
        return self.fc(x)


@dataclass
class LabelSet:
    """有序标签列表（热力图的列、分类的类别）"""

    labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = list(self.labels)
        if len(set(self.labels)) != len(self.labels):
            raise ParameterError(f"duplicate labels in {self.labels}")

    def __len__(self) -> int:
        return len(self.labels)


class LabelTable(nn.Module):
    """文本编码器替身：标签 -> M×D 嵌入表，再经文本端 adapter"""

    def __init__(self, labels: Sequence[str], embed_dim: int):
        super().__init__()
        self.labels = list(labels)
        self.embedding = nn.Embedding(len(self.labels), embed_dim)
        self.adapter = AdapterMLP(embed_dim)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ParameterError(f"unknown label {label!r}; known labels: {self.labels}") from None

    def forward(self, indices: Optional[torch.Tensor] = None) -> torch.Tensor:
        """原始（未归一化）标签嵌入"""
        if indices is None:
            indices = torch.arange(len(self.labels), device=self.embedding.weight.device)
        return self.adapter(self.embedding(indices))


class DegradationEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, labels: Sequence[str]):
        super().__init__()
        self.embed_dim = cfg.embed_dim
        self.adapter_ratio = cfg.adapter_ratio
        self.gamma = cfg.gamma
        self.backbone = ConvBackbone(cfg.widths, cfg.embed_dim)
        self.image_adapter = AdapterMLP(cfg.embed_dim)
        self.text = LabelTable(labels, cfg.embed_dim)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    @property
    def labels(self) -> List[str]:
        return self.text.labels

    def raw_image_embedding(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4 or y.shape[1] != 3:
            raise ShapeError(f"expected B×3×H×W images, got {tuple(y.shape)}")
        if min(y.shape[-2:]) < MIN_IMAGE_SIZE:
            raise ShapeError(f"image {tuple(y.shape[-2:])} is below the {MIN_IMAGE_SIZE}×{MIN_IMAGE_SIZE} minimum")
        features = self.backbone(y)
        return self.adapter_ratio * self.image_adapter(features) + (1.0 - self.adapter_ratio) * features

    def encode(self, y: torch.Tensor) -> torch.Tensor:
        """B×3×H×W -> B×D 单位向量"""
        return F.normalize(self.raw_image_embedding(y), dim=-1)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.encode(y)

    def label_embeddings(self, labels: Optional[Sequence[str]] = None) -> torch.Tensor:
        """M×D 单位向量，顺序与 labels 一致（默认全部标签）"""
        if labels is None:
            return F.normalize(self.text(), dim=-1)
        indices = torch.tensor([self.text.index(label) for label in labels], device=self.log_tau.device)
        return F.normalize(self.text(indices), dim=-1)


ImageLike = Union[np.ndarray, torch.Tensor]


def _as_batch(y: ImageLike, dtype: torch.dtype) -> Tuple[torch.Tensor, bool]:
    if isinstance(y, np.ndarray):
        return to_tensor(y, dtype=dtype).unsqueeze(0), True
    if y.dim() == 3:
        return y.to(dtype).unsqueeze(0), True
    return y.to(dtype), False


@torch.no_grad()
def encode_image(encoder: DegradationEncoder, y: ImageLike) -> torch.Tensor:
    """单张图像（H×W×3 数组或 3×H×W 张量）-> D 维单位向量 d_I"""
    encoder.eval()
    batch, _ = _as_batch(y, encoder.log_tau.dtype)
    return encoder.encode(batch)[0]


def similarity_probabilities(image_emb: torch.Tensor, label_emb: torch.Tensor, gamma: float) -> torch.Tensor:
    """softmax_i(γ · cos(image, label_i))；输入可以是未归一化的嵌入"""
    if gamma <= 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    if label_emb.shape[0] == 0:
        raise ParameterError("label set is empty")
    cos = F.normalize(image_emb, dim=-1) @ F.normalize(label_emb, dim=-1).t()
    return F.softmax(gamma * cos, dim=-1)


@torch.no_grad()
def score_labels(
    encoder: DegradationEncoder, y: ImageLike, labels: Union[LabelSet, Sequence[str]], gamma: Optional[float] = None
) -> torch.Tensor:
    """
    标签相似度

    Args:
        encoder: DegradationEncoder
        y: 单张图像或 B×3×H×W
        labels: LabelSet 或标签列表
        gamma: 锐化系数，默认 encoder.gamma

    Returns:
        单张图像时 M 维概率，batch 时 B×M
    """
    names = labels.labels if isinstance(labels, LabelSet) else list(labels)
    if not names:
        raise ParameterError("label set is empty")
    encoder.eval()
    batch, single = _as_batch(y, encoder.log_tau.dtype)
    probs = similarity_probabilities(encoder.encode(batch), encoder.label_embeddings(names), gamma or encoder.gamma)
    return probs[0] if single else probs


def contrastive_loss_from_embeddings(
    image_emb: torch.Tensor, text_emb: torch.Tensor, tau, targets: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """
    −(1/B)·Σ_i log softmax_j(τ·cos(I_i, T_j))[target_i]

    text_emb 为 batch 中每个样本对应的标签嵌入时（targets 默认 arange(B)），即 batch 内对比；
    text_emb 为完整标签表时，targets 为标签下标。
    """
    batch = image_emb.shape[0]
    if batch == 0:
        raise ParameterError("contrastive loss needs at least one sample")
    if float(tau) <= 0:
        raise ParameterError(f"tau must be > 0, got {float(tau)}")
    logits = tau * (F.normalize(image_emb, dim=-1) @ F.normalize(text_emb, dim=-1).t())
    if targets is None:
        targets = torch.arange(batch, device=image_emb.device)
    return F.cross_entropy(logits, targets)


def contrastive_loss(
    encoder: DegradationEncoder,
    images: torch.Tensor,
    label_indices: torch.Tensor,
    tau: Optional[torch.Tensor] = None,
    denominator: str = "batch",
) -> torch.Tensor:
    """
    对比微调损失

    Args:
        images: B×3×H×W 退化图像
        label_indices: B 个标签下标
        tau: 温度，默认 encoder.tau（可学习）
        denominator: "batch" - 分母取 batch 中各样本的标签嵌入；"labels" - 分母取全部标签
    """
    tau = encoder.tau if tau is None else tau
    image_emb = encoder.raw_image_embedding(images)
    if denominator == "batch":
        return contrastive_loss_from_embeddings(image_emb, encoder.text(label_indices), tau)
    if denominator == "labels":
        return contrastive_loss_from_embeddings(image_emb, encoder.text(), tau, targets=label_indices)
    raise ParameterError(f"unknown contrastive denominator {denominator!r}")


@torch.no_grad()
def classification_accuracy(encoder: DegradationEncoder, dataset: PairDataset) -> float:
    """argmax(score_labels) == 真实类型 的比例；数据集为空时返回 nan"""
    if len(dataset) == 0:
        return float("nan")
    encoder.eval()
    correct = 0
    for item in range(len(dataset)):
        sample = dataset[item]
        probs = score_labels(encoder, sample["degraded"], encoder.labels)
        correct += int(int(probs.argmax()) == int(sample["kind"]))
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# 微调


@dataclass
class EncoderTrainResult:
    encoder: DegradationEncoder
    step_losses: List[float]
    epoch_losses: List[float]
    val_accuracy: float
    checkpoint_id: Optional[str] = None


def check_manifest_kinds(manifest: DatasetManifest, config: UnfoldirConfig) -> List[str]:
    kinds = manifest.kinds()
    unknown = [kind for kind in kinds if kind not in config.data.kinds]
    if unknown:
        raise ConfigError(f"manifest kinds {unknown} are not declared in [data] kinds {config.data.kinds}")
    return kinds


def finetune(
    manifest: DatasetManifest,
    config: UnfoldirConfig,
    seed: Optional[int] = None,
    run_dir: Optional[Path] = None,
) -> EncoderTrainResult:
    """
    对比微调退化编码器

    Args:
        manifest: 训练数据清单（至少两种退化类型）
        config: 完整配置（[encoder] 节给出 epochs / lr / batch_size 等）
        seed: 随机种子，默认 train.seed
        run_dir: 输出目录；给出时写检查点与 history.json

    Returns:
        EncoderTrainResult
    """
    kinds = check_manifest_kinds(manifest, config)
    if len(kinds) < 2:
        raise DatasetError(f"contrastive fine-tuning needs >= 2 degradation kinds, manifest has {kinds}")

    cfg = config.encoder
    seed = config.train.seed if seed is None else seed
    generator = seed_everything(seed)

    encoder = DegradationEncoder(cfg, config.label_list())
    logger.info(f"Encoder built: {parameter_count(encoder)} parameters, labels={encoder.labels}")

    train_set = PairDataset(
        manifest, config.data.kinds, split="train", crop_size=cfg.crop_size,
        flip_horizontal=True, flip_vertical=True, seed=seed,
    )
    if len(train_set) == 0:
        raise DatasetError("manifest has no training records")
    loader = DataLoader(train_set, batch_size=cfg.batch_size, shuffle=True, generator=generator, num_workers=0)
    optimizer = torch.optim.AdamW(encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    step_losses: List[float] = []
    epoch_losses: List[float] = []
    history = []
    for epoch in range(cfg.epochs):
        if epoch == cfg.backbone_warm_epochs:
            encoder.backbone.requires_grad_(False)
            logger.info(f"Backbone frozen after {epoch} warm epochs")
        train_set.set_epoch(epoch)
        encoder.train()

        losses = []
        for batch in loader:
            optimizer.zero_grad(set_to_none=True)
            loss = contrastive_loss(encoder, batch["degraded"], batch["kind"], denominator=cfg.contrastive_denominator)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        step_losses.extend(losses)
        epoch_losses.append(float(np.mean(losses)))
        history.append({"epoch": epoch, "loss": epoch_losses[-1], "tau": float(encoder.tau)})
        logger.info(f"epoch={epoch} loss={epoch_losses[-1]:.4f} tau={float(encoder.tau):.3f}")

    if cfg.epochs <= cfg.backbone_warm_epochs:
        encoder.backbone.requires_grad_(False)

    val_set = PairDataset(manifest, config.data.kinds, split="val", seed=seed)
    accuracy = classification_accuracy(encoder, val_set)
    logger.info(f"Held-out kind accuracy: {accuracy:.3f} ({len(val_set)} images)")

    result = EncoderTrainResult(encoder, step_losses, epoch_losses, accuracy)
    if run_dir is not None:
        manager = CheckpointManager(run_dir)
        manager.write_history(history)
        result.checkpoint_id = manager.save_checkpoint(
            "encoder",
            encoder,
            config_hash(config),
            seed,
            description=f"contrastive fine-tuning, {cfg.epochs} epochs",
            extra={
                "config": config.model_dump(mode="json"),
                "labels": encoder.labels,
                "val_accuracy": None if math.isnan(accuracy) else accuracy,
            },
        )
    return result


def load_encoder(checkpoint_dir) -> Tuple[DegradationEncoder, UnfoldirConfig]:
    """从检查点目录重建编码器（结构取自 metadata 中的配置）"""
    metadata = read_metadata(checkpoint_dir)
    if metadata.get("kind") != "encoder":
        raise ConfigError(f"{checkpoint_dir} is not an encoder checkpoint")
    config = UnfoldirConfig(**metadata["config"])
    encoder = DegradationEncoder(config.encoder, metadata["labels"])
    _, tensors = load_parameters(Path(checkpoint_dir) / WEIGHTS_FILE)
    load_into(encoder, tensors)
    encoder.eval()
    return encoder, config
