"""
Metrics - 评估指标与可视化

职责：
1. PSNR / SSIM（逐通道平均，11×11 高斯窗口，sigma 1.5）
2. MetricReport：逐图像指标 + 按退化类型与整体的均值，文本报告读写
3. 相似度热力图（编码器对每个测试集的平均 softmax 相似度）
4. 退化图导出：第一阶段 D-GDM 残差投影回 3 通道并 min-max 归一化
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .dataset import to_tensor, write_png
from .errors import CheckpointError, ParameterError, ShapeError
from .log_utils import get_logger

logger = get_logger("Metrics")

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10·log10(max²/MSE)，MSE < 1e-12 时返回 99 dB"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ParameterError(f"max_val must be > 0, got {max_val}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(max_val ** 2 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _filter_valid(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    pad = window.shape[0] // 2
    return ndimage.correlate(x, window, mode="reflect")[pad:-pad, pad:-pad]


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """
    平均局部 SSIM

    C1 = (0.01·max)²，C2 = (0.03·max)²；只统计窗口完全落在图像内的位置，
    每个通道单独计算后取平均。
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")

    window = _gaussian_window()
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2

    scores = []
    for channel in range(a.shape[2]):
        x, y = a[:, :, channel], b[:, :, channel]
        ux, uy = _filter_valid(x, window), _filter_valid(y, window)
        uxx, uyy, uxy = _filter_valid(x * x, window), _filter_valid(y * y, window), _filter_valid(x * y, window)
        vx, vy, vxy = uxx - ux * ux, uyy - uy * uy, uxy - ux * uy
        numerator = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
        denominator = (ux * ux + uy * uy + c1) * (vx + vy + c2)
        scores.append(float(np.mean(numerator / denominator)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# 报告


@dataclass
class ImageMetric:
    id: str
    kind: str
    psnr_db: float
    ssim: float
    input_psnr_db: Optional[float] = None


@dataclass
class MetricReport:
    """逐图像指标；聚合值是成员的算术平均"""

    per_image: List[ImageMetric] = field(default_factory=list)

    def add(self, metric: ImageMetric) -> None:
        self.per_image.append(metric)

    def aggregates(self) -> "OrderedDict[str, Dict[str, float]]":
        groups: "OrderedDict[str, List[ImageMetric]]" = OrderedDict()
        for metric in self.per_image:
            groups.setdefault(metric.kind, []).append(metric)
        groups["overall"] = list(self.per_image)

        result: "OrderedDict[str, Dict[str, float]]" = OrderedDict()
        for name, members in groups.items():
            if not members:
                continue
            entry = {
                "count": float(len(members)),
                "psnr_db": float(np.mean([m.psnr_db for m in members])),
                "ssim": float(np.mean([m.ssim for m in members])),
            }
            inputs = [m.input_psnr_db for m in members if m.input_psnr_db is not None]
            if len(inputs) == len(members):
                entry["input_psnr_db"] = float(np.mean(inputs))
            result[name] = entry
        return result

    def to_text(self) -> str:
        lines = [f"{m.id}\t{m.psnr_db:.2f}\t{m.ssim:.4f}" for m in self.per_image]
        lines.append("# aggregate")
        for name, entry in self.aggregates().items():
            fields = [f"count={int(entry['count'])}", f"psnr_db={entry['psnr_db']:.2f}", f"ssim={entry['ssim']:.4f}"]
            if "input_psnr_db" in entry:
                fields.append(f"input_psnr_db={entry['input_psnr_db']:.2f}")
            lines.append(f"{name}\t" + "\t".join(fields))
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def read_report_aggregates(path) -> Dict[str, Dict[str, float]]:
    """解析报告末尾的 aggregate 块"""
    result: Dict[str, Dict[str, float]] = {}
    in_block = False
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# aggregate"):
            in_block = True
            continue
        if not in_block or not line.strip():
            continue
        name, *fields = line.split("\t")
        result[name] = {key: float(value) for key, value in (f.split("=", 1) for f in fields)}
    return result


# ---------------------------------------------------------------------------
# 相似度热力图


@dataclass
class SimilarityMatrix:
    rows: List[str]
    cols: List[str]
    values: np.ndarray

    def diagonal_dominant(self) -> bool:
        """每一行的对角元素严格大于该行其余元素"""
        for r in range(min(len(self.rows), len(self.cols))):
            row = self.values[r]
            others = np.delete(row, r)
            if others.size and not np.all(row[r] > others):
                return False
        return True

    def to_text(self) -> str:
        width = max(len(name) for name in self.rows)
        lines = [" " * width + "\t" + "\t".join(self.cols)]
        for name, row in zip(self.rows, self.values):
            lines.append(name.ljust(width) + "\t" + "\t".join(f"{v:.4f}" for v in row))
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem: str = "heatmap") -> Dict[str, Path]:
        """写出数值网格（.txt）和热力图（.png）"""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path = out_dir / f"{stem}.txt"
        text_path.write_text(self.to_text(), encoding="utf-8")

        fig, ax = plt.subplots(figsize=(1.2 * len(self.cols) + 2, 0.8 * len(self.rows) + 1.5))
        ax.imshow(self.values, cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_xticks(range(len(self.cols)), labels=self.cols, rotation=30, ha="right")
        ax.set_yticks(range(len(self.rows)), labels=self.rows)
        for r in range(len(self.rows)):
            for c in range(len(self.cols)):
                ax.text(c, r, f"{self.values[r, c]:.2f}", ha="center", va="center", color="w", fontsize=8)
        fig.tight_layout()
        png_path = out_dir / f"{stem}.png"
        fig.savefig(png_path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        return {"text": text_path, "png": png_path}


@torch.no_grad()
def similarity_heatmap(encoder, datasets: Sequence[torch.Tensor], labels, rows: Sequence[str], gamma: Optional[float] = None) -> SimilarityMatrix:
    """
    相似度热力图

    Args:
        encoder: 提供 score_labels 的退化编码器
        datasets: 每个测试集一个 N×3×H×W 张量
        labels: LabelSet（列）
        rows: 行名（测试集的退化类型）
        gamma: 相似度锐化系数，默认使用编码器配置

    Returns:
        SimilarityMatrix，第 r 行是测试集 r 上 softmax 相似度的均值
    """
    from .encoder import score_labels

    if len(datasets) != len(rows):
        raise ParameterError(f"{len(datasets)} datasets but {len(rows)} row names")

    values = []
    for name, images in zip(rows, datasets):
        if images is None or len(images) == 0:
            raise ParameterError(f"dataset {name!r} is empty")
        probs = score_labels(encoder, images, labels, gamma=gamma)
        values.append(probs.double().mean(dim=0).cpu().numpy())
    return SimilarityMatrix(rows=list(rows), cols=list(labels.labels), values=np.stack(values))


# ---------------------------------------------------------------------------
# 退化图


@torch.no_grad()
def degradation_map(model, img: np.ndarray, d_vec: Optional[torch.Tensor] = None) -> np.ndarray:
    """第一阶段残差 Φᵀ(Φ̃(x̂, d_I) − ŷ)，经逆层变换投影回 3 通道，min-max 归一化"""
    if not hasattr(model, "first_stage_residual") or not getattr(model, "stages", None):
        raise CheckpointError("model does not expose a first unfolding stage")

    dtype = next(model.parameters()).dtype
    y = to_tensor(img, dtype=dtype).unsqueeze(0)
    residual = model.first_stage_residual(y, d_vec)
    projected = model.transform.back_project(residual, clamp=False)[0].double().cpu().numpy().transpose(1, 2, 0)

    lo, hi = projected.min(), projected.max()
    if hi - lo < 1e-12:
        return np.zeros_like(projected)
    return (projected - lo) / (hi - lo)


def dump_degradation_map(model, img: np.ndarray, out_path, d_vec: Optional[torch.Tensor] = None) -> Path:
    """把 degradation_map 写成 PNG"""
    out_path = Path(out_path)
    write_png(out_path, degradation_map(model, img, d_vec))
    logger.info(f"Degradation map written: {out_path}")
    return out_path
