"""
Dataset - 数据集生成与读取

职责：
1. 生成 clean/degraded 图像对与清单（manifest）
2. 程序化纹理作为默认的干净图像来源（无需外部数据）
3. PNG 读写（8-bit <-> [0, 1]）
4. 训练用的 torch Dataset（随机裁剪 + 翻转，clean/degraded 同步）

清单格式（UTF-8，每行一条记录，制表符分隔，字段顺序固定）：
    clean_path  degraded_path  kind  params(key=value,...)  seed
首行为注释 "# dataset_seed=<int>"。
"""

import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image as PILImage
from scipy import ndimage
from torch.utils.data import Dataset
from tqdm import tqdm

from .degradations import DegradationSpec, apply_degradation, sample_spec
from .errors import DatasetError, ParameterError
from .log_utils import get_logger

logger = get_logger("Dataset")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MANIFEST_NAME = "manifest.txt"


@dataclass
class ManifestRecord:
    clean_path: str
    degraded_path: str
    kind: str
    params: Dict[str, float]
    seed: int

    def to_line(self) -> str:
        spec = DegradationSpec(kind=self.kind, params=self.params, seed=self.seed)
        return "\t".join([self.clean_path, self.degraded_path, self.kind, spec.flatten_params(), str(self.seed)])

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 5:
            raise DatasetError(f"malformed manifest line ({len(fields)} fields): {line!r}")
        clean_path, degraded_path, kind, params, seed = fields
        return cls(clean_path, degraded_path, kind, DegradationSpec.parse_params(params), int(seed))


@dataclass
class DatasetManifest:
    """清单：记录列表 + 数据集种子；路径相对于 root"""

    records: List[ManifestRecord] = field(default_factory=list)
    dataset_seed: int = 0
    root: Path = Path(".")

    def to_text(self) -> str:
        lines = [f"# dataset_seed={self.dataset_seed}"]
        lines.extend(record.to_line() for record in self.records)
        return "\n".join(lines) + "\n"

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        tmp_path = path.with_suffix(path.suffix + ".tmp")
        try:
            tmp_path.write_text(self.to_text(), encoding="utf-8")
            os.replace(tmp_path, path)
        except OSError as e:
            raise DatasetError(f"cannot write manifest {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise DatasetError(f"manifest not found: {path}")

        dataset_seed = 0
        records = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "dataset_seed":
                    dataset_seed = int(value)
                continue
            records.append(ManifestRecord.from_line(line))
        return cls(records=records, dataset_seed=dataset_seed, root=path.parent)

    def kinds(self) -> List[str]:
        """按首次出现顺序去重的退化类型"""
        seen: List[str] = []
        for record in self.records:
            if record.kind not in seen:
                seen.append(record.kind)
        return seen

    def resolve(self, relative: str) -> Path:
        return self.root / relative


# ---------------------------------------------------------------------------
# 图像读写


def read_png(path) -> np.ndarray:
    """8-bit RGB -> [0, 1] float64"""
    try:
        with PILImage.open(path) as image:
            data = np.asarray(image.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    return data / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """[0, 1] -> 8-bit RGB（round(value·255)）"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(to_uint8(img)).save(path, format="PNG")
    except OSError as e:
        raise DatasetError(f"cannot write image {path}: {e}") from e


def quantize(img: np.ndarray) -> np.ndarray:
    """模拟一次 PNG 往返"""
    return to_uint8(img).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# 干净图像来源


def procedural_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """
    多尺度平滑噪声纹理 + 随机边缘

    Args:
        size: 边长
        rng: 随机数发生器

    Returns:
        size×size×3 图像，取值约 [0.05, 0.95]
    """
    texture = np.zeros((size, size, 3))
    for sigma, weight in ((size / 4.0, 1.0), (size / 12.0, 0.6), (1.5, 0.25)):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0), mode="wrap")
        layer /= layer.std() + 1e-12
        texture += weight * layer

    # 分段常数块产生锐利边缘
    for _ in range(int(rng.integers(2, 6))):
        y0, x0 = rng.integers(0, size, size=2)
        h, w = rng.integers(size // 8, size // 2, size=2)
        texture[y0:y0 + h, x0:x0 + w, :] += rng.normal(0.0, 1.5, size=3)

    lo, hi = texture.min(), texture.max()
    texture = (texture - lo) / max(hi - lo, 1e-12)
    return 0.05 + 0.9 * texture


def list_clean_images(clean_dir) -> List[Path]:
    clean_dir = Path(clean_dir)
    if not clean_dir.is_dir():
        raise DatasetError(f"clean source is not a readable directory: {clean_dir}")
    files = sorted(p for p in clean_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images found in {clean_dir}")
    return files


def _crop_from_file(path: Path, size: int, rng: np.random.Generator) -> np.ndarray:
    img = read_png(path)
    height, width = img.shape[:2]
    if height < size or width < size:
        raise DatasetError(f"{path} is smaller than the requested {size}×{size} crop")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return img[top:top + size, left:left + size]


def record_rng(dataset_seed: int, index: int) -> np.random.Generator:
    """每条记录独立的随机流：由 (dataset_seed, index) 派生"""
    return np.random.default_rng([int(dataset_seed), int(index)])


def is_validation(index: int, fraction_denominator: int = 10) -> bool:
    """按记录序号的哈希确定性地划分约 10% 验证集"""
    digest = hashlib.md5(str(int(index)).encode("ascii")).digest()
    return int.from_bytes(digest[:4], "little") % fraction_denominator == 0


# ---------------------------------------------------------------------------
# 数据集生成


def generate_dataset(
    out_dir,
    kinds: Sequence[str],
    count: int,
    dataset_seed: int,
    clean_dir=None,
    image_size: int = 64,
    noise_sigmas: Sequence[float] = (15.0, 25.0, 50.0),
    workers: int = 1,
) -> DatasetManifest:
    """
    生成 clean/degraded 图像对并写出清单

    Args:
        out_dir: 输出目录（写入 clean/ degraded/ manifest.txt）
        kinds: 退化类型，按轮转顺序分配
        count: 记录数
        dataset_seed: 数据集种子（决定全部内容）
        clean_dir: 干净图像目录；None 使用程序化纹理
        image_size: 图像边长
        noise_sigmas: 噪声强度候选
        workers: 并行线程数（记录级随机流保证与顺序无关）

    Returns:
        DatasetManifest
    """
    if count <= 0:
        raise ParameterError(f"count must be > 0, got {count}")
    if not kinds:
        raise ParameterError("at least one degradation kind is required")

    out_dir = Path(out_dir)
    try:
        (out_dir / "clean").mkdir(parents=True, exist_ok=True)
        (out_dir / "degraded").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create destination {out_dir}: {e}") from e

    clean_files = list_clean_images(clean_dir) if clean_dir else None
    sigmas = list(noise_sigmas)

    def build(index: int) -> ManifestRecord:
        rng = record_rng(dataset_seed, index)
        if clean_files:
            clean = _crop_from_file(clean_files[index % len(clean_files)], image_size, rng)
        else:
            clean = procedural_texture(image_size, rng)
        clean = quantize(clean)

        kind = kinds[index % len(kinds)]
        spec = sample_spec(kind, rng, clean.shape, noise_sigmas=sigmas)
        degraded = apply_degradation(clean, spec)

        clean_rel = f"clean/{index:05d}.png"
        degraded_rel = f"degraded/{index:05d}.png"
        write_png(out_dir / clean_rel, clean)
        write_png(out_dir / degraded_rel, degraded)
        return ManifestRecord(clean_rel, degraded_rel, kind, dict(spec.params), spec.seed)

    logger.info(f"Generating {count} pairs ({', '.join(kinds)}) into {out_dir}")
    progress = dict(total=count, desc="synth", disable=not _is_tty())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map 保持记录顺序
            records = list(tqdm(pool.map(build, range(count)), **progress))
    else:
        records = [build(index) for index in tqdm(range(count), **progress)]

    manifest = DatasetManifest(records=records, dataset_seed=dataset_seed, root=out_dir)
    path = manifest.save()
    logger.info(f"Manifest written: {path}")
    return manifest


def _is_tty() -> bool:
    return sys.stderr.isatty()


# ---------------------------------------------------------------------------
# 训练数据


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H×W×3 -> 3×H×W"""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """3×H×W（或 1×3×H×W）-> H×W×3 float64"""
    if tensor.dim() == 4:
        tensor = tensor[0]
    return tensor.detach().cpu().double().numpy().transpose(1, 2, 0)


class PairDataset(Dataset):
    """
    清单上的 clean/degraded 对

    split: "train" / "val" / "all"
    crop_size: None 表示整图
    增强随机流由 (seed, epoch, record index) 决定，clean 与 degraded 使用同一裁剪窗口和翻转。
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        kinds: Sequence[str],
        split: str = "train",
        crop_size: Optional[int] = None,
        flip_horizontal: bool = False,
        flip_vertical: bool = False,
        seed: int = 0,
    ):
        if split not in ("train", "val", "all"):
            raise ParameterError(f"unknown split: {split}")
        self.kinds = list(kinds)
        self.crop_size = crop_size
        self.flip_horizontal = flip_horizontal
        self.flip_vertical = flip_vertical
        self.seed = seed
        self.epoch = 0

        self.indices = [
            i for i in range(len(manifest.records))
            if split == "all" or (split == "val") == is_validation(i)
        ]
        self.records = [manifest.records[i] for i in self.indices]
        unknown = {r.kind for r in self.records} - set(self.kinds)
        if unknown:
            raise ParameterError(f"manifest contains kinds outside {self.kinds}: {sorted(unknown)}")

        # 数据量很小，一次性读入内存
        self.clean = [read_png(manifest.resolve(r.clean_path)) for r in self.records]
        self.degraded = [read_png(manifest.resolve(r.degraded_path)) for r in self.records]

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, item: int) -> Dict[str, torch.Tensor]:
        clean, degraded = self.clean[item], self.degraded[item]
        record_index = self.indices[item]

        if self.crop_size is not None:
            rng = np.random.default_rng([self.seed, self.epoch, record_index])
            size = self.crop_size
            height, width = clean.shape[:2]
            top = int(rng.integers(0, height - size + 1))
            left = int(rng.integers(0, width - size + 1))
            clean = clean[top:top + size, left:left + size]
            degraded = degraded[top:top + size, left:left + size]
            if self.flip_horizontal and rng.random() < 0.5:
                clean, degraded = clean[:, ::-1], degraded[:, ::-1]
            if self.flip_vertical and rng.random() < 0.5:
                clean, degraded = clean[::-1], degraded[::-1]

        return {
            "clean": to_tensor(clean),
            "degraded": to_tensor(degraded),
            "kind": torch.tensor(self.kinds.index(self.records[item].kind)),
            "index": torch.tensor(record_index),
        }
