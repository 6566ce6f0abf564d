"""
Checkpoint Manager - 检查点管理器

职责：
1. 命名参数容器：文本头（配置哈希、随机种子）+ 有序 name -> tensor，逐位无损往返
2. 创建检查点（weights.pt + metadata.json，先写临时文件再原子重命名）
3. 检查点恢复（名称与形状逐一校验）
4. 读取训练进度指标（history.json）

目录结构：
    <run_dir>/
        checkpoints/<checkpoint_id>/weights.pt
        checkpoints/<checkpoint_id>/metadata.json
        history.json
"""

import hashlib
import json
import os
import subprocess
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import torch

from .errors import CheckpointError
from .log_utils import get_logger
from .substrate import parameter_count

logger = get_logger("CheckpointManager")

HEADER_MAGIC = "unfoldir-checkpoint v1"
WEIGHTS_FILE = "weights.pt"
METADATA_FILE = "metadata.json"
HISTORY_FILE = "history.json"


def format_header(fields: Mapping[str, object]) -> str:
    """文本头：第一行为魔数，其余每行 key=value"""
    lines = [HEADER_MAGIC] + [f"{key}={value}" for key, value in fields.items()]
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> Dict[str, str]:
    lines = text.splitlines()
    if not lines or lines[0] != HEADER_MAGIC:
        raise CheckpointError("not an unfoldir checkpoint (bad header)")
    return dict(line.split("=", 1) for line in lines[1:] if "=" in line)


def _atomic_torch_save(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def _atomic_write_text(text: str, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_parameters(path, tensors: Mapping[str, torch.Tensor], header: Mapping[str, object]) -> Path:
    """
    写出命名参数容器

    Args:
        path: 目标文件
        tensors: 有序 name -> tensor（会 detach 并复制到 CPU）
        header: 写入文本头的字段

    Returns:
        写出的路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": format_header(header),
        "tensors": OrderedDict((name, t.detach().cpu().clone()) for name, t in tensors.items()),
    }
    _atomic_torch_save(payload, path)
    return path


def load_parameters(path) -> Tuple[Dict[str, str], "OrderedDict[str, torch.Tensor]"]:
    """读取命名参数容器，返回 (header 字段, 有序 name -> tensor)"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "header" not in payload or "tensors" not in payload:
        raise CheckpointError(f"{path} is not a named-parameter container")
    return parse_header(payload["header"]), OrderedDict(payload["tensors"])


def load_into(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """把张量写回模块；名称集合或形状不一致时报 CheckpointError"""
    own = module.state_dict()
    missing = [name for name in own if name not in tensors]
    unexpected = [name for name in tensors if name not in own]
    if missing or unexpected:
        raise CheckpointError(
            f"parameter names do not match: missing={missing[:5]} unexpected={unexpected[:5]}"
        )
    for name, value in tensors.items():
        if tuple(own[name].shape) != tuple(value.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: model {tuple(own[name].shape)} vs checkpoint {tuple(value.shape)}"
            )
    module.load_state_dict(OrderedDict((name, value.to(own[name].dtype)) for name, value in tensors.items()))


class CheckpointManager:
    """检查点管理器 - 训练产物持久化"""

    def __init__(self, run_dir):
        """
        检查点管理器

        Args:
            run_dir: 运行目录（训练命令的 --out）
        """
        self.run_dir = Path(run_dir).absolute()
        self.checkpoints_dir = self.run_dir / "checkpoints"
        self.history_file = self.run_dir / HISTORY_FILE

    def save_checkpoint(
        self,
        kind: str,
        module: torch.nn.Module,
        config_hash: str,
        seed: int,
        description: str = "",
        extra: Optional[Dict] = None,
    ) -> str:
        """
        创建检查点

        检查点包含：
        - weights.pt：命名参数容器（头部记录配置哈希与种子）
        - metadata.json：检查点 ID、类型、描述、参数量、git commit hash 以及 extra 字段

        Args:
            kind: "encoder" / "restorer"
            module: 要保存的模型
            config_hash: 配置哈希
            seed: 随机种子
            description: 检查点描述
            extra: 额外元数据（例如重建模型所需的配置）

        Returns:
            检查点 ID
        """
        checkpoint_id = self._generate_checkpoint_id(kind, config_hash, seed)
        checkpoint_dir = self.checkpoints_dir / checkpoint_id
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

        header = {"kind": kind, "config_hash": config_hash, "seed": seed}
        save_parameters(checkpoint_dir / WEIGHTS_FILE, module.state_dict(), header)

        metadata = {
            "checkpoint_id": checkpoint_id,
            "kind": kind,
            "description": description,
            "config_hash": config_hash,
            "seed": seed,
            "parameter_count": parameter_count(module),
            "git_hash": self._get_git_hash(),
        }
        if extra:
            metadata.update(extra)
        _atomic_write_text(json.dumps(metadata, indent=2, sort_keys=True), checkpoint_dir / METADATA_FILE)

        logger.info(f"Checkpoint created: {checkpoint_id} ({metadata['parameter_count']} parameters)")
        return checkpoint_id

    def checkpoint_dir(self, checkpoint_id: str) -> Path:
        checkpoint_dir = self.checkpoints_dir / checkpoint_id
        if not (checkpoint_dir / WEIGHTS_FILE).is_file():
            raise CheckpointError(f"Checkpoint {checkpoint_id} not found in {self.checkpoints_dir}")
        return checkpoint_dir

    def read_metadata(self, checkpoint_id: str) -> Dict:
        return read_metadata(self.checkpoint_dir(checkpoint_id))

    def restore_checkpoint(self, checkpoint_id: str, module: torch.nn.Module, kind: Optional[str] = None) -> Dict:
        """
        恢复检查点

        Args:
            checkpoint_id: 检查点 ID
            module: 结构相同的模型（参数会被覆盖）
            kind: 期望的检查点类型，不一致时报错

        Returns:
            恢复结果字典
        """
        checkpoint_dir = self.checkpoint_dir(checkpoint_id)
        header, tensors = load_parameters(checkpoint_dir / WEIGHTS_FILE)
        if kind is not None and header.get("kind") != kind:
            raise CheckpointError(f"checkpoint {checkpoint_id} is a {header.get('kind')!r} checkpoint, expected {kind!r}")
        load_into(module, tensors)

        logger.info(f"Checkpoint restored: {checkpoint_id}")
        return {
            "status": "success",
            "checkpoint_id": checkpoint_id,
            "kind": header.get("kind"),
            "config_hash": header.get("config_hash"),
            "seed": header.get("seed"),
        }

    def list_checkpoints(self, kind: Optional[str] = None) -> List[Dict]:
        """列出所有检查点（可按类型过滤）"""
        if not self.checkpoints_dir.exists():
            return []

        checkpoints = []
        for checkpoint_dir in sorted(self.checkpoints_dir.iterdir()):
            metadata_path = checkpoint_dir / METADATA_FILE
            if not checkpoint_dir.is_dir() or not metadata_path.exists():
                continue
            metadata = json.loads(metadata_path.read_text(encoding="utf-8"))
            if kind is None or metadata.get("kind") == kind:
                checkpoints.append(metadata)
        return checkpoints

    def write_history(self, history: List[Dict]) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(json.dumps(history, indent=2), self.history_file)
        return self.history_file

    def get_progress_metrics(self) -> Dict:
        """
        获取进度指标

        Returns:
            {
                "epochs_logged": int,
                "final_loss": float | None,
                "best_val_psnr": float | None,
                "checkpoints": int
            }
        """
        metrics = {
            "epochs_logged": 0,
            "final_loss": None,
            "best_val_psnr": None,
            "checkpoints": len(self.list_checkpoints()),
        }
        if not self.history_file.exists():
            return metrics

        history = json.loads(self.history_file.read_text(encoding="utf-8"))
        metrics["epochs_logged"] = len(history)
        if history:
            metrics["final_loss"] = history[-1].get("loss")
            psnrs = [entry["val_psnr"] for entry in history if entry.get("val_psnr") is not None]
            metrics["best_val_psnr"] = max(psnrs) if psnrs else None
        return metrics

    def _generate_checkpoint_id(self, kind: str, config_hash: str, seed: int) -> str:
        """生成检查点 ID（同配置同种子得到同一 ID）"""
        content = f"{kind}:{config_hash}:{seed}"
        hash_obj = hashlib.md5(content.encode())
        return f"cp-{hash_obj.hexdigest()[:8]}-{kind}"

    def _get_git_hash(self) -> Optional[str]:
        """获取当前 git commit hash"""
        try:
            result = subprocess.run(
                ["git", "rev-parse", "HEAD"],
                cwd=self.run_dir,
                capture_output=True,
                text=True,
                check=True,
            )
            return result.stdout.strip()
        except (OSError, subprocess.CalledProcessError):
            return None


def read_metadata(checkpoint_dir) -> Dict:
    metadata_path = Path(checkpoint_dir) / METADATA_FILE
    if not metadata_path.is_file():
        raise CheckpointError(f"no metadata in {checkpoint_dir}")
    return json.loads(metadata_path.read_text(encoding="utf-8"))


def resolve_checkpoint(path, kind: str) -> Path:
    """
    把命令行给出的路径解析为检查点目录

    接受检查点目录本身，或包含 checkpoints/ 的运行目录（取该类型唯一/最后一个检查点）。
    """
    path = Path(path)
    if (path / WEIGHTS_FILE).is_file():
        checkpoint_dir = path
    else:
        candidates = CheckpointManager(path).list_checkpoints(kind)
        if not candidates:
            raise CheckpointError(f"no {kind} checkpoint under {path}")
        checkpoint_dir = CheckpointManager(path).checkpoint_dir(candidates[-1]["checkpoint_id"])

    metadata = read_metadata(checkpoint_dir)
    if metadata.get("kind") != kind:
        raise CheckpointError(f"{checkpoint_dir} holds a {metadata.get('kind')!r} checkpoint, expected {kind!r}")
    return checkpoint_dir
