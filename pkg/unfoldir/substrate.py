"""
Substrate - 可微计算契约与有限差分梯度检查

职责：
1. required_primitives()：列出所有可学习模块依赖的可微算子（由 PyTorch autograd 提供）
2. grad_check()：中心差分梯度检查，在每个参数上随机抽样坐标，
   报告最大相对误差 |g_a − g_n| / max(1, |g_n|)

L1 类损失在残差过零处不可导：传入 residual_fn 后，
若 ±eps 扰动使任一残差元素变号，该坐标跳过。
这比“|残差| < 10·eps 即跳过”的固定阈值更窄：离零点不足 10·eps 但没有被扰动跨过的元素
仍然可导，对应坐标照常检查。
"""

from dataclasses import dataclass, field
from functools import partial
from types import MappingProxyType
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange

from .errors import GradCheckError
from .log_utils import get_logger

logger = get_logger("Substrate")

LAYER_NORM_EPS = 1e-5


def _layer_norm(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=LAYER_NORM_EPS)


def _depthwise_conv2d(x: torch.Tensor, weight: torch.Tensor, stride: int = 1) -> torch.Tensor:
    return F.conv2d(x, weight, stride=stride, padding=weight.shape[-1] // 2, groups=x.shape[1])


def _downsample2(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 2)


def _upsample2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


def required_primitives() -> Mapping[str, Callable]:
    """
    可微算子清单

    Returns:
        名称 -> 可调用对象的只读映射；每一项都支持 autograd 反向传播
    """
    return MappingProxyType(
        {
            "conv2d": F.conv2d,
            "depthwise_conv2d": _depthwise_conv2d,
            "conv_transpose2d": F.conv_transpose2d,
            "matmul": torch.matmul,
            "softmax": partial(F.softmax, dim=-1),
            "layer_norm": _layer_norm,
            "gelu": F.gelu,
            "add": torch.add,
            "mul": torch.mul,
            "mean": torch.mean,
            "sum": torch.sum,
            "l1_loss": F.l1_loss,
            "cosine_similarity": partial(F.cosine_similarity, dim=-1),
            "rearrange": rearrange,
            "permute": torch.permute,
            "pixel_unshuffle": partial(F.pixel_unshuffle, downscale_factor=2),
            "pixel_shuffle": partial(F.pixel_shuffle, upscale_factor=2),
            "downsample2": _downsample2,
            "upsample2": _upsample2,
        }
    )


# ---------------------------------------------------------------------------
# 梯度检查


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1.0, abs(self.numeric))


@dataclass
class GradCheckReport:
    """grad_check 的结果"""

    entries: List[GradCheckEntry] = field(default_factory=list)
    skipped: int = 0
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((entry.rel_error for entry in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.entries) and self.max_rel_error < self.tolerance

    def per_param(self) -> Dict[str, float]:
        result: Dict[str, float] = {}
        for entry in self.entries:
            result[entry.name] = max(result.get(entry.name, 0.0), entry.rel_error)
        return result

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} "
            f"checked={len(self.entries)} skipped={self.skipped}"
        )


ParamSpec = Union[torch.nn.Module, Mapping[str, torch.Tensor], Iterable]


def _named(params: ParamSpec) -> List[Tuple[str, torch.Tensor]]:
    if isinstance(params, torch.nn.Module):
        named = [(name, p) for name, p in params.named_parameters() if p.requires_grad]
    elif isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = []
        for i, item in enumerate(params):
            if isinstance(item, tuple):
                named.append(item)
            else:
                named.append((f"param{i}", item))
    if not named:
        raise GradCheckError("grad_check needs at least one parameter")
    return named


def _scalar(value: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(value) or value.numel() != 1:
        shape = tuple(value.shape) if torch.is_tensor(value) else type(value).__name__
        raise GradCheckError(f"grad_check needs a scalar objective, got {shape}")
    return value.reshape(())


def grad_check(
    f: Callable[[], torch.Tensor],
    params: ParamSpec,
    eps: float = 1e-5,
    num_coords: int = 64,
    seed: int = 0,
    residual_fn: Optional[Callable[[], torch.Tensor]] = None,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """
    中心差分梯度检查

    Args:
        f: 无参闭包，用当前参数计算标量目标
        params: nn.Module、name->tensor 映射或张量列表（必须是 float64）
        eps: 差分步长
        num_coords: 每个参数最多抽样的坐标数（参数更小时全部检查）
        seed: 抽样种子
        residual_fn: 可选，返回 L1 类损失的残差张量，用于跳过过零坐标
        tolerance: 判定通过的最大相对误差

    Returns:
        GradCheckReport
    """
    named = _named(params)
    for name, tensor in named:
        if tensor.dtype != torch.float64:
            raise GradCheckError(f"grad_check runs in double precision; {name} is {tensor.dtype}")

    value = _scalar(f())
    tensors = [tensor for _, tensor in named]
    grads = torch.autograd.grad(value, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    with torch.no_grad():
        for (name, tensor), grad in zip(named, grads):
            flat = tensor.data.view(-1)
            analytic = torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            count = flat.numel()
            if count <= num_coords:
                indices = np.arange(count)
            else:
                indices = np.sort(rng.choice(count, size=num_coords, replace=False))

            for index in indices.tolist():
                original = flat[index].item()

                flat[index] = original + eps
                f_plus = _scalar(f()).item()
                r_plus = residual_fn() if residual_fn is not None else None

                flat[index] = original - eps
                f_minus = _scalar(f()).item()
                r_minus = residual_fn() if residual_fn is not None else None

                flat[index] = original

                # 残差变号：跨过 L1 的不可导点
                if r_plus is not None and bool(torch.any(torch.sign(r_plus) != torch.sign(r_minus))):
                    report.skipped += 1
                    continue

                numeric = (f_plus - f_minus) / (2.0 * eps)
                report.entries.append(GradCheckEntry(name, index, float(analytic[index].item()), numeric))

    logger.debug(f"grad_check: {report.summary()}")
    return report


def seed_everything(seed: int) -> torch.Generator:
    """固定 torch / numpy 随机状态，启用确定性算法；返回一个同种子的 Generator 供 DataLoader 使用"""
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def parameter_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
