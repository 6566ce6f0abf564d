"""
Grad-check targets - 可学习组件的梯度检查目标

每个目标在 float64 下构造一个小模块、固定的随机输入与一个标量目标：
平滑目标用 Σ(out ⊙ w)，完整模型用 L1 损失（传入残差以跳过不可导坐标）。
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import torch
import torch.nn.functional as F

from .blocks import TransformerBlock
from .config import ModelConfig
from .dgdm import DegradationAttention, DGDMStage, KeyDatabase, RefineAttention, retrieve_key
from .encoder import AdapterMLP, contrastive_loss_from_embeddings
from .errors import ParameterError
from .log_utils import get_logger
from .substrate import GradCheckReport, grad_check
from .unfolder import UnfoldingNet

logger = get_logger("GradCheck")

DTYPE = torch.float64
CHANNELS = 4
HEADS = 2
MODEL_CHANNELS = 8
NUM_COORDS = 64
EMBED_DIM = 8
NUM_KEYS = 4


@dataclass
class GradCheckTarget:
    name: str
    f: Callable[[], torch.Tensor]
    params: object
    residual_fn: Optional[Callable[[], torch.Tensor]] = None
    num_coords: int = NUM_COORDS


def _randn(generator: torch.Generator, *shape, requires_grad: bool = False) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE).requires_grad_(requires_grad)


def _with_inputs(module: torch.nn.Module, **inputs: torch.Tensor) -> Dict[str, torch.Tensor]:
    params = OrderedDict((name, p) for name, p in module.named_parameters() if p.requires_grad)
    params.update(inputs)
    return params


def adapter_target(generator: torch.Generator) -> GradCheckTarget:
    adapter = AdapterMLP(EMBED_DIM).to(DTYPE)
    x = _randn(generator, 4, EMBED_DIM, requires_grad=True)
    w = _randn(generator, 4, EMBED_DIM)
    return GradCheckTarget("adapter", lambda: (adapter(x) * w).sum(), _with_inputs(adapter, x=x))


def contrastive_target(generator: torch.Generator) -> GradCheckTarget:
    image_emb = _randn(generator, 4, EMBED_DIM, requires_grad=True)
    text_emb = _randn(generator, 4, EMBED_DIM, requires_grad=True)
    log_tau = torch.tensor(1.0, dtype=DTYPE, requires_grad=True)
    params = OrderedDict(image_emb=image_emb, text_emb=text_emb, log_tau=log_tau)
    return GradCheckTarget(
        "contrastive", lambda: contrastive_loss_from_embeddings(image_emb, text_emb, log_tau.exp()), params
    )


def retrieve_key_target(generator: torch.Generator) -> GradCheckTarget:
    db = KeyDatabase([CHANNELS], NUM_KEYS, EMBED_DIM).to(DTYPE)
    d = _randn(generator, 2, EMBED_DIM, requires_grad=True)
    w = _randn(generator, 2, CHANNELS)
    return GradCheckTarget("retrieve_key", lambda: (retrieve_key(d, db, 0) * w).sum(), _with_inputs(db, d=d))


def degradation_attention_target(generator: torch.Generator) -> GradCheckTarget:
    module = DegradationAttention(CHANNELS, HEADS).to(DTYPE)
    x = _randn(generator, 1, CHANNELS, 8, 8, requires_grad=True)
    key = _randn(generator, 1, CHANNELS, requires_grad=True)
    w = _randn(generator, 1, CHANNELS, 8, 8)
    return GradCheckTarget(
        "degradation_attention", lambda: (module(x, key) * w).sum(), _with_inputs(module, x=x, key=key)
    )


def refine_attention_target(generator: torch.Generator) -> GradCheckTarget:
    module = RefineAttention(CHANNELS, HEADS).to(DTYPE)
    r = _randn(generator, 1, CHANNELS, 4, 4, requires_grad=True)
    w = _randn(generator, 1, CHANNELS, 4, 4)
    return GradCheckTarget("refine_attention", lambda: (module(r) * w).sum(), _with_inputs(module, r=r))


def stage_target(generator: torch.Generator) -> GradCheckTarget:
    stage = DGDMStage(CHANNELS, heads=HEADS, zero_init=False).to(DTYPE)
    db = KeyDatabase([CHANNELS], NUM_KEYS, EMBED_DIM).to(DTYPE)
    x_hat = _randn(generator, 1, CHANNELS, 8, 8, requires_grad=True)
    y_hat = _randn(generator, 1, CHANNELS, 8, 8)
    d = F.normalize(_randn(generator, 1, EMBED_DIM), dim=-1)
    w = _randn(generator, 1, CHANNELS, 8, 8)

    params = _with_inputs(stage, x_hat=x_hat)
    params.update((f"db.{name}", p) for name, p in db.named_parameters())
    return GradCheckTarget("stage", lambda: (stage(x_hat, y_hat, d, db) * w).sum(), params)


def transformer_block_target(generator: torch.Generator) -> GradCheckTarget:
    block = TransformerBlock(CHANNELS, HEADS, zero_init=False).to(DTYPE)
    x = _randn(generator, 1, CHANNELS, 8, 8, requires_grad=True)
    w = _randn(generator, 1, CHANNELS, 8, 8)
    return GradCheckTarget("transformer_block", lambda: (block(x) * w).sum(), _with_inputs(block, x=x))


def model_target(generator: torch.Generator) -> GradCheckTarget:
    """2 层 / 4 阶段的完整展开网络，16×16 输入，L1 损失"""
    cfg = ModelConfig(
        base_channels=MODEL_CHANNELS, num_levels=2, blocks=[1, 1], num_keys=NUM_KEYS,
        head_channels=MODEL_CHANNELS // HEADS, identity_init=False,
    )
    model = UnfoldingNet(cfg, EMBED_DIM).to(DTYPE)
    y = torch.rand(1, 3, 16, 16, generator=generator, dtype=DTYPE)
    x = torch.rand(1, 3, 16, 16, generator=generator, dtype=DTYPE)
    d = F.normalize(_randn(generator, 1, EMBED_DIM), dim=-1)
    return GradCheckTarget(
        "model",
        lambda: F.l1_loss(model(y, d), x),
        model,
        residual_fn=lambda: model(y, d) - x,
    )


GRAD_CHECK_TARGETS = OrderedDict(
    adapter=adapter_target,
    contrastive=contrastive_target,
    retrieve_key=retrieve_key_target,
    degradation_attention=degradation_attention_target,
    refine_attention=refine_attention_target,
    stage=stage_target,
    transformer_block=transformer_block_target,
    model=model_target,
)


def build_target(name: str, seed: int = 0) -> GradCheckTarget:
    if name not in GRAD_CHECK_TARGETS:
        raise ParameterError(f"unknown grad-check target {name!r}; expected one of {list(GRAD_CHECK_TARGETS)}")
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    return GRAD_CHECK_TARGETS[name](generator)


def run_grad_checks(
    names: Sequence[str], seed: int = 0, eps: float = 1e-5, tolerance: float = 1e-4
) -> "OrderedDict[str, GradCheckReport]":
    """
    依次检查若干目标

    Args:
        names: 目标名列表（"all" 表示全部）
        seed: 模块初始化与输入的种子
        eps: 差分步长
        tolerance: 最大相对误差阈值

    Returns:
        目标名 -> GradCheckReport
    """
    if "all" in names:
        names = list(GRAD_CHECK_TARGETS)
    reports = OrderedDict()
    for name in names:
        target = build_target(name, seed)
        report = grad_check(
            target.f,
            target.params,
            eps=eps,
            num_coords=target.num_coords,
            seed=seed,
            residual_fn=target.residual_fn,
            tolerance=tolerance,
        )
        logger.info(f"{name}: {report.summary()}")
        reports[name] = report
    return reports
