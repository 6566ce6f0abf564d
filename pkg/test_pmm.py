"""
Test PMM

验证近端映射模块及其 Transformer 组件：
1. ProxConfig 的参数检查
2. 软阈值的手算值
3. 零初始化的 TransformerBlock / learned PMM 是恒等映射
4. 通道注意力权重为行随机矩阵
5. 软阈值与网格上暴力求解的近端映射一致，且是非扩张的
"""

import pytest
import torch

from unfoldir.blocks import TransformerBlock, head_count, transformer_block_forward
from unfoldir.errors import ParameterError, ShapeError
from unfoldir.pmm import ProximalMapping, ProxConfig, pmm_forward, soft_threshold


def test_prox_config():
    """测试 ProxConfig 校验"""
    print("\n=== Test 1: ProxConfig ===\n")

    assert ProxConfig().mode == "learned"
    assert ProxConfig("soft_threshold", 0.0).threshold == 0.0
    with pytest.raises(ParameterError):
        ProxConfig("median")
    with pytest.raises(ParameterError):
        ProxConfig("soft_threshold")
    with pytest.raises(ParameterError):
        ProxConfig("soft_threshold", -0.1)
    with pytest.raises(ParameterError):
        ProxConfig("identity", 0.5)
    print("  ✅ Pass")


def test_soft_threshold():
    """测试软阈值"""
    print("\n=== Test 2: Soft threshold ===\n")

    z = torch.tensor([-3.0, -0.5, 0.0, 0.5, 1.0, 3.0])
    expected = torch.tensor([-2.0, 0.0, 0.0, 0.0, 0.0, 2.0])
    assert torch.equal(soft_threshold(z, 1.0), expected)
    assert torch.equal(pmm_forward(z, ProxConfig("soft_threshold", 1.0)), expected)
    assert torch.equal(soft_threshold(z, 0.0), z)

    assert pmm_forward(z, ProxConfig("identity")) is z
    with pytest.raises(ParameterError):
        pmm_forward(z, ProxConfig("learned"), blocks=[])
    print("  ✅ Pass")


def test_zero_init_learned_prox_is_identity():
    """测试零初始化时 learned PMM 为恒等"""
    print("\n=== Test 3: Identity at init ===\n")

    torch.manual_seed(0)
    x = torch.rand(2, 8, 6, 6)
    prox = ProximalMapping(ProxConfig(), channels=8, num_blocks=2, head_channels=4)
    assert len(prox.blocks) == 2
    assert torch.equal(prox(x), x)

    trained = ProximalMapping(ProxConfig(), channels=8, num_blocks=2, head_channels=4, zero_init=False)
    assert not torch.allclose(trained(x), x)

    with pytest.raises(ParameterError):
        ProximalMapping(ProxConfig(), channels=8, num_blocks=0)
    assert len(ProximalMapping(ProxConfig("soft_threshold", 0.1)).blocks) == 0
    print("  ✅ Pass")


def test_transformer_block():
    """测试 TransformerBlock"""
    print("\n=== Test 4: Transformer block ===\n")

    torch.manual_seed(0)
    block = TransformerBlock(8, heads=head_count(8, 4))
    x = torch.rand(1, 8, 5, 7)
    assert transformer_block_forward(block, x).shape == x.shape

    attn = block.attention_weights(x)
    assert attn.shape == (1, 2, 4, 4)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(1, 2, 4), atol=1e-5)
    assert attn.min() >= 0.0

    assert head_count(8, 16) == 1
    with pytest.raises(ShapeError):
        transformer_block_forward(block, torch.rand(1, 4, 5, 7))
    with pytest.raises(ShapeError):
        TransformerBlock(6, heads=4)
    print("  ✅ Pass")


def test_soft_threshold_matches_grid_minimizer():
    """测试软阈值等于 ½(x−z)² + t|x| 在网格上的最小点"""
    print("\n=== Test 5: Soft threshold vs. grid search ===\n")

    generator = torch.Generator().manual_seed(0)
    threshold = 0.7
    z = torch.rand(1000, generator=generator, dtype=torch.float64) * 6.0 - 3.0
    grid = torch.arange(-40000, 40001, dtype=torch.float64) * 1e-4

    worst = 0.0
    for chunk in z.split(25):
        objective = 0.5 * (grid[None, :] - chunk[:, None]) ** 2 + threshold * grid.abs()[None, :]
        brute = grid[objective.argmin(dim=1)]
        worst = max(worst, (brute - soft_threshold(chunk, threshold)).abs().max().item())
    print(f"  max |grid − closed form| = {worst:.2e}")
    assert worst <= 2e-4

    a = torch.randn(200, 16, generator=generator, dtype=torch.float64)
    b = torch.randn(200, 16, generator=generator, dtype=torch.float64)
    gap = (soft_threshold(a, threshold) - soft_threshold(b, threshold)).norm(dim=1)
    assert torch.all(gap <= (a - b).norm(dim=1) + 1e-12)
    print("  ✅ Pass")
