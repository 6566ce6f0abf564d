"""
Test D-GDM

验证退化引导的梯度下降模块：
1. key 检索：权重为概率分布，零向量时取 key 均值，偏置集中时取单个 key
2. DegradationAttention 保持形状，key 维度不符时报错
3. 梯度步：零初始化时 ẑ = x̂；恒等模式 ẑ = x̂ − ρ(x̂ − ŷ)；显式矩阵与手算一致
4. 步长 ρ 的参数化
5. 不同退化向量得到不同的梯度步
6. Φ̃ / Φᵀ 的函数形式
7. 检索 logits 为 (ln2, 0) 时 key = (2K₁ + K₂)/3；Φ̃ 把零输入映射为零
8. 梯度步关于 ρ 线性；恒等模式按 |1 − ρ| 几何收敛到 ŷ
"""

import math

import numpy as np
import pytest
import torch

from unfoldir.blocks import zero_module
from unfoldir.dgdm import (
    DGDMStage,
    DegradationAttention,
    KeyDatabase,
    RefineAttention,
    StageState,
    StepSize,
    degradation_transform,
    refine_transform,
    retrieval_weights,
    retrieve_key,
    stage_update,
)
from unfoldir.errors import ParameterError, ShapeError


def _db(embed_dim: int = 6) -> KeyDatabase:
    torch.manual_seed(0)
    return KeyDatabase([8, 16], num_keys=5, embed_dim=embed_dim)


def test_key_retrieval():
    """测试 key 检索"""
    print("\n=== Test 1: Key retrieval ===\n")

    db = _db()
    d = torch.nn.functional.normalize(torch.randn(3, 6), dim=-1)
    weights = retrieval_weights(d, db.projection(0))
    assert weights.shape == (3, 5)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(3), atol=1e-6)
    assert retrieve_key(d, db, 1).shape == (3, 16)

    with torch.no_grad():
        db.projections[0].bias.zero_()
    uniform = retrieve_key(torch.zeros(2, 6), db, 0)
    assert torch.allclose(uniform, db.keys[0].mean(dim=0).expand(2, -1), atol=1e-6)

    with torch.no_grad():
        db.projections[0].weight.zero_()
        db.projections[0].bias.copy_(torch.tensor([0.0, 0.0, 50.0, 0.0, 0.0]))
    picked = retrieve_key(d, db, 0)
    assert torch.allclose(picked, db.keys[0][2].expand(3, -1), atol=1e-5)

    with pytest.raises(ParameterError):
        retrieve_key(d, db, 2)
    with pytest.raises(ShapeError):
        retrieve_key(torch.zeros(1, 4), db, 0)
    with pytest.raises(ParameterError):
        KeyDatabase([8], num_keys=0, embed_dim=6)
    with pytest.raises(ParameterError):
        KeyDatabase([8], num_keys=3, embed_dim=6, share_retrieval=False).projection(0)
    print("  ✅ Pass")


def test_degradation_attention():
    """测试 Φ̃ 的形状与注意力权重"""
    print("\n=== Test 2: Degradation attention ===\n")

    torch.manual_seed(0)
    module = DegradationAttention(8, heads=2)
    x = torch.rand(2, 8, 6, 10)
    key = torch.randn(2, 8)
    assert module(x, key).shape == x.shape

    attn = module.attention_weights(x, key)
    assert attn.shape == (2, 2, 4, 4)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(2, 2, 4), atol=1e-5)

    with pytest.raises(ShapeError):
        module(x, torch.randn(2, 4))
    with pytest.raises(ShapeError):
        DegradationAttention(8, heads=3)
    print("  ✅ Pass")


def test_zero_init_stage_is_identity():
    """测试零初始化的梯度步"""
    print("\n=== Test 3: Zero-initialised stage ===\n")

    db = _db()
    torch.manual_seed(1)
    stage = DGDMStage(8, level=0, heads=2, zero_init=True)
    x, y = torch.rand(2, 8, 8, 8), torch.rand(2, 8, 8, 8)
    d = torch.randn(2, 6)
    assert torch.equal(stage(x, y, d, db), x)
    assert torch.count_nonzero(stage.residual(x, y, d, db)) == 0

    with pytest.raises(ShapeError):
        stage(x, y[:, :, :4], d, db)
    with pytest.raises(ParameterError):
        stage(x, y, d, None)
    with pytest.raises(ParameterError):
        DGDMStage(8, mode="unknown")
    print("  ✅ Pass")


def test_identity_and_explicit_stages():
    """测试恒等模式与显式矩阵"""
    print("\n=== Test 4: Identity / explicit stages ===\n")

    stage = DGDMStage(4, mode="identity", rho_init=0.25)
    x, y = torch.rand(1, 4, 3, 3), torch.rand(1, 4, 3, 3)
    expected = x - stage.step() * (x - y)
    assert torch.allclose(stage(x, y), expected, atol=1e-6)
    assert torch.allclose(stage_update(stage, StageState(x, y, rho=1.0)), y, atol=1e-6)

    rng = np.random.default_rng(0)
    phi = rng.standard_normal((3, 5))
    x_vec, y_vec = rng.standard_normal(5), rng.standard_normal(3)
    explicit = DGDMStage.explicit(torch.from_numpy(phi), rho=0.1)
    z = explicit.stage_update(
        StageState(torch.from_numpy(x_vec).reshape(1, 5, 1, 1), torch.from_numpy(y_vec).reshape(1, 3, 1, 1))
    )
    by_hand = x_vec - 0.1 * phi.T @ (phi @ x_vec - y_vec)
    np.testing.assert_allclose(z.reshape(-1).numpy(), by_hand, atol=1e-12)
    assert explicit.is_explicit and not stage.is_explicit
    print("  ✅ Pass")


def test_step_size():
    """测试步长参数化"""
    print("\n=== Test 5: Step size ===\n")

    assert abs(float(StepSize(0.5)()) - 0.5) < 1e-6
    assert float(StepSize(0.0, learnable=False)()) == 0.0
    assert float(StepSize(2.0, learnable=False)()) == 2.0
    with pytest.raises(ParameterError):
        StepSize(0.0)
    with pytest.raises(ParameterError):
        StepSize(-1.0, learnable=False)

    step = StepSize(0.5)
    step.raw.data.fill_(-30.0)
    assert float(step()) > 0.0
    print("  ✅ Pass")


def test_degradation_vector_changes_update():
    """测试退化向量影响梯度步"""
    print("\n=== Test 6: Guidance ===\n")

    db = _db()
    torch.manual_seed(2)
    stage = DGDMStage(8, level=0, heads=2, zero_init=False)
    x, y = torch.rand(1, 8, 8, 8), torch.rand(1, 8, 8, 8)
    a = stage(x, y, torch.tensor([[1.0, 0, 0, 0, 0, 0]]), db)
    b = stage(x, y, torch.tensor([[0, 0, 0, 0, 0, 1.0]]), db)
    print(f"  max difference: {float((a - b).abs().max()):.3e}")
    assert not torch.allclose(a, b)

    private = DGDMStage(16, level=1, heads=2, embed_dim=6, num_keys=5, zero_init=False)
    assert private.retrieval is not None
    key = private.key(torch.randn(1, 6), db, 1, torch.zeros(1, 16))
    assert key.shape == (1, 16)
    print("  ✅ Pass")


def test_transform_wrappers():
    """测试 Φ̃ / Φᵀ 的函数形式"""
    print("\n=== Test 7: Transform wrappers ===\n")

    torch.manual_seed(3)
    phi = DegradationAttention(8, heads=2)
    x, key = torch.rand(2, 8, 6, 6), torch.randn(2, 8)
    out = degradation_transform(phi, x, key)
    assert out.shape == x.shape
    assert torch.equal(out, phi(x, key))

    refine = RefineAttention(8, heads=2)
    r = torch.randn(2, 8, 6, 6)
    assert refine_transform(refine, r).shape == r.shape
    zero_module(refine.project_out)
    assert torch.count_nonzero(refine_transform(refine, r)) == 0
    print("  ✅ Pass")


def test_retrieval_with_fixed_logits():
    """测试 logits (ln2, 0) 的检索结果与零输入的 Φ̃"""
    print("\n=== Test 8: Fixed logits / zero input ===\n")

    torch.manual_seed(0)
    db = KeyDatabase([8], num_keys=2, embed_dim=6).double()
    projection = db.projection(0)
    with torch.no_grad():
        projection.weight.zero_()
        projection.bias.copy_(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64))
    d = torch.randn(3, 6, dtype=torch.float64)
    key = retrieve_key(d, db, 0)
    keys = db.keys[0].detach()
    expected = ((2.0 * keys[0] + keys[1]) / 3.0).expand(3, -1)
    assert torch.allclose(key, expected, rtol=0.0, atol=1e-10)

    module = DegradationAttention(8, 2).double()
    out = degradation_transform(module, torch.zeros(2, 8, 5, 5, dtype=torch.float64), torch.randn(2, 8, dtype=torch.float64))
    assert out.shape == (2, 8, 5, 5)
    assert out.abs().max().item() == 0.0
    print("  ✅ Pass")


def test_update_is_linear_in_rho():
    """测试 ẑ 关于 ρ 线性（Φᵀ(Φ̃x̂ − ŷ) 与 ρ 无关）"""
    print("\n=== Test 9: Linear in rho ===\n")

    db = _db().double()
    stage = DGDMStage(8, level=0, heads=2, zero_init=False).double()
    torch.manual_seed(1)
    x = torch.randn(1, 8, 6, 6, dtype=torch.float64)
    y = torch.randn(1, 8, 6, 6, dtype=torch.float64)
    d = torch.nn.functional.normalize(torch.randn(1, 6, dtype=torch.float64), dim=-1)

    with torch.no_grad():
        assert torch.equal(stage_update(stage, StageState(x, y, rho=0.0), d, db), x)
        directions = [(x - stage_update(stage, StageState(x, y, rho=rho), d, db)) / rho for rho in (0.1, 0.5, 2.0)]
    assert directions[0].abs().max().item() > 0.0
    for other in directions[1:]:
        assert (other - directions[0]).abs().max().item() < 1e-8
    print("  ✅ Pass")


@pytest.mark.parametrize("rho", [0.5, 1.5])
def test_identity_stage_converges_geometrically(rho):
    """测试恒等模式的误差每步乘以 |1 − ρ|"""
    print(f"\n=== Test 10: Geometric convergence (rho={rho}) ===\n")

    stage = DGDMStage(3, mode="identity", rho_init=rho, learn_rho=False)
    torch.manual_seed(2)
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    y = torch.randn(1, 3, 4, 4, dtype=torch.float64)

    errors = [(x - y).norm().item()]
    for _ in range(8):
        x = stage(x, y)
        errors.append((x - y).norm().item())
    ratios = [b / a for a, b in zip(errors, errors[1:])]
    print(f"  ratios: {[round(r, 8) for r in ratios]}")
    assert all(abs(r - abs(1.0 - rho)) < 1e-6 for r in ratios)

    scalar = DGDMStage(1, mode="identity")
    one = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    z = stage_update(scalar, StageState(2.0 * one, one, rho=0.5))
    assert abs(z.item() - 1.5) < 1e-12
    print("  ✅ Pass")
