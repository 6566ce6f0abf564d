"""
Test Hierarchical Unfolder

验证层级展开网络：
1. 阶段路径校验（U 形、相邻层、到达最深层）
2. W / W⁻¹ 往返误差
3. 初始化时整个网络是恒等映射（PSNR > 40 dB）
4. 输入尺寸检查、逐层输入的形状
5. restore 截断到 [0, 1]，残差输出模式
6. ISTA 调试配置：Φ = I、λ = 0、ρ = 1 时一步到 y
"""

import numpy as np
import pytest
import torch

from unfoldir.config import ModelConfig
from unfoldir.errors import ConfigError, ParameterError, ShapeError
from unfoldir.metrics import psnr
from unfoldir.unfolder import (
    ConstantDegradation,
    DebugUnfolder,
    LevelPlan,
    LevelTransform,
    RestorationSystem,
    UnfoldingNet,
    ista_mode_forward,
    restore,
    validate_schedule,
)

SMALL = dict(base_channels=8, num_levels=2, blocks=[1, 1], head_channels=4)


def _model(seed: int = 0, **overrides) -> UnfoldingNet:
    torch.manual_seed(seed)
    return UnfoldingNet(ModelConfig(**dict(SMALL, **overrides)), embed_dim=6)


def test_schedule_validation():
    """测试阶段路径"""
    print("\n=== Test 1: Stage schedule ===\n")

    validate_schedule([0, 1, 0], 2)
    validate_schedule([0, 1, 1, 0], 2)
    validate_schedule([0, 0, 1, 2, 2, 1, 0], 3)

    for schedule, levels in [
        ([], 2),
        ([1, 0], 2),
        ([0, 1], 2),
        ([0, 0], 2),
        ([0, 2, 1, 0], 3),
        ([0, 1, 0, 1, 0], 2),
        ([0, 1, 2, 0], 2),
    ]:
        with pytest.raises(ConfigError):
            validate_schedule(schedule, levels)

    plan = LevelPlan.from_config(ModelConfig(**SMALL))
    assert plan.channels == (8, 16)
    assert plan.schedule == (0, 1, 1, 0)
    assert plan.decoder_side == [False, False, False, True]
    assert plan.pmm_blocks == [1, 1, 1, 1]

    with pytest.raises(ConfigError):
        UnfoldingNet(ModelConfig(**dict(SMALL, stage_schedule=[0, 0])), embed_dim=6)
    print("  ✅ Pass")


@pytest.mark.parametrize("init", ["orthonormal", "identity_padded", "random"])
def test_transform_round_trip(init):
    """测试 W⁻¹(W y) ≈ y"""
    print(f"\n=== Test 2: Round trip ({init}) ===\n")

    torch.manual_seed(0)
    transform = LevelTransform(8, init)
    y = torch.rand(2, 3, 8, 8)
    error = transform.round_trip_error(y)
    print(f"  max error: {error:.2e}")
    assert error < 1e-5
    assert transform.project(y).shape == (2, 8, 8, 8)

    with pytest.raises(ShapeError):
        transform.project(torch.rand(1, 4, 8, 8))
    with pytest.raises(ShapeError):
        transform.back_project(torch.rand(1, 3, 8, 8))
    print("  ✅ Pass")


def test_identity_at_init():
    """测试初始化时网络为恒等映射"""
    print("\n=== Test 3: Identity at init ===\n")

    model = _model()
    y = torch.rand(2, 3, 16, 16)
    d = torch.nn.functional.normalize(torch.randn(2, 6), dim=-1)
    with torch.no_grad():
        out = model(y, d)
    value = psnr(y[0].permute(1, 2, 0).numpy(), out[0].permute(1, 2, 0).numpy())
    print(f"  PSNR(y, model(y)) = {value:.1f} dB")
    assert value > 40.0
    assert torch.count_nonzero(model.first_stage_residual(y, d)) == 0

    other = _model(seed=1, identity_init=False)
    with torch.no_grad():
        assert not torch.allclose(other(y, d), y, atol=1e-3)
    print("  ✅ Pass")


def test_input_checks():
    """测试输入尺寸"""
    print("\n=== Test 4: Input checks ===\n")

    model = _model()
    with pytest.raises(ShapeError):
        model(torch.rand(1, 3, 15, 16))
    with pytest.raises(ShapeError):
        model(torch.rand(1, 1, 16, 16))
    with pytest.raises(ShapeError):
        model(torch.rand(1, 3, 16, 16), torch.rand(2, 6))

    deep = _model(num_levels=3, blocks=[1, 1, 1])
    with pytest.raises(ShapeError):
        deep(torch.rand(1, 3, 18, 16))
    with torch.no_grad():
        assert deep(torch.rand(1, 3, 20, 12)).shape == (1, 3, 20, 12)
    print("  ✅ Pass")


def test_level_inputs():
    """测试逐层输入"""
    print("\n=== Test 5: Level inputs ===\n")

    model = _model(num_levels=3, blocks=[1, 1, 1])
    y_hat = model.transform.project(torch.rand(1, 3, 16, 16))
    with torch.no_grad():
        inputs = model.level_inputs(y_hat)
        assert [tuple(t.shape[1:]) for t in inputs.encoder] == [(8, 16, 16), (16, 8, 8), (32, 4, 4)]
        assert [tuple(t.shape[1:]) for t in inputs.decoder] == [(8, 16, 16), (16, 8, 8), (32, 4, 4)]
        assert inputs.decoder[2] is inputs.encoder[2]
        expected = inputs.encoder[0] + model.input_up[0](inputs.decoder[1])
        assert torch.allclose(inputs.decoder[0], expected)
    print("  ✅ Pass")


def test_restore_and_residual_output():
    """测试 restore 截断与残差输出"""
    print("\n=== Test 6: restore ===\n")

    model = _model(seed=3, identity_init=False)
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    out = restore(img, None, model)
    assert isinstance(out, np.ndarray) and out.shape == (16, 16, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0

    batch = restore(torch.rand(2, 3, 16, 16), ConstantDegradation(6), model)
    assert batch.shape == (2, 3, 16, 16)
    with pytest.raises(ShapeError):
        restore(np.zeros((16, 16)), None, model)

    residual = _model(seed=3, identity_init=False, residual_output=True)
    y = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(residual(y), y)
    print("  ✅ Pass")


def test_restoration_system():
    """测试退化向量来源"""
    print("\n=== Test 7: Restoration system ===\n")

    torch.manual_seed(0)
    constant = ConstantDegradation(6)
    d = constant(torch.rand(3, 3, 16, 16))
    assert d.shape == (3, 6)
    assert torch.allclose(d.norm(dim=-1), torch.ones(3), atol=1e-6)

    system = RestorationSystem(_model(), ConstantDegradation(6), frozen=True)
    assert not any(p.requires_grad for p in system.degradation.parameters())
    with torch.no_grad():
        assert system(torch.rand(1, 3, 16, 16)).shape == (1, 3, 16, 16)
    trainable = RestorationSystem(_model(), ConstantDegradation(6), frozen=False)
    assert all(p.requires_grad for p in trainable.degradation.parameters())
    print("  ✅ Pass")


def test_ista_mode():
    """测试 ISTA 调试配置"""
    print("\n=== Test 8: ISTA mode ===\n")

    y = np.array([0.5, -1.0, 2.0])
    iterates = ista_mode_forward(y, np.eye(3), rho=1.0, lam=0.0, num_stages=3)
    assert len(iterates) == 3
    for x in iterates:
        np.testing.assert_allclose(x, y, atol=1e-15)

    shrunk = ista_mode_forward(y, np.eye(3), rho=1.0, lam=0.75, num_stages=1)[0]
    np.testing.assert_allclose(shrunk, [0.0, -0.25, 1.25], atol=1e-15)

    unfolder = DebugUnfolder(torch.eye(3, dtype=torch.float64), 1.0, 0.0, 2)
    assert unfolder.is_debug_mode()
    assert len(ista_mode_forward(y, np.eye(3), 1.0, 0.0, 2, unfolder=unfolder)) == 2
    with pytest.raises(ConfigError):
        ista_mode_forward(y, np.eye(3), 1.0, 0.0, 2, unfolder=_model())

    with pytest.raises(ShapeError):
        ista_mode_forward(np.zeros(4), np.eye(3), 1.0, 0.0, 1)
    with pytest.raises(ParameterError):
        ista_mode_forward(y, np.eye(3), 1.0, 0.0, 0)
    with pytest.raises(ParameterError):
        ista_mode_forward(y, np.eye(3), 1.0, -1.0, 1)
    print("  ✅ Pass")
