"""
Test Classical Oracle

验证 ISTA 参考实现，并与展开骨架的调试配置逐阶段对照：
1. 软阈值、幂迭代估计 L
2. ρ = 0.99/L 时目标函数单调不增
3. 不动点：x* 满足 x* = soft(x* − ρΦᵀ(Φx* − y), ρλ)
4. 20 个随机实例上展开骨架与 ISTA 逐阶段相对误差 < 1e-5
5. 非法问题报错
"""

import numpy as np
import pytest

from unfoldir.errors import ParameterError, ShapeError
from unfoldir.oracle import (
    LinearProblem,
    compressive_sensing_instance,
    ista_iterate,
    ista_step,
    lipschitz_constant,
    objective,
    relative_error,
    soft_threshold,
    trace_text,
)
from unfoldir.unfolder import ista_mode_forward


def test_soft_threshold_and_lipschitz():
    """测试软阈值与 L 的估计"""
    print("\n=== Test 1: Building blocks ===\n")

    np.testing.assert_array_equal(soft_threshold(np.array([-2.0, -0.1, 0.0, 0.3, 1.5]), 0.5), [-1.5, 0.0, 0.0, 0.0, 1.0])

    phi = np.random.default_rng(0).standard_normal((12, 20))
    exact = np.linalg.eigvalsh(phi.T @ phi).max()
    estimate = lipschitz_constant(phi, iterations=500)
    print(f"  L exact={exact:.6f} estimate={estimate:.6f}")
    assert abs(estimate - exact) / exact < 1e-4
    assert lipschitz_constant(np.zeros((3, 4))) == 0.0
    print("  ✅ Pass")


def test_objective_monotone():
    """测试 ρ = 0.99/L 时目标函数单调不增"""
    print("\n=== Test 2: Monotone objective ===\n")

    for seed in range(5):
        problem, _ = compressive_sensing_instance(seed=seed, step_scale=0.99)
        values = [objective(problem, problem.x0)] + [objective(problem, x) for x in ista_iterate(problem, 100)]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
        print(f"  seed {seed}: {values[0]:.4f} -> {values[-1]:.4f}")
    print("  ✅ Pass")


def test_fixed_point_and_recovery():
    """测试收敛后的不动点与稀疏恢复"""
    print("\n=== Test 3: Fixed point ===\n")

    problem, x_true = compressive_sensing_instance(m=48, n=64, sparsity=4, lam=0.001, seed=3)
    x_star = ista_iterate(problem, 5000)[-1]
    assert relative_error(ista_step(problem, x_star), x_star) < 1e-6
    error = relative_error(x_star, x_true)
    print(f"  recovery error: {error:.4f}")
    assert error < 0.05
    print("  ✅ Pass")


def test_unfolded_skeleton_matches_ista():
    """测试展开骨架的调试配置与 ISTA 逐阶段一致"""
    print("\n=== Test 4: Skeleton vs ISTA ===\n")

    worst = 0.0
    for seed in range(20):
        problem, _ = compressive_sensing_instance(m=32, n=64, sparsity=5, lam=0.05, seed=seed)
        reference = ista_iterate(problem, 50)
        unfolded = ista_mode_forward(problem.y, problem.phi, problem.rho, problem.lam, 50, x0=problem.x0)
        assert len(unfolded) == len(reference) == 50
        for ours, theirs in zip(unfolded, reference):
            worst = max(worst, relative_error(ours, theirs))
    print(f"  max per-stage relative error: {worst:.2e}")
    assert worst < 1e-5
    print("  ✅ Pass")


def test_trace_text():
    """测试迭代轨迹格式"""
    print("\n=== Test 5: Trace ===\n")

    problem, _ = compressive_sensing_instance(m=8, n=12, sparsity=2, seed=1)
    lines = trace_text(problem, ista_iterate(problem, 3)).splitlines()
    assert lines[0].startswith("# m=8 n=12")
    assert len(lines) == 5
    assert lines[1].startswith("0\tobjective=")
    assert len(lines[4].split("\t")[3].split()) == 12
    print("  ✅ Pass")


def test_invalid_problems():
    """测试非法问题"""
    print("\n=== Test 6: Invalid problems ===\n")

    phi = np.eye(3)
    with pytest.raises(ShapeError):
        LinearProblem(phi=np.ones(3), y=np.ones(3), lam=0.1, rho=1.0)
    with pytest.raises(ShapeError):
        LinearProblem(phi=phi, y=np.ones(4), lam=0.1, rho=1.0)
    with pytest.raises(ShapeError):
        LinearProblem(phi=phi, y=np.ones(3), lam=0.1, rho=1.0, x0=np.ones(2))
    with pytest.raises(ParameterError):
        LinearProblem(phi=phi, y=np.array([1.0, np.nan, 0.0]), lam=0.1, rho=1.0)
    with pytest.raises(ParameterError):
        LinearProblem(phi=phi, y=np.ones(3), lam=-0.1, rho=1.0)
    with pytest.raises(ParameterError):
        LinearProblem(phi=phi, y=np.ones(3), lam=0.1, rho=0.0)
    with pytest.raises(ParameterError):
        ista_iterate(LinearProblem(phi=phi, y=np.ones(3), lam=0.1, rho=1.0), -1)
    with pytest.raises(ParameterError):
        compressive_sensing_instance(sparsity=0)
    with pytest.raises(ShapeError):
        objective(LinearProblem(phi=phi, y=np.ones(3), lam=0.1, rho=1.0), np.ones(2))
    print("  ✅ Pass")
