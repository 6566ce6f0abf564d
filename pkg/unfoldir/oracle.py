"""
Classical Oracle - 经典 ISTA 参考实现

职责：
1. LinearProblem：显式矩阵 Φ、观测 y、λ、步长 ρ、初值 x⁰
2. ista_iterate：x⁽ᵏ⁾ = soft(x⁽ᵏ⁻¹⁾ − ρΦᵀ(Φx⁽ᵏ⁻¹⁾ − y), ρλ)
3. objective：½‖Φx − y‖² + λ‖x‖₁
4. 幂迭代估计 L = λ_max(ΦᵀΦ)，压缩感知测试实例，迭代轨迹文本

纯 numpy 稠密矩阵运算，不依赖任何可学习组件。
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass
class LinearProblem:
    phi: np.ndarray
    y: np.ndarray
    lam: float
    rho: float
    x0: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.phi.ndim != 2:
            raise ShapeError(f"Phi must be a matrix, got shape {self.phi.shape}")
        m, n = self.phi.shape
        if self.y.shape != (m,):
            raise ShapeError(f"y has shape {self.y.shape}, expected ({m},)")
        self.x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=np.float64).reshape(-1)
        if self.x0.shape != (n,):
            raise ShapeError(f"x0 has shape {self.x0.shape}, expected ({n},)")
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.x0))):
            raise ParameterError("problem entries must be finite")
        if self.lam < 0:
            raise ParameterError(f"lam must be >= 0, got {self.lam}")
        if self.rho <= 0:
            raise ParameterError(f"rho must be > 0, got {self.rho}")

    @property
    def threshold(self) -> float:
        return self.rho * self.lam


def soft_threshold(z: np.ndarray, t: float) -> np.ndarray:
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lipschitz_constant(phi: np.ndarray, iterations: int = 100, seed: int = 0) -> float:
    """幂迭代估计 ΦᵀΦ 的最大特征值"""
    phi = np.asarray(phi, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(phi.shape[1])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iterations):
        w = phi.T @ (phi @ v)
        estimate = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return estimate


def ista_step(p: LinearProblem, x: np.ndarray) -> np.ndarray:
    z = x - p.rho * (p.phi.T @ (p.phi @ x - p.y))
    return soft_threshold(z, p.threshold)


def ista_iterate(p: LinearProblem, num_iterations: int) -> List[np.ndarray]:
    """返回 x⁽¹⁾…x⁽ᴷ⁾"""
    if num_iterations < 0:
        raise ParameterError(f"K must be >= 0, got {num_iterations}")
    iterates, x = [], p.x0
    for _ in range(num_iterations):
        x = ista_step(p, x)
        iterates.append(x)
    return iterates


def objective(p: LinearProblem, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (p.phi.shape[1],):
        raise ShapeError(f"x has shape {x.shape}, expected ({p.phi.shape[1]},)")
    residual = p.phi @ x - p.y
    return float(0.5 * residual @ residual + p.lam * np.abs(x).sum())


def compressive_sensing_instance(
    m: int = 32, n: int = 64, sparsity: int = 5, lam: float = 0.05, seed: int = 7, step_scale: float = 1.0
) -> Tuple[LinearProblem, np.ndarray]:
    """
    Gaussian 压缩感知实例

    Φ 的元素 ~ N(0, 1/m)，x_true 为 sparsity-稀疏（幅值 1~2，随机符号），y = Φ x_true，
    ρ = step_scale / L。

    Returns:
        (LinearProblem, x_true)
    """
    if not 0 < sparsity <= n:
        raise ParameterError(f"sparsity must lie in 1..{n}, got {sparsity}")
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((m, n)) / np.sqrt(m)
    x_true = np.zeros(n)
    support = rng.choice(n, size=sparsity, replace=False)
    x_true[support] = rng.uniform(1.0, 2.0, size=sparsity) * rng.choice([-1.0, 1.0], size=sparsity)
    y = phi @ x_true
    rho = step_scale / lipschitz_constant(phi, seed=seed)
    return LinearProblem(phi=phi, y=y, lam=lam, rho=rho), x_true


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """‖a − b‖ / max(‖b‖, 1e-12)"""
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12))


def trace_text(p: LinearProblem, iterates: List[np.ndarray]) -> str:
    """每个迭代一行：k、目标函数值、非零个数、迭代向量"""
    lines = [f"# m={p.phi.shape[0]} n={p.phi.shape[1]} lam={p.lam!r} rho={p.rho!r}"]
    lines.append(f"0\tobjective={objective(p, p.x0):.12e}\tnnz={int(np.count_nonzero(p.x0))}")
    for k, x in enumerate(iterates, start=1):
        values = " ".join(f"{v:.10e}" for v in x)
        lines.append(f"{k}\tobjective={objective(p, x):.12e}\tnnz={int(np.count_nonzero(x))}\t{values}")
    return "\n".join(lines) + "\n"
