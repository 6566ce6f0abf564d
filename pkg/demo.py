#!/usr/bin/env python3
"""
unfoldir - Quick Demo

快速演示核心组件（CPU 上几秒内完成，不写文件）
"""

import sys
from pathlib import Path

# 添加项目路径
sys.path.insert(0, str(Path(__file__).parent))

print("="*70)
print("unfoldir - Quick Demo")
print("="*70)
print()

# 演示 1: 验证导入
print("1. Testing imports...")
try:
    import numpy as np
    import torch

    from unfoldir.config import ModelConfig, load_config
    from unfoldir.degradations import apply_noise
    from unfoldir.encoder import DegradationEncoder, LabelSet, score_labels
    from unfoldir.metrics import psnr
    from unfoldir.oracle import compressive_sensing_instance, ista_iterate, relative_error
    from unfoldir.unfolder import UnfoldingNet, ista_mode_forward
    print("   ✅ All modules imported successfully")
except ImportError as e:
    print(f"   ❌ Import failed: {e}")
    sys.exit(1)

# 演示 2: 展开骨架的调试配置与 ISTA 一致
print()
print("2. Unfolded skeleton vs. ISTA...")
problem, _ = compressive_sensing_instance(m=32, n=64, sparsity=5, seed=0)
reference = ista_iterate(problem, 50)
unfolded = ista_mode_forward(problem.y, problem.phi, problem.rho, problem.lam, 50, x0=problem.x0)
worst = max(relative_error(a, b) for a, b in zip(unfolded, reference))
print(f"   50 stages, max relative error {worst:.2e}")

# 演示 3: 初始化时复原网络是恒等映射
print()
print("3. Restorer at initialisation...")
config = load_config(Path(__file__).parent / "configs" / "desk.cfg")
torch.manual_seed(0)
model = UnfoldingNet(ModelConfig(**dict(config.model.model_dump(), base_channels=8, head_channels=4)), 16)
rng = np.random.default_rng(0)
clean = rng.uniform(size=(32, 32, 3))
noisy = apply_noise(clean, 25.0, seed=0)
with torch.no_grad():
    out = model(torch.from_numpy(noisy).permute(2, 0, 1).unsqueeze(0).float())
out = out[0].permute(1, 2, 0).numpy()
print(f"   stage levels: {list(model.plan.schedule)}")
print(f"   PSNR(input, output) = {psnr(noisy, out):.1f} dB")
print(f"   PSNR(clean, input)  = {psnr(clean, noisy):.2f} dB")

# 演示 4: 随机初始化编码器的标签打分
print()
print("4. Degradation encoder (untrained)...")
encoder = DegradationEncoder(config.encoder, config.label_list())
probs = score_labels(encoder, torch.from_numpy(noisy).permute(2, 0, 1).unsqueeze(0).float(), LabelSet(encoder.labels))
for label, p in zip(encoder.labels, probs[0].tolist()):
    print(f"   {label:24} {p:.3f}")

# 演示 5: 完整流程
print()
print("5. Full pipeline (CLI):")
print()
print("   python -m unfoldir synth --config configs/desk.cfg --out runs/data")
print("   python -m unfoldir train-encoder --config configs/desk.cfg --data runs/data --out runs/encoder")
print("   python -m unfoldir train-restorer --config configs/desk.cfg --data runs/data \\")
print("       --encoder runs/encoder --out runs/restorer")
print("   python -m unfoldir eval --data runs/data --checkpoint runs/restorer --out runs/eval")
print("   python -m unfoldir heatmap --config configs/desk.cfg --data runs/data --checkpoint runs/encoder --out runs/eval")
print()
print("   Then check a run directory:")
print()
print("   ./check-status.sh runs/restorer")
print()

print("="*70)
print("✅ Demo complete!")
print("="*70)
print()
print("For full documentation, see README.md")
print()
