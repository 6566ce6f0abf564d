#!/usr/bin/env python3
"""
unfoldir - 运行状态查看工具

查看数据集目录、训练运行目录（encoder / restorer）以及评估报告目录的概况
"""

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

from unfoldir.checkpoints import CheckpointManager
from unfoldir.dataset import DatasetManifest, is_validation
from unfoldir.errors import UnfoldirError
from unfoldir.metrics import read_report_aggregates


class RunStatusChecker:
    """运行状态检查器"""

    def __init__(self, path: str):
        self.path = Path(path).absolute()
        self.manifest_path = self.path / "manifest.txt"
        self.report_path = self.path / "report.txt"
        self.manager = CheckpointManager(self.path)

    def check_run_exists(self) -> bool:
        """目录里至少有一种可识别的产物"""
        if not self.path.is_dir():
            return False
        return (
            self.manifest_path.exists()
            or self.report_path.exists()
            or self.manager.history_file.exists()
            or bool(self.manager.list_checkpoints())
        )

    def print_header(self):
        print("=" * 70)
        print("📊 unfoldir - 运行状态报告")
        print("=" * 70)
        print(f"路径: {self.path}")
        print(f"🕐 报告时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        print()

    def print_dataset(self):
        """按退化类型统计清单"""
        if not self.manifest_path.exists():
            return
        print("🗂  数据集")
        print("-" * 70)

        manifest = DatasetManifest.load(self.path)
        total = len(manifest.records)
        print(f"数据集种子: {manifest.dataset_seed}")
        print(f"记录数: {total}")

        for kind in manifest.kinds():
            indices = [i for i, r in enumerate(manifest.records) if r.kind == kind]
            val = sum(1 for i in indices if is_validation(i))

            bar_length = 30
            filled = int(bar_length * len(indices) / total) if total else 0
            bar = "█" * filled + "░" * (bar_length - filled)
            print(f"{kind:10} [{bar}] {len(indices):5} (val {val})")
        print()

    def print_checkpoints(self, limit: int = 10):
        checkpoints = self.manager.list_checkpoints()
        if not checkpoints:
            return
        print("💾 检查点")
        print("-" * 70)

        for i, metadata in enumerate(checkpoints[-limit:], 1):
            print(f"{i:2}. [{metadata['checkpoint_id']}] {metadata.get('description', '')}")
            print(f"    类型: {metadata.get('kind', 'N/A')}  种子: {metadata.get('seed', 'N/A')}")
            print(f"    参数量: {metadata.get('parameter_count', 'N/A')}  配置哈希: {metadata.get('config_hash', 'N/A')}")
            if metadata.get("preset"):
                print(f"    预设: {metadata['preset']}")

        if len(checkpoints) > limit:
            print(f"    ... 还有 {len(checkpoints) - limit} 个检查点")
        print()

    def print_progress(self):
        if not self.manager.history_file.exists():
            return
        print("📈 训练进度")
        print("-" * 70)

        metrics = self.manager.get_progress_metrics()
        print(f"已记录 epoch: {metrics['epochs_logged']}")
        if metrics["final_loss"] is not None:
            print(f"最终损失: {metrics['final_loss']:.6f}")
        if metrics["best_val_psnr"] is not None:
            print(f"最佳验证 PSNR: {metrics['best_val_psnr']:.2f} dB")
        print()

    def print_recent_epochs(self, count: int = 5):
        if not self.manager.history_file.exists():
            return
        print("🕒 最近 epoch")
        print("-" * 70)

        history = json.loads(self.manager.history_file.read_text(encoding="utf-8"))
        for entry in history[-count:]:
            fields = [f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}"
                      for key, value in entry.items() if key != "epoch"]
            print(f"  epoch {entry.get('epoch')}: " + "  ".join(fields))
        print()

    def print_report(self):
        if not self.report_path.exists():
            return
        print("🎯 评估报告")
        print("-" * 70)

        for name, entry in read_report_aggregates(self.report_path).items():
            line = f"{name:10} n={int(entry['count']):5}  PSNR {entry['psnr_db']:6.2f} dB  SSIM {entry['ssim']:.4f}"
            if "input_psnr_db" in entry:
                line += f"  增益 {entry['psnr_db'] - entry['input_psnr_db']:+6.2f} dB"
            print(line)
        print()

    def run(self, detailed: bool = True):
        """运行完整的状态检查"""
        self.print_header()
        self.print_dataset()
        self.print_checkpoints(limit=10 if detailed else 3)
        self.print_progress()
        if detailed:
            self.print_recent_epochs()
        self.print_report()
        print("=" * 70)


def main():
    parser = argparse.ArgumentParser(description="查看 unfoldir 数据集 / 训练运行 / 评估报告的状态")
    parser.add_argument("path", nargs="?", default=".", help="目录路径（默认为当前目录）")
    parser.add_argument("--simple", action="store_true", help="简化输出（只显示关键信息）")
    args = parser.parse_args()

    checker = RunStatusChecker(args.path)
    if not checker.check_run_exists():
        print("❌ 错误: 目录不存在，或其中没有清单、检查点、history.json 或 report.txt")
        print(f"   路径: {args.path}")
        sys.exit(1)

    try:
        checker.run(detailed=not args.simple)
    except UnfoldirError as e:
        print(f"❌ 错误: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
