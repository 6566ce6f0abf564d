"""
CLI - 命令行入口

子命令：
    synth            生成合成数据集（clean/degraded 对 + manifest.txt）
    train-encoder    对比微调退化编码器
    train-restorer   训练复原网络（按预设）
    eval             评估复原检查点，写 report.txt
    heatmap          编码器相似度热力图（微调后或随机初始化）
    degradation-map  导出第一阶段的退化图
    oracle-trace     ISTA 参考轨迹，并与展开骨架的调试配置逐阶段比对
    grad-check       可学习组件的有限差分梯度检查

退出码：0 成功；2 配置错误或用法错误；1 其他运行时错误。
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .checkpoints import resolve_checkpoint
from .config import UnfoldirConfig, apply_runtime_env, load_config
from .dataset import DatasetManifest, PairDataset, generate_dataset, is_validation, read_png, write_png
from .encoder import DegradationEncoder, LabelSet, finetune, load_encoder
from .errors import ConfigError, DatasetError, ParameterError, UnfoldirError
from .gradcheck import GRAD_CHECK_TARGETS, run_grad_checks
from .log_utils import get_logger, setup_logging
from .metrics import dump_degradation_map, similarity_heatmap
from .oracle import compressive_sensing_instance, ista_iterate, relative_error, trace_text
from .substrate import seed_everything
from .training import PRESETS, evaluate, load_restorer, train_restorer
from .unfolder import ista_mode_forward

logger = get_logger("CLI")


def _print_result(result: Dict) -> None:
    print(json.dumps(result, indent=2, default=str))


def _config(args) -> UnfoldirConfig:
    return load_config(args.config).with_seed(args.seed)


def _manifest(path) -> DatasetManifest:
    if path is None:
        raise ConfigError("--data is required (dataset directory or manifest file)")
    return DatasetManifest.load(path)


# ---------------------------------------------------------------------------
# 子命令


def cmd_synth(args) -> int:
    config = _config(args)
    data = config.data
    if args.count is not None and args.count < 1:
        raise ParameterError(f"--count must be >= 1, got {args.count}")
    manifest = generate_dataset(
        args.out,
        data.kinds,
        data.count if args.count is None else args.count,
        data.dataset_seed,
        clean_dir=args.clean_dir or data.clean_dir,
        image_size=data.image_size,
        noise_sigmas=data.noise_sigmas,
        workers=data.workers,
    )
    _print_result({"status": "success", "manifest": manifest.root / "manifest.txt", "records": len(manifest.records)})
    return 0


def cmd_train_encoder(args) -> int:
    config = _config(args)
    result = finetune(_manifest(args.data), config, seed=config.train.seed, run_dir=Path(args.out))
    _print_result(
        {
            "status": "success",
            "checkpoint_id": result.checkpoint_id,
            "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
            "val_accuracy": result.val_accuracy,
        }
    )
    return 0


def cmd_train_restorer(args) -> int:
    config = _config(args)
    result = train_restorer(
        _manifest(args.data),
        config,
        preset=args.preset,
        encoder_checkpoint=args.encoder,
        run_dir=Path(args.out),
        seed=config.train.seed,
    )
    _print_result(
        {
            "status": "success",
            "checkpoint_id": result.checkpoint_id,
            "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
            "final_val_psnr": result.val_psnrs[-1] if result.val_psnrs else None,
            "round_trip_error": result.round_trip_error,
        }
    )
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    system = load_restorer(resolve_checkpoint(args.checkpoint, "restorer"))
    report = evaluate(system, _manifest(args.data), split=args.split, kinds=args.kind)
    path = report.save(Path(args.out) / "report.txt")
    _print_result({"status": "success", "report": path, "aggregates": report.aggregates()})
    return 0


def _kind_batches(manifest: DatasetManifest, kinds: Sequence[str], split: str):
    dataset = PairDataset(manifest, kinds, split=split)
    groups: Dict[int, List] = {}
    for item in range(len(dataset)):
        sample = dataset[item]
        groups.setdefault(int(sample["kind"]), []).append(sample["degraded"])
    present = sorted(groups)
    if not present:
        raise DatasetError(f"no {split} images in the manifest")
    return present, [torch.stack(groups[i]) for i in present]


def cmd_heatmap(args) -> int:
    config = _config(args)
    if args.untrained == (args.checkpoint is not None):
        raise ConfigError("heatmap needs exactly one of --checkpoint or --untrained")
    if args.untrained:
        seed_everything(config.train.seed)
        encoder = DegradationEncoder(config.encoder, config.label_list())
    else:
        encoder, config = load_encoder(resolve_checkpoint(args.checkpoint, "encoder"))

    kinds = config.data.kinds
    present, batches = _kind_batches(_manifest(args.data), kinds, args.split)
    labels = LabelSet([encoder.labels[i] for i in present])
    matrix = similarity_heatmap(encoder, batches, labels, rows=[kinds[i] for i in present])
    paths = matrix.save(args.out, stem="heatmap_untrained" if args.untrained else "heatmap")
    print(matrix.to_text(), end="")
    _print_result({"status": "success", "diagonal_dominant": matrix.diagonal_dominant(), **paths})
    return 0


def cmd_degradation_map(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    system = load_restorer(resolve_checkpoint(args.checkpoint, "restorer"))
    if args.image:
        img = read_png(args.image)
        stem = Path(args.image).stem
    else:
        manifest = _manifest(args.data)
        records = [r for i, r in enumerate(manifest.records) if is_validation(i)] or manifest.records
        if not records:
            raise DatasetError("manifest is empty")
        img = read_png(manifest.resolve(records[0].degraded_path))
        stem = Path(records[0].degraded_path).stem

    out_dir = Path(args.out)
    write_png(out_dir / f"{stem}_input.png", img)
    path = dump_degradation_map(system, img, out_dir / f"{stem}_degradation_map.png")
    _print_result({"status": "success", "degradation_map": path})
    return 0


def cmd_oracle_trace(args) -> int:
    seed = 7 if args.seed is None else args.seed
    problem, x_true = compressive_sensing_instance(
        m=args.m, n=args.n, sparsity=args.sparsity, lam=args.lam, seed=seed
    )
    reference = ista_iterate(problem, args.iterations)
    unfolded = ista_mode_forward(
        problem.y, problem.phi, problem.rho, problem.lam, args.iterations, x0=problem.x0
    )
    errors = [relative_error(a, b) for a, b in zip(unfolded, reference)]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "oracle_trace.txt"
    trace_path.write_text(trace_text(problem, reference), encoding="utf-8")
    _print_result(
        {
            "status": "success",
            "trace": trace_path,
            "max_stage_relative_error": max(errors, default=0.0),
            "recovery_error": relative_error(reference[-1], x_true) if reference else None,
        }
    )
    return 0


def cmd_grad_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    reports = run_grad_checks(args.target or ["all"], seed=seed, eps=args.eps, tolerance=args.tolerance)
    lines = [f"{name}\t{report.summary()}" for name, report in reports.items()]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grad_check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))

    passed = all(report.passed for report in reports.values())
    _print_result({"status": "success" if passed else "failed", "targets": len(reports)})
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# 参数解析


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Config file (sections [data] [encoder] [model] [train])")
    common.add_argument("--seed", type=int, help="Seed (overrides dataset and training seeds)")
    common.add_argument("--out", default="out", help="Output directory")
    common.add_argument("--log-level", help="Log level (default: UNFOLDIR_LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(
        prog="unfoldir",
        description="Degradation-guided deep unfolding restoration",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthesize a dataset, fine-tune the encoder, train and evaluate the restorer
  python -m unfoldir synth --config configs/desk.cfg --out runs/data
  python -m unfoldir train-encoder --config configs/desk.cfg --data runs/data --out runs/encoder
  python -m unfoldir train-restorer --config configs/desk.cfg --data runs/data --encoder runs/encoder --out runs/restorer
  python -m unfoldir eval --data runs/data --checkpoint runs/restorer --out runs/eval

  # Verify the unfolding skeleton and the gradients
  python -m unfoldir oracle-trace --iterations 50 --out runs/oracle
  python -m unfoldir grad-check --target all --out runs/gradcheck
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic clean/degraded dataset")
    p.add_argument("--count", type=int, help="Number of records (default: [data] count)")
    p.add_argument("--clean-dir", help="Directory of clean images (default: procedural textures)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-encoder", parents=[common], help="Contrastive fine-tuning of the degradation encoder")
    p.add_argument("--data", help="Dataset directory or manifest file")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("train-restorer", parents=[common], help="Train the unfolding restorer")
    p.add_argument("--data", help="Dataset directory or manifest file")
    p.add_argument("--encoder", help="Encoder checkpoint directory or encoder run directory")
    p.add_argument("--preset", choices=PRESETS, help="Ablation preset (default: [train] preset)")
    p.set_defaults(func=cmd_train_restorer)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a restorer checkpoint")
    p.add_argument("--data", help="Dataset directory or manifest file")
    p.add_argument("--checkpoint", help="Restorer checkpoint directory or run directory")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--kind", action="append", help="Only evaluate this degradation kind (repeatable)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", parents=[common], help="Encoder similarity heat-map")
    p.add_argument("--data", help="Dataset directory or manifest file")
    p.add_argument("--checkpoint", help="Encoder checkpoint directory or run directory")
    p.add_argument("--untrained", action="store_true", help="Use a random-init encoder")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("degradation-map", parents=[common], help="Dump the first-stage degradation map")
    p.add_argument("--checkpoint", help="Restorer checkpoint directory or run directory")
    p.add_argument("--image", help="Degraded PNG (default: first validation record of --data)")
    p.add_argument("--data", help="Dataset directory or manifest file")
    p.set_defaults(func=cmd_degradation_map)

    p = sub.add_parser("oracle-trace", parents=[common], help="ISTA reference trace on a compressive-sensing instance")
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--sparsity", type=int, default=5)
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--iterations", type=int, default=50)
    p.set_defaults(func=cmd_oracle_trace)

    p = sub.add_parser("grad-check", parents=[common], help="Finite-difference gradient checks")
    p.add_argument("--target", action="append", choices=list(GRAD_CHECK_TARGETS) + ["all"])
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse: --help -> 0，用法错误 -> 2
        return 0 if e.code in (0, None) else 2

    setup_logging(args.log_level)
    apply_runtime_env()
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return 2
    except (UnfoldirError, OSError, RuntimeError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
