"""
Test CLI

验证命令行入口：
1. 退出码：--help 0，未知参数 2，配置错误 2，运行时错误 1（含非正的 --count）
2. synth -> train-encoder -> train-restorer -> eval 完整流程（极小配置）
3. heatmap / degradation-map 输出文件
4. oracle-trace 与 grad-check
"""

import tempfile
from pathlib import Path

from unfoldir.cli import main
from unfoldir.dataset import DatasetManifest
from unfoldir.metrics import read_report_aggregates

TINY_CONFIG = """
[data]
kinds = noise, haze
count = 10
image_size = 16

[encoder]
embed_dim = 8
widths = 4, 4, 4, 4
epochs = 1
batch_size = 4
crop_size = 16

[model]
base_channels = 8
num_levels = 2
blocks = 1, 1
head_channels = 4

[train]
epochs = 1
warmup_epochs = 0
batch_size = 4
crop_size = 16
preset = tuned_encoder
"""


def _write_config(tmpdir) -> str:
    path = Path(tmpdir) / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return str(path)


def test_exit_codes():
    """测试退出码"""
    print("\n=== Test 1: Exit codes ===\n")

    assert main(["--help"]) == 0
    assert main(["synth", "--no-such-flag"]) == 2
    assert main([]) == 2

    with tempfile.TemporaryDirectory() as tmpdir:
        bad = Path(tmpdir) / "bad.cfg"
        bad.write_text("[train]\nlearning_rate = 1\n", encoding="utf-8")
        assert main(["synth", "--config", str(bad), "--out", tmpdir]) == 2
        assert main(["synth", "--config", str(Path(tmpdir) / "missing.cfg"), "--out", tmpdir]) == 2
        assert main(["train-encoder", "--out", tmpdir]) == 2
        assert main(["eval", "--data", str(Path(tmpdir) / "nowhere"), "--checkpoint", tmpdir, "--out", tmpdir]) == 1
        assert main(["heatmap", "--data", tmpdir, "--out", tmpdir]) == 2

        # --count 必须为正数，0 不会退回配置里的默认值
        config = _write_config(tmpdir)
        out = Path(tmpdir) / "counted"
        assert main(["synth", "--config", config, "--count", "0", "--out", str(out)]) == 1
        assert main(["synth", "--config", config, "--count", "-3", "--out", str(out)]) == 1
        assert not (out / "manifest.txt").exists()
    print("  ✅ Pass")


def test_pipeline():
    """测试完整流程"""
    print("\n=== Test 2: Pipeline ===\n")

    with tempfile.TemporaryDirectory() as tmpdir:
        config = _write_config(tmpdir)
        data = str(Path(tmpdir) / "data")
        encoder = str(Path(tmpdir) / "encoder")
        restorer = str(Path(tmpdir) / "restorer")
        report_dir = Path(tmpdir) / "eval"

        assert main(["synth", "--config", config, "--seed", "3", "--out", data]) == 0
        manifest = DatasetManifest.load(data)
        assert len(manifest.records) == 10
        assert manifest.dataset_seed == 3

        assert main(["train-encoder", "--config", config, "--data", data, "--out", encoder]) == 0
        assert list((Path(encoder) / "checkpoints").iterdir())

        # tuned_encoder 预设缺少 --encoder 时是配置错误
        assert main(["train-restorer", "--config", config, "--data", data, "--out", restorer]) == 2
        # frozen_encoder 预设使用未微调的编码器，不接受 --encoder
        assert main(["train-restorer", "--config", config, "--data", data, "--encoder", encoder,
                     "--preset", "frozen_encoder", "--out", restorer]) == 2
        assert main(
            ["train-restorer", "--config", config, "--data", data, "--encoder", encoder, "--out", restorer]
        ) == 0

        assert main(["eval", "--data", data, "--checkpoint", restorer, "--split", "all", "--out", str(report_dir)]) == 0
        aggregates = read_report_aggregates(report_dir / "report.txt")
        assert aggregates["overall"]["count"] == 10
        assert set(aggregates) == {"noise", "haze", "overall"}

        assert main(["heatmap", "--config", config, "--data", data, "--checkpoint", encoder,
                     "--split", "all", "--out", tmpdir]) == 0
        assert (Path(tmpdir) / "heatmap.png").exists()
        assert main(["heatmap", "--config", config, "--data", data, "--untrained",
                     "--split", "all", "--out", tmpdir]) == 0
        assert (Path(tmpdir) / "heatmap_untrained.txt").exists()

        maps = Path(tmpdir) / "maps"
        assert main(["degradation-map", "--checkpoint", restorer, "--data", data, "--out", str(maps)]) == 0
        assert len(list(maps.glob("*_degradation_map.png"))) == 1
        assert len(list(maps.glob("*_input.png"))) == 1
    print("  ✅ Pass")


def test_oracle_trace():
    """测试 ISTA 轨迹命令"""
    print("\n=== Test 3: oracle-trace ===\n")

    with tempfile.TemporaryDirectory() as tmpdir:
        assert main(["oracle-trace", "--m", "16", "--n", "32", "--sparsity", "3", "--iterations", "20",
                     "--out", tmpdir]) == 0
        lines = (Path(tmpdir) / "oracle_trace.txt").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 22
        assert main(["oracle-trace", "--sparsity", "0", "--out", tmpdir]) == 1
    print("  ✅ Pass")


def test_grad_check_command():
    """测试梯度检查命令"""
    print("\n=== Test 4: grad-check ===\n")

    with tempfile.TemporaryDirectory() as tmpdir:
        assert main(["grad-check", "--target", "adapter", "--target", "contrastive", "--out", tmpdir]) == 0
        lines = (Path(tmpdir) / "grad_check.txt").read_text(encoding="utf-8").splitlines()
        assert [line.split("\t")[0] for line in lines] == ["adapter", "contrastive"]
        assert main(["grad-check", "--target", "nonexistent", "--out", tmpdir]) == 2
    print("  ✅ Pass")
