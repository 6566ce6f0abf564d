"""
Test Metrics

验证评估指标与可视化：
1. PSNR 封顶值与闭式结果
2. SSIM 与 scikit-image 独立实现一致，对称
3. MetricReport 聚合等于成员均值，文本格式可回读
4. 相似度热力图每行和为 1
5. 退化图：零残差时为常数图，重复导出逐字节一致
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from unfoldir.config import EncoderConfig, ModelConfig
from unfoldir.dataset import read_png
from unfoldir.degradations import apply_noise
from unfoldir.encoder import DegradationEncoder, LabelSet
from unfoldir.errors import ParameterError, ShapeError
from unfoldir.metrics import (
    ImageMetric,
    MetricReport,
    PSNR_CAP_DB,
    SimilarityMatrix,
    degradation_map,
    dump_degradation_map,
    psnr,
    read_report_aggregates,
    similarity_heatmap,
    ssim,
)
from unfoldir.unfolder import UnfoldingNet


def _gradient_image(size: int = 16) -> np.ndarray:
    ramp = np.linspace(0.1, 0.9, size)
    img = np.stack([np.add.outer(ramp, ramp) / 2.0, np.outer(ramp, np.ones(size)), np.outer(np.ones(size), ramp)], axis=2)
    return img


def test_psnr():
    """测试 PSNR"""
    print("\n=== Test 1: PSNR ===\n")

    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP_DB == 99.0

    b = np.clip(a, 0.0, 1.0 - 10.0 / 255.0)
    b = b + 10.0 / 255.0
    value = psnr(b - 10.0 / 255.0, b)
    print(f"  uniform 10/255 offset: {value:.4f} dB")
    assert abs(value - 20.0 * np.log10(25.5)) < 0.01
    assert abs(psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3)))) < 1e-12

    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ParameterError):
        psnr(a, a, max_val=0.0)
    print("  ✅ Pass")


def test_psnr_decreases_with_noise():
    """测试 PSNR 随噪声强度单调下降"""
    print("\n=== Test 2: PSNR monotone in sigma ===\n")

    img = _gradient_image(32)
    means = []
    for sigma in (5.0, 15.0, 25.0, 50.0):
        means.append(np.mean([psnr(img, apply_noise(img, sigma, seed)) for seed in range(30)]))
    print(f"  means: {[round(m, 2) for m in means]}")
    assert all(x > y for x, y in zip(means, means[1:]))
    print("  ✅ Pass")


def test_ssim_against_reference():
    """测试 SSIM 与 scikit-image 一致"""
    print("\n=== Test 3: SSIM oracle ===\n")

    img = _gradient_image(16)
    noisy = apply_noise(img, 25.0, seed=0)
    ours = ssim(img, noisy)
    reference = structural_similarity(
        img, noisy, data_range=1.0, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    print(f"  ours={ours:.6f} reference={reference:.6f}")
    assert abs(ours - reference) < 1e-4

    assert abs(ssim(img, img) - 1.0) < 1e-12
    assert ssim(img, 1.0 - img) < 1.0
    assert abs(ssim(img, noisy) - ssim(noisy, img)) < 1e-10
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    print("  ✅ Pass")


def test_report_aggregates():
    """测试报告聚合与文本格式"""
    print("\n=== Test 4: MetricReport ===\n")

    report = MetricReport()
    report.add(ImageMetric("a", "noise", 30.0, 0.9, input_psnr_db=20.0))
    report.add(ImageMetric("b", "noise", 32.0, 0.8, input_psnr_db=22.0))
    report.add(ImageMetric("c", "rain", 25.0, 0.7, input_psnr_db=21.0))

    aggregates = report.aggregates()
    assert list(aggregates) == ["noise", "rain", "overall"]
    assert aggregates["noise"]["psnr_db"] == pytest.approx(31.0)
    assert aggregates["noise"]["ssim"] == pytest.approx(0.85)
    assert aggregates["overall"]["psnr_db"] == pytest.approx(29.0)
    assert aggregates["overall"]["input_psnr_db"] == pytest.approx(21.0)

    lines = report.to_text().splitlines()
    assert lines[0] == "a\t30.00\t0.9000"
    assert lines[3] == "# aggregate"

    with tempfile.TemporaryDirectory() as tmpdir:
        path = report.save(Path(tmpdir) / "report.txt")
        parsed = read_report_aggregates(path)
        assert parsed["rain"]["count"] == 1
        assert parsed["overall"]["psnr_db"] == pytest.approx(29.0, abs=0.005)
    print("  ✅ Pass")


def test_similarity_heatmap():
    """测试热力图行归一化与输出文件"""
    print("\n=== Test 5: Similarity heat-map ===\n")

    torch.manual_seed(0)
    labels = ["image with noise", "image with rain", "image with haze"]
    encoder = DegradationEncoder(EncoderConfig(embed_dim=16), labels)
    datasets = [torch.rand(4, 3, 16, 16), torch.rand(2, 3, 16, 16)]
    matrix = similarity_heatmap(encoder, datasets, LabelSet(labels), rows=["noise", "rain"])
    assert matrix.values.shape == (2, 3)
    np.testing.assert_allclose(matrix.values.sum(axis=1), 1.0, atol=1e-6)
    assert matrix.values.min() >= 0.0 and matrix.values.max() <= 1.0

    single = similarity_heatmap(encoder, datasets[:1], LabelSet(labels[:1]), rows=["noise"])
    np.testing.assert_allclose(single.values, [[1.0]], atol=1e-12)

    with pytest.raises(ParameterError):
        similarity_heatmap(encoder, [torch.zeros(0, 3, 16, 16)], LabelSet(labels), rows=["noise"])

    with tempfile.TemporaryDirectory() as tmpdir:
        paths = matrix.save(tmpdir)
        assert paths["png"].exists()
        assert "image with rain" in paths["text"].read_text(encoding="utf-8")
    print("  ✅ Pass")


def test_diagonal_dominance():
    """测试对角占优判定"""
    print("\n=== Test 6: Diagonal dominance ===\n")

    good = SimilarityMatrix(["a", "b"], ["A", "B"], np.array([[0.7, 0.3], [0.4, 0.6]]))
    bad = SimilarityMatrix(["a", "b"], ["A", "B"], np.array([[0.7, 0.3], [0.6, 0.4]]))
    assert good.diagonal_dominant()
    assert not bad.diagonal_dominant()
    print("  ✅ Pass")


def test_degradation_map():
    """测试退化图导出"""
    print("\n=== Test 7: Degradation map ===\n")

    torch.manual_seed(0)
    cfg = ModelConfig(base_channels=8, num_levels=2, blocks=[1, 1], head_channels=8, identity_debug=True)
    identity_model = UnfoldingNet(cfg, embed_dim=8)
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))

    # 恒等 Φ̃ 与 x̂⁽⁰⁾ = ŷ：残差为零，导出常数图
    flat = degradation_map(identity_model, img)
    assert np.ptp(flat) == 0.0

    torch.manual_seed(1)
    model = UnfoldingNet(
        ModelConfig(base_channels=8, num_levels=2, blocks=[1, 1], head_channels=8, identity_init=False), embed_dim=8
    )
    with tempfile.TemporaryDirectory() as tmpdir:
        a = dump_degradation_map(model, img, Path(tmpdir) / "a.png")
        b = dump_degradation_map(model, img, Path(tmpdir) / "b.png")
        assert a.read_bytes() == b.read_bytes()
        dumped = read_png(a)
        assert dumped.shape == (16, 16, 3)
        assert dumped.min() == 0.0 and dumped.max() == 1.0
    print("  ✅ Pass")
