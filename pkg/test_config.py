"""
Test Config

验证配置层：
1. 默认配置与 configs/ 下两套配置都能解析
2. 未知节、未知键、非法取值报 ConfigError
3. 跨节检查（裁剪尺寸整除、标签数量）
4. 配置哈希稳定且随内容变化
"""

from pathlib import Path

import pytest

from unfoldir.config import (
    UnfoldirConfig,
    config_hash,
    load_config,
    parse_config_text,
)
from unfoldir.errors import ConfigError

CONFIG_DIR = Path(__file__).parent / "configs"


def test_defaults_and_shipped_configs():
    """测试默认配置与自带配置文件"""
    print("\n=== Test 1: Shipped configs ===\n")

    default = load_config(None)
    assert default.data.kinds == ["noise", "blur", "haze", "rain", "lowlight"]
    assert default.model.schedule() == [0, 1, 1, 0]

    desk = load_config(CONFIG_DIR / "desk.cfg")
    full = load_config(CONFIG_DIR / "full.cfg")
    print(f"  desk schedule: {desk.model.schedule()}")
    print(f"  full schedule: {full.model.schedule()}")
    assert desk.model.num_levels == 2
    assert full.model.num_levels == 4
    assert full.model.schedule() == [0, 1, 2, 3, 3, 2, 1, 0]
    assert len(desk.label_list()) == len(desk.data.kinds)
    print("  ✅ Pass")


def test_parse_sections():
    """测试逗号列表与预设展开"""
    print("\n=== Test 2: Parsing ===\n")

    config = parse_config_text(
        """
[data]
kinds = NHR
noise_sigmas = 15, 25
image_size = 32

[model]
blocks = 1, 1
stage_schedule = 0, 1, 0

[train]
betas = 0.8, 0.9
crop_size = 16
"""
    )
    assert config.data.kinds == ["noise", "haze", "rain"]
    assert config.data.noise_sigmas == [15.0, 25.0]
    assert config.model.schedule() == [0, 1, 0]
    assert config.train.betas == (0.8, 0.9)
    assert config.label_list() == ["image with noise", "image with haze", "image with rain"]
    print("  ✅ Pass")


@pytest.mark.parametrize(
    "text",
    [
        "[optimizer]\nlr = 1\n",
        "[train]\nlearning_rate = 1e-3\n",
        "[data]\nkinds = noise, snow\n",
        "[encoder]\ngamma = 0\n",
        "[encoder]\nadapter_ratio = 1.5\n",
        "[model]\nnum_levels = 3\nblocks = 1, 1\n",
        "[train]\nepochs = 2\nwarmup_epochs = 5\n",
        "[train]\ncrop_size = 33\n",
        "[encoder]\nlabels = a, b\n",
        "not a config",
    ],
)
def test_invalid_configs(text):
    """测试非法配置报 ConfigError"""
    print("\n=== Test 3: Invalid config ===\n")

    with pytest.raises(ConfigError):
        parse_config_text(text)
    print("  ✅ Pass")


def test_missing_file():
    """测试配置文件不存在"""
    print("\n=== Test 4: Missing file ===\n")

    with pytest.raises(ConfigError):
        load_config("/nonexistent/unfoldir.cfg")
    print("  ✅ Pass")


def test_config_hash_and_seed():
    """测试配置哈希与 --seed 覆盖"""
    print("\n=== Test 5: Hash and seed ===\n")

    a = UnfoldirConfig()
    b = UnfoldirConfig()
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 16

    seeded = a.with_seed(9)
    assert seeded.data.dataset_seed == 9 and seeded.train.seed == 9
    assert a.train.seed == 0
    assert config_hash(seeded) != config_hash(a)
    assert a.with_seed(None) is a
    print("  ✅ Pass")
