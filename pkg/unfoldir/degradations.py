"""
Degradations - 合成退化算子

职责：
1. 实现 y = Φx + n 的五种合成退化（noise / blur / haze / rain / lowlight）
2. 校验 DegradationSpec 参数范围
3. 按分布抽样退化参数（数据集生成使用）

约定：
- 图像为 H×W×3 的 float64 数组，取值 [0, 1]
- 所有算子输出都截断回 [0, 1]
- 带随机性的算子只依赖 (img, params, seed)
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image as PILImage, ImageDraw
from scipy import ndimage

from .errors import ParameterError, ShapeError

DEGRADATION_KINDS = ("noise", "blur", "haze", "rain", "lowlight")

KIND_PRESETS = {
    "NHR": ("noise", "haze", "rain"),
    "NHRBL": ("noise", "haze", "rain", "blur", "lowlight"),
}

# 噪声各强度共用一个标签
DEFAULT_LABELS = {
    "noise": "image with noise",
    "blur": "image with blur",
    "haze": "image with haze",
    "rain": "image with rain",
    "lowlight": "image with low light",
}

PARAM_NAMES = {
    "noise": ("sigma",),
    "blur": ("kernel_radius", "kernel_sigma"),
    "haze": ("airlight", "transmission"),
    "rain": ("streak_count", "streak_length_px", "streak_angle_deg", "streak_intensity"),
    "lowlight": ("gamma", "gain"),
}

INTEGER_PARAMS = {"kernel_radius", "streak_count"}


@dataclass(frozen=True)
class DegradationSpec:
    """一次退化的完整描述：类型 + 标量参数 + 随机种子"""

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> "DegradationSpec":
        """检查参数完整且在声明范围内，返回自身便于链式调用"""
        if self.kind not in PARAM_NAMES:
            raise ParameterError(f"unknown degradation kind: {self.kind!r}")

        expected = set(PARAM_NAMES[self.kind])
        missing = expected - set(self.params)
        extra = set(self.params) - expected
        if missing or extra:
            raise ParameterError(
                f"{self.kind} params mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
            )

        p = self.params
        if self.kind == "noise":
            _check_noise(p["sigma"])
        elif self.kind == "blur":
            _check_blur(p["kernel_radius"], p["kernel_sigma"])
        elif self.kind == "haze":
            _check_haze(p["airlight"], p["transmission"])
        elif self.kind == "rain":
            _check_rain(p)
        elif self.kind == "lowlight":
            _check_lowlight(p["gamma"], p["gain"])
        return self

    def flatten_params(self) -> str:
        """参数按声明顺序展开成 key=value,key=value"""
        parts = []
        for name in PARAM_NAMES[self.kind]:
            value = self.params[name]
            parts.append(f"{name}={int(value)}" if name in INTEGER_PARAMS else f"{name}={float(value)!r}")
        return ",".join(parts)

    @staticmethod
    def parse_params(text: str) -> Dict[str, float]:
        """flatten_params 的逆操作"""
        params: Dict[str, float] = {}
        if not text:
            return params
        for item in text.split(","):
            name, _, value = item.partition("=")
            params[name] = int(value) if name in INTEGER_PARAMS else float(value)
        return params


# ---------------------------------------------------------------------------
# 参数检查


def _check_noise(sigma: float) -> None:
    if not np.isfinite(sigma) or sigma < 0:
        raise ParameterError(f"noise sigma must be >= 0, got {sigma}")


def _check_blur(kernel_radius: int, kernel_sigma: float) -> None:
    if kernel_radius < 0 or int(kernel_radius) != kernel_radius:
        raise ParameterError(f"kernel_radius must be a non-negative integer, got {kernel_radius}")
    if kernel_radius > 0 and not kernel_sigma > 0:
        raise ParameterError(f"kernel_sigma must be > 0 when kernel_radius > 0, got {kernel_sigma}")


def _check_haze(airlight: float, transmission: float) -> None:
    if not 0.0 <= airlight <= 1.0:
        raise ParameterError(f"airlight must lie in [0, 1], got {airlight}")
    if not 0.0 < transmission <= 1.0:
        raise ParameterError(f"transmission must lie in (0, 1], got {transmission}")


def _check_rain(p: Mapping[str, float]) -> None:
    if p["streak_count"] < 0 or int(p["streak_count"]) != p["streak_count"]:
        raise ParameterError(f"streak_count must be a non-negative integer, got {p['streak_count']}")
    if p["streak_length_px"] < 1:
        raise ParameterError(f"streak_length_px must be >= 1, got {p['streak_length_px']}")
    if not -90.0 <= p["streak_angle_deg"] <= 90.0:
        raise ParameterError(f"streak_angle_deg must lie in [-90, 90], got {p['streak_angle_deg']}")
    if not 0.0 <= p["streak_intensity"] <= 1.0:
        raise ParameterError(f"streak_intensity must lie in [0, 1], got {p['streak_intensity']}")


def _check_lowlight(gamma: float, gain: float) -> None:
    if not gamma >= 1.0:
        raise ParameterError(f"lowlight gamma must be >= 1, got {gamma}")
    if not 0.0 < gain <= 1.0:
        raise ParameterError(f"lowlight gain must lie in (0, 1], got {gain}")


def check_image(img: np.ndarray) -> np.ndarray:
    """确认 H×W×3 且数值有限，返回 float64 视图"""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an H×W×3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    return img


# ---------------------------------------------------------------------------
# 算子


def apply_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """加性高斯噪声，sigma 为 8-bit 尺度（内部除以 255）"""
    _check_noise(sigma)
    img = check_image(img)
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma / 255.0, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def gaussian_kernel(kernel_radius: int, kernel_sigma: float) -> np.ndarray:
    """归一化的 (2r+1)×(2r+1) 高斯核"""
    _check_blur(kernel_radius, kernel_sigma)
    if kernel_radius == 0:
        return np.ones((1, 1))
    ax = np.arange(-kernel_radius, kernel_radius + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * kernel_sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def apply_blur(img: np.ndarray, kernel_radius: int, kernel_sigma: float) -> np.ndarray:
    """高斯模糊，边界 reflect 填充"""
    kernel = gaussian_kernel(kernel_radius, kernel_sigma)
    img = check_image(img)
    if kernel.size == 1:
        return img.copy()
    out = ndimage.correlate(img, kernel[:, :, None], mode="reflect")
    return np.clip(out, 0.0, 1.0)


def apply_haze(img: np.ndarray, airlight: float, transmission: float) -> np.ndarray:
    """大气散射模型（全局透射率）：img·t + A·(1−t)"""
    _check_haze(airlight, transmission)
    img = check_image(img)
    out = img * transmission + airlight * (1.0 - transmission)
    return np.clip(out, 0.0, 1.0)


def render_streak_mask(height: int, width: int, params: Mapping[str, float], seed: int) -> np.ndarray:
    """
    绘制雨线掩膜

    Args:
        height, width: 图像尺寸
        params: streak_count / streak_length_px / streak_angle_deg
        seed: 随机种子（决定雨线起点）

    Returns:
        H×W 的 {0, 1} 掩膜
    """
    count = int(params["streak_count"])
    length = float(params["streak_length_px"])
    # 角度相对竖直方向
    theta = np.deg2rad(float(params["streak_angle_deg"]))
    dx, dy = length * np.sin(theta), length * np.cos(theta)

    rng = np.random.default_rng(seed)
    starts = rng.uniform(0.0, 1.0, size=(count, 2)) * np.array([width, height])

    canvas = PILImage.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for x0, y0 in starts:
        draw.line([(float(x0), float(y0)), (float(x0 + dx), float(y0 + dy))], fill=255, width=1)
    return np.asarray(canvas, dtype=np.float64) / 255.0


def apply_rain(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """加性雨线叠加"""
    if spec.kind != "rain":
        raise ParameterError(f"apply_rain needs a rain spec, got kind={spec.kind!r}")
    spec.validate()
    img = check_image(img)
    intensity = float(spec.params["streak_intensity"])
    if int(spec.params["streak_count"]) == 0 or intensity == 0.0:
        return img.copy()
    mask = render_streak_mask(img.shape[0], img.shape[1], spec.params, spec.seed)
    return np.clip(img + intensity * mask[:, :, None], 0.0, 1.0)


def apply_lowlight(img: np.ndarray, gamma: float, gain: float) -> np.ndarray:
    """低照度：gain · img^gamma"""
    _check_lowlight(gamma, gain)
    img = check_image(img)
    return np.clip(gain * np.power(img, gamma), 0.0, 1.0)


def apply_degradation(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """按 spec.kind 分发到具体算子"""
    spec.validate()
    p = spec.params
    if spec.kind == "noise":
        return apply_noise(img, p["sigma"], spec.seed)
    if spec.kind == "blur":
        return apply_blur(img, int(p["kernel_radius"]), p["kernel_sigma"])
    if spec.kind == "haze":
        return apply_haze(img, p["airlight"], p["transmission"])
    if spec.kind == "rain":
        return apply_rain(img, spec)
    return apply_lowlight(img, p["gamma"], p["gain"])


# ---------------------------------------------------------------------------
# 参数分布


SAMPLING_RANGES = {
    "blur": {"kernel_radius": (2, 3), "kernel_sigma": (1.0, 2.0)},
    "haze": {"airlight": (0.7, 0.95), "transmission": (0.4, 0.7)},
    # streak_density 为每像素雨线数
    "rain": {
        "streak_density": (0.006, 0.012),
        "streak_length_px": (6.0, 12.0),
        "streak_angle_deg": (-15.0, 15.0),
        "streak_intensity": (0.4, 0.8),
    },
    "lowlight": {"gamma": (1.5, 2.5), "gain": (0.5, 0.8)},
}


def sample_spec(
    kind: str,
    rng: np.random.Generator,
    image_shape: Sequence[int],
    noise_sigmas: Iterable[float] = (15.0, 25.0, 50.0),
    seed: Optional[int] = None,
) -> DegradationSpec:
    """
    从默认分布中抽取一个 DegradationSpec

    Args:
        kind: 退化类型
        rng: 参数抽样用的随机数发生器
        image_shape: (H, W, ...)，用于把雨线密度换算成数量
        noise_sigmas: 噪声强度候选（8-bit 尺度）
        seed: 算子种子；None 时从 rng 抽取

    Returns:
        已校验的 DegradationSpec
    """
    if kind not in PARAM_NAMES:
        raise ParameterError(f"unknown degradation kind: {kind!r}")

    if kind == "noise":
        params = {"sigma": float(rng.choice(np.asarray(list(noise_sigmas), dtype=np.float64)))}
    elif kind == "blur":
        lo, hi = SAMPLING_RANGES["blur"]["kernel_radius"]
        params = {
            "kernel_radius": int(rng.integers(lo, hi + 1)),
            "kernel_sigma": float(rng.uniform(*SAMPLING_RANGES["blur"]["kernel_sigma"])),
        }
    elif kind == "rain":
        ranges = SAMPLING_RANGES["rain"]
        area = int(image_shape[0]) * int(image_shape[1])
        params = {
            "streak_count": int(round(rng.uniform(*ranges["streak_density"]) * area)),
            "streak_length_px": float(rng.uniform(*ranges["streak_length_px"])),
            "streak_angle_deg": float(rng.uniform(*ranges["streak_angle_deg"])),
            "streak_intensity": float(rng.uniform(*ranges["streak_intensity"])),
        }
    else:
        params = {name: float(rng.uniform(*bounds)) for name, bounds in SAMPLING_RANGES[kind].items()}

    if seed is None:
        seed = int(rng.integers(0, 2 ** 63 - 1))
    return DegradationSpec(kind=kind, params=params, seed=int(seed)).validate()
