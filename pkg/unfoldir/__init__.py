"""
unfoldir - Degradation-guided deep unfolding restoration
视觉-语言引导的深度展开图像复原系统
"""

__version__ = "0.1.0"
