"""
Errors - 异常层级

所有模块抛出的异常都继承自 UnfoldirError，CLI 根据类型映射退出码：
- ConfigError -> 2
- 其他 UnfoldirError -> 1
"""


class UnfoldirError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(UnfoldirError, ValueError):
    """Operator parameter outside its declared range."""


class ShapeError(UnfoldirError, ValueError):
    """Tensor/image shape or divisibility violation."""


class ConfigError(UnfoldirError):
    """Invalid config file, preset or manifest/config combination."""


class CheckpointError(UnfoldirError):
    """Missing, untrained or incompatible checkpoint."""


class DatasetError(UnfoldirError):
    """Unreadable clean source or unwritable destination."""


class GradCheckError(UnfoldirError, ValueError):
    """Objective handed to grad_check is not a scalar."""
