"""
Log Utils - 日志配置

组件日志统一格式为 "[Component] message"，与命令行输出保持一致。
"""

import logging
import os
import sys
from typing import Optional

LOG_FORMAT = "%(asctime)s [%(name)s] %(message)s"
DATE_FORMAT = "%H:%M:%S"


def get_logger(component: str) -> logging.Logger:
    """按组件名获取 logger（例如 "Trainer"）"""
    return logging.getLogger(f"unfoldir.{component}")


class _ComponentFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        # unfoldir.Trainer -> Trainer
        record.name = record.name.rsplit(".", 1)[-1]
        return super().format(record)


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> logging.Logger:
    """
    安装控制台和（可选）文件 handler

    Args:
        level: 日志级别，默认读取 UNFOLDIR_LOG_LEVEL，再默认 INFO
        log_file: 日志文件路径，默认读取 UNFOLDIR_LOG_FILE

    Returns:
        包级根 logger
    """
    level = (level or os.getenv("UNFOLDIR_LOG_LEVEL", "INFO")).upper()
    log_file = log_file or os.getenv("UNFOLDIR_LOG_FILE")

    root = logging.getLogger("unfoldir")
    root.setLevel(level)
    root.propagate = False

    # 重复调用时不叠加 handler
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    formatter = _ComponentFormatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    root.addHandler(console)

    if log_file:
        file_handler = logging.FileHandler(log_file, mode="a", encoding="utf-8")
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    return root
