"""
Shared runtime objects.

Holds the package logger, the event logging helper, and the seeding and
device helpers every module relies on.
"""

import logging
import random
import sys
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import torch

logger = logging.getLogger("brats_unet")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def configure_logging(level: int = logging.INFO) -> None:
    """Attach a stderr handler to the package logger, replacing earlier ones.

    Args:
        level: Logging level for the package logger.
    """
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(level)


def log_event(event_type: str, message: str, case_id: Optional[str] = None) -> None:
    """Log a pipeline event.

    Args:
        event_type (str): The type of event (e.g. "epoch_end").
        message (str): The event message.
        case_id (Optional[str]): The case involved, if any.
    """
    timestamp = datetime.now(timezone.utc).isoformat()
    log_message = f"[{timestamp}] {event_type}: {message}"
    if case_id:
        log_message += f" (case: {case_id})"
    logger.info(log_message)


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch and request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def get_device(name: str = "cpu") -> torch.device:
    """Return the torch device for training and inference.

    Args:
        name (str): Device name; runs default to CPU so that reruns with
            the same seed reproduce bit-identical logs.

    Returns:
        torch.device: The resolved device.
    """
    return torch.device(name)
